//! Desk-scale multi-query tracking transformer.
//!
//! A small, fully self-contained stack for class-agnostic multi-object
//! tracking with semantic decoder queries:
//!
//! - [`grad`] — dense `f64` tensors with reverse-mode autodiff and a
//!   finite-difference checker, enough to train the toy decoder.
//! - [`model`] — the multi-query transformer: frame encoder, decoder with
//!   `pos`/`id`/`both`/`det` query kinds, box and appearance heads, and
//!   query aggregation (collaborative gating, pooling, heuristic).
//! - [`assoc`] — Hungarian assignment, gIoU, matching costs, the
//!   appearance contrastive loss and the set-prediction training loss.
//! - [`track`] — the auto-regressive track lifecycle: confirmation by
//!   appearance memory, lost-track reID, multi-hypothesis branching and
//!   back-to-front post-processing.
//! - [`scene`] — synthetic scene simulation, pseudo-tracking pairs and
//!   MOT CSV I/O.
//! - [`metrics`] — CLEAR/MOTA and IDF1 evaluation with MT/ML counts.
//! - [`train`] — the two-frame training loop with Adam.

// modules land incrementally
pub mod assoc;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod track;
pub mod train;

//! Dense tensor math with reverse-mode automatic differentiation.
//!
//! All arithmetic is 64-bit; gradients are checked against central finite
//! differences at 1e-4 relative tolerance. A [`Tape`] is single-threaded;
//! distinct tapes may run on distinct threads with no shared state.

mod check;
mod checkpoint;
mod tape;
mod tensor;

pub use check::{finite_difference_check, FdReport};
pub use checkpoint::{BoundParams, ParamStore};
pub use tape::{Gradients, PrimitiveKind, Tape, Var};
pub use tensor::{GradError, Tensor};

//! Auto-regressive track lifecycle: appearance confirmation, memory,
//! lost-track reID, multi-hypothesis branching and B2F post-processing.

mod b2f;
mod engine;

pub use b2f::{b2f_postprocess, fill_gaps, B2fParams, Tracklet};
pub use engine::{run_sequence, TrackEngine};

use std::collections::VecDeque;

use crate::assoc::{self, AssocError};
use crate::model::{
    AggregatedOutput, BoundingBox, ModelConfig, ModelError, QueryBatch, QueryOutput,
    SemanticQueryBundle, TrackingMode,
};
use crate::scene::FrameGrid;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
    #[error("zero appearance vector")]
    ZeroVector,
    #[error("appearance memory is empty")]
    EmptyMemory,
    #[error("{mode:?} mode requires per-frame detections")]
    MissingDetections { mode: TrackingMode },
    #[error("track frames exceed the declared sequence length {seq_len}: frame {frame}")]
    MismatchedLength { seq_len: usize, frame: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Assoc(#[from] AssocError),
}

/// Distance between a query vector and the appearance memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryMetric {
    /// Minimum cosine distance over stored vectors.
    Min,
    /// Cosine distance to the renormalized element-wise mean.
    Avg,
}

/// Tracker hyper-parameters. Defaults follow the MOT17 settings
/// (tau_conf 0.75, tau_agree 0.1) with first + last-5 / min memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Cosine-distance confirmation threshold; a track stays active while
    /// its appearance distance to memory is below this.
    pub tau_conf: f64,
    /// Pos/id agreement threshold gating extra hypotheses.
    pub tau_agree: f64,
    /// Hypothesis count (1 disables branching).
    pub k_hyp: usize,
    /// Keep the spawn-frame appearance vector forever.
    pub mem_keep_first: bool,
    /// Ring-buffer capacity for recent appearance vectors.
    pub mem_last: usize,
    pub memory_metric: MemoryMetric,
    /// Frames a lost track is retained before finishing.
    pub lost_patience: u32,
    pub mode: TrackingMode,
    /// Route k_hyp = 1 through the branching code path instead of the
    /// dedicated single-hypothesis path (they must agree exactly).
    pub force_branch_path: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            tau_conf: 0.75,
            tau_agree: 0.1,
            k_hyp: 1,
            mem_keep_first: true,
            mem_last: 5,
            memory_metric: MemoryMetric::Min,
            lost_patience: 3,
            mode: TrackingMode::Private,
            force_branch_path: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        if !(0.0..=2.0).contains(&self.tau_conf) {
            return Err(TrackError::InvalidConfig(format!(
                "tau_conf {} outside [0,2]",
                self.tau_conf
            )));
        }
        if self.tau_agree < 0.0 || self.tau_agree > 2.0 {
            return Err(TrackError::InvalidConfig(format!(
                "tau_agree {} outside [0,2]",
                self.tau_agree
            )));
        }
        if self.k_hyp == 0 {
            return Err(TrackError::InvalidConfig("k_hyp must be at least 1".into()));
        }
        if self.mem_last == 0 {
            return Err(TrackError::InvalidConfig("mem_last must be at least 1".into()));
        }
        Ok(())
    }
}

/// `1 − cos(u, v)`, in `[0, 2]`. Zero vectors are rejected.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, TrackError> {
    assoc::cosine_distance(u, v).map_err(|_| TrackError::ZeroVector)
}

/// Argmin-distance candidate, provided its distance is strictly below
/// `tau`; ties break toward the lowest index.
pub fn match_by_appearance(
    query: &[f64],
    candidates: &[Vec<f64>],
    tau: f64,
) -> Result<Option<(usize, f64)>, TrackError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let d = cosine_distance(query, c)?;
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    Ok(best.filter(|(_, d)| *d < tau))
}

/// Appearance vectors of the spawn frame plus a ring buffer of recent
/// frames. The first vector is never evicted when retained.
#[derive(Debug, Clone)]
pub struct AppearanceMemory {
    first: Option<Vec<f64>>,
    recent: VecDeque<Vec<f64>>,
    keep_first: bool,
    capacity: usize,
}

impl AppearanceMemory {
    pub fn new(keep_first: bool, capacity: usize) -> Self {
        assert!(capacity >= 1, "memory capacity must be at least 1");
        AppearanceMemory { first: None, recent: VecDeque::new(), keep_first, capacity }
    }

    pub fn from_config(cfg: &TrackerConfig) -> Self {
        AppearanceMemory::new(cfg.mem_keep_first, cfg.mem_last)
    }

    pub fn push(&mut self, a: Vec<f64>) {
        if self.keep_first && self.first.is_none() {
            self.first = Some(a.clone());
        }
        self.recent.push_back(a);
        while self.recent.len() > self.capacity {
            self.recent.pop_front();
        }
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.first.iter().map(Vec::as_slice).chain(self.recent.iter().map(Vec::as_slice))
    }

    pub fn len(&self) -> usize {
        usize::from(self.first.is_some()) + self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Newest stored vector.
    pub fn latest(&self) -> Option<&[f64]> {
        self.recent.back().map(Vec::as_slice).or(self.first.as_deref())
    }
}

/// Distance from `a` to the memory under the configured metric. A mean
/// vector that cancels to (numerically) zero yields the uninformative
/// distance 1.
pub fn memory_distance(
    memory: &AppearanceMemory,
    a: &[f64],
    metric: MemoryMetric,
) -> Result<f64, TrackError> {
    if memory.is_empty() {
        return Err(TrackError::EmptyMemory);
    }
    match metric {
        MemoryMetric::Min => {
            let mut best = f64::INFINITY;
            for m in memory.vectors() {
                best = best.min(cosine_distance(a, m)?);
            }
            Ok(best)
        }
        MemoryMetric::Avg => {
            let dim = a.len();
            let mut mean = vec![0.0; dim];
            let mut count = 0usize;
            for m in memory.vectors() {
                assert_eq!(m.len(), dim, "memory vector width mismatch");
                for (acc, v) in mean.iter_mut().zip(m) {
                    *acc += v;
                }
                count += 1;
            }
            for v in &mut mean {
                *v /= count as f64;
            }
            let norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Ok(1.0);
            }
            cosine_distance(a, &mean)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackState {
    Active,
    /// Completed frames with no emission.
    Lost(u32),
    Finished,
}

/// One alternate continuation kept by multi-hypothesis tracking. Branches
/// share the parent's memory; their own boxes and appearance vectors are
/// committed only when the branch is.
#[derive(Debug, Clone)]
pub struct Branch {
    pub suffix: Vec<(usize, BoundingBox)>,
    pub apps: Vec<Vec<f64>>,
    pub bundle: SemanticQueryBundle,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u32,
    pub state: TrackState,
    /// (frame, box) with strictly increasing frames; gaps allowed.
    pub trajectory: Vec<(usize, BoundingBox)>,
    pub memory: AppearanceMemory,
    pub bundle: SemanticQueryBundle,
    pub branches: Vec<Branch>,
    app_sum: Vec<f64>,
    app_count: usize,
}

impl Track {
    pub fn new(id: u32, bundle: SemanticQueryBundle, cfg: &TrackerConfig) -> Self {
        let dim = bundle.a_prev.numel();
        Track {
            id,
            state: TrackState::Active,
            trajectory: Vec::new(),
            memory: AppearanceMemory::from_config(cfg),
            bundle,
            branches: Vec::new(),
            app_sum: vec![0.0; dim],
            app_count: 0,
        }
    }

    /// Record an emission: box into the trajectory (strictly increasing
    /// frames enforced), appearance into memory and the running mean.
    pub fn emit(&mut self, frame: usize, bbox: BoundingBox, app: &[f64]) {
        if let Some((last, _)) = self.trajectory.last() {
            assert!(*last < frame, "trajectory frames must strictly increase");
        }
        self.trajectory.push((frame, bbox));
        self.memory.push(app.to_vec());
        for (acc, v) in self.app_sum.iter_mut().zip(app) {
            *acc += v;
        }
        self.app_count += 1;
    }

    /// Drop trajectory entries at or after `frame` (used when committing a
    /// branch that rewrites the recent segment).
    pub fn truncate_from(&mut self, frame: usize) {
        self.trajectory.retain(|(f, _)| *f < frame);
    }

    /// Renormalized mean of every emitted appearance vector.
    pub fn mean_appearance(&self) -> Option<Vec<f64>> {
        if self.app_count == 0 {
            return None;
        }
        let norm: f64 = self.app_sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return None;
        }
        Some(self.app_sum.iter().map(|v| v / norm).collect())
    }

    pub fn is_live(&self) -> bool {
        !matches!(self.state, TrackState::Finished)
    }
}

/// What one engine step did, as disjoint id sets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrackUpdate {
    pub continued: Vec<u32>,
    pub spawned: Vec<u32>,
    pub lost: Vec<u32>,
    pub finished: Vec<u32>,
}

/// Convert finished tracks into MOT records (1-based frames, pixel boxes).
pub fn tracks_to_mot(
    tracks: &[Track],
    width: usize,
    height: usize,
) -> Vec<crate::scene::MotRecord> {
    let mut records = Vec::new();
    for track in tracks {
        for (frame, bbox) in &track.trajectory {
            records.push(crate::scene::MotRecord::from_normalized(
                (*frame + 1) as u32,
                track.id as i64,
                bbox,
                width,
                height,
                1.0,
            ));
        }
    }
    records.sort_by_key(|r| (r.frame, r.id));
    records
}

/// Convert refined tracklets into MOT records.
pub fn tracklets_to_mot(
    tracklets: &[Tracklet],
    width: usize,
    height: usize,
) -> Vec<crate::scene::MotRecord> {
    let mut records = Vec::new();
    for t in tracklets {
        for (frame, bbox) in &t.boxes {
            records.push(crate::scene::MotRecord::from_normalized(
                (*frame + 1) as u32,
                t.id as i64,
                bbox,
                width,
                height,
                1.0,
            ));
        }
    }
    records.sort_by_key(|r| (r.frame, r.id));
    records
}

/// What the engine needs from a model. The real transformer implements
/// this; scripted stand-ins drive the state-machine tests.
pub trait TrackModel {
    fn model_config(&self) -> &ModelConfig;

    /// Encode the frame and decode the batch to per-query outputs.
    fn decode_frame(
        &self,
        frame: &FrameGrid,
        batch: &QueryBatch,
    ) -> Result<Vec<QueryOutput>, ModelError>;

    /// Aggregate one object's query outputs into a final prediction.
    fn aggregate_outputs(&self, group: &[&QueryOutput]) -> Result<AggregatedOutput, ModelError>;
}

impl TrackModel for crate::model::MqtModel {
    fn model_config(&self) -> &ModelConfig {
        &self.config
    }

    fn decode_frame(
        &self,
        frame: &FrameGrid,
        batch: &QueryBatch,
    ) -> Result<Vec<QueryOutput>, ModelError> {
        let enc = self.encode_frame(frame)?;
        Ok(self.decode(&enc, batch)?.iter().map(|o| o.detach()).collect())
    }

    fn aggregate_outputs(&self, group: &[&QueryOutput]) -> Result<AggregatedOutput, ModelError> {
        self.aggregate(group)
    }
}

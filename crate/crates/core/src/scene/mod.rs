//! Synthetic scenes, pseudo-tracking pairs and MOT CSV I/O.

mod generate;
mod mot_io;
mod pseudo;
mod store;

pub use generate::{generate_scene, palette_color};
pub use mot_io::{read_mot, write_mot, MotKind, MotRecord};
pub use pseudo::pseudo_pair;
pub use store::{load_sequence, save_sequence, sequence_det_records, sequence_gt_records, SeqInfo};

use crate::model::BoundingBox;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("object count {objects} exceeds appearance palette size {palette}")]
    PaletteExhausted { objects: usize, palette: usize },
    #[error("{path}:{line}: malformed MOT record: {detail}")]
    MalformedLine { path: String, line: usize, detail: String },
    #[error("pseudo-pair rejection sampling exhausted after {retries} retries: {detail}")]
    AugmentationExhausted { retries: usize, detail: String },
    #[error("sequence store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One frame as a dense feature grid, row-major `[h][w][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    data: Vec<f64>,
}

impl FrameGrid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        FrameGrid { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn from_data(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * c, "frame grid data length mismatch");
        FrameGrid { h, w, c, data }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + ch]
    }
}

/// Ground truth for one object in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject {
    pub track_id: u32,
    pub bbox: BoundingBox,
    pub visible: bool,
}

/// A simulated sequence: frames plus per-frame ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<FrameGrid>,
    /// One entry per frame; objects keep their slot across frames.
    pub gt: Vec<Vec<GtObject>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Visible ground-truth objects of one frame.
    pub fn visible_gt(&self, frame: usize) -> Vec<GtObject> {
        self.gt[frame].iter().copied().filter(|g| g.visible).collect()
    }
}

/// Scene simulation parameters. Units are fractions of the frame per step
/// unless stated otherwise; `seed` makes generation fully deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub size_min: f64,
    pub size_max: f64,
    /// Appearance palette size; object count may not exceed it.
    pub palette: usize,
    /// Per-object, per-frame probability of starting an occlusion.
    pub occlusion_rate: f64,
    /// Occlusion duration range, frames.
    pub occlusion_min: usize,
    pub occlusion_max: usize,
    /// Uniform positional jitter added to the constant-velocity motion.
    pub jitter: f64,
    /// Per-frame, per-channel uniform noise added to an object's rendered
    /// appearance signature; makes measured appearance wobble so memory
    /// configurations actually differ.
    pub app_noise: f64,
    pub length: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 12,
            width: 12,
            channels: 3,
            objects_min: 3,
            objects_max: 3,
            speed_min: 0.005,
            speed_max: 0.02,
            size_min: 0.15,
            size_max: 0.25,
            palette: 8,
            occlusion_rate: 0.0,
            occlusion_min: 1,
            occlusion_max: 3,
            jitter: 0.002,
            app_noise: 0.0,
            length: 30,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.length == 0 {
            return Err(SceneError::InvalidConfig("zero frame dimension or length".into()));
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return Err(SceneError::InvalidConfig(format!(
                "bad object count range {}..={}",
                self.objects_min, self.objects_max
            )));
        }
        if self.speed_min > self.speed_max || self.speed_min < 0.0 {
            return Err(SceneError::InvalidConfig("bad speed range".into()));
        }
        if self.size_min > self.size_max || self.size_min <= 0.0 || self.size_max > 0.5 {
            return Err(SceneError::InvalidConfig("bad size range (need 0 < min <= max <= 0.5)".into()));
        }
        if self.occlusion_min == 0 || self.occlusion_min > self.occlusion_max {
            return Err(SceneError::InvalidConfig("bad occlusion duration range".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(SceneError::InvalidConfig("occlusion rate outside [0,1]".into()));
        }
        if self.app_noise < 0.0 || self.app_noise > 1.0 {
            return Err(SceneError::InvalidConfig("app_noise outside [0,1]".into()));
        }
        if self.objects_max > self.palette {
            return Err(SceneError::PaletteExhausted {
                objects: self.objects_max,
                palette: self.palette,
            });
        }
        Ok(())
    }
}

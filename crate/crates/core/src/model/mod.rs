//! The multi-query tracking transformer.
//!
//! A frame encoder over synthetic feature grids, a decoder driven by four
//! query kinds (`pos`, `id`, `both`, `det`), bounding-box and appearance
//! heads, and query aggregation.

mod aggregate;
mod net;
mod pos_enc;
mod query;

pub use aggregate::{AggMethod, AggregatedOutput, AggregatedVar};
pub use net::{EncodedFrame, MqtModel, QueryOutput, QueryOutputVar};
pub use query::{
    build_query_batch, Query, QueryBatch, QueryKindSet, QueryOwner, QuerySource, TrackingMode,
};

use crate::grad::{GradError, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("tag pool exhausted: {active} active tracks exceed n_tags = {n_tags}")]
    TagCapacity { active: usize, n_tags: usize },
    #[error("frame has {got} channels, model expects {want}")]
    ChannelMismatch { got: usize, want: usize },
    #[error("aggregation requires at least one query output")]
    EmptyAggregation,
    #[error("aggregation group mixes det with semantic kinds or repeats a kind")]
    BadAggregationGroup,
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Architecture hyper-parameters. Defaults are the desk-scale model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Embedding width.
    pub d_model: usize,
    /// Feed-forward width.
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Appearance-vector width.
    pub d_app: usize,
    /// Static learned detection queries per frame.
    pub n_det_queries: usize,
    /// Tag-embedding pool size (max concurrently active tracks).
    pub n_tags: usize,
    /// Frame channel count the patch projection expects.
    pub channels: usize,
    /// Output aggregation scheme.
    pub agg: AggMethod,
    /// Query kinds fed to the decoder; disabling kinds reproduces the
    /// single-query ablations.
    pub enabled_kinds: QueryKindSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            d_ff: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_app: 16,
            n_det_queries: 16,
            n_tags: 8,
            channels: 3,
            agg: AggMethod::CollabGating,
            enabled_kinds: QueryKindSet::all(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_app", self.d_app),
            ("n_tags", self.n_tags),
            ("channels", self.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{} must be positive", name)));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Axis-aligned box, center/size form, normalized to `[0,1]` of the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, ModelError> {
        let b = BoundingBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
            && self.cx.is_finite()
            && self.cy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidBox(format!("{:?}", self)))
        }
    }

    /// (x1, y1, x2, y2) corners.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoundingBox { cx: a[0], cy: a[1], w: a[2], h: a[3] }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.to_array().to_vec())
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let ix = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let iy = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// True when the whole box lies inside the unit frame.
    pub fn inside_frame(&self) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0
    }
}

/// The no-object attractor in appearance space: unmatched det-query
/// outputs are trained toward it, and the tracker rejects spawn candidates
/// near it. Plays the role a no-object class plays in classification-based
/// detectors.
pub fn background_appearance(d_app: usize) -> Vec<f64> {
    let mut v = vec![0.0; d_app];
    v[0] = 1.0;
    v
}

/// The four decoder query kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryKind {
    Pos,
    Id,
    Both,
    Det,
}

impl QueryKind {
    pub const SEMANTIC: [QueryKind; 3] = [QueryKind::Pos, QueryKind::Id, QueryKind::Both];

    /// Slot index in the aggregation gate input, `[pos, id, both, det]`.
    pub fn slot(&self) -> usize {
        match self {
            QueryKind::Pos => 0,
            QueryKind::Id => 1,
            QueryKind::Both => 2,
            QueryKind::Det => 3,
        }
    }
}

/// The per-track triple carried frame to frame as decoder queries.
#[derive(Debug, Clone)]
pub struct SemanticQueryBundle {
    /// Previous decoder output embedding (d_model).
    pub v_prev: Tensor,
    pub b_prev: BoundingBox,
    /// Previous appearance vector (d_app, unit L2 norm).
    pub a_prev: Tensor,
    /// Index into the learned tag pool; unique among live tracks.
    pub tag_index: usize,
}

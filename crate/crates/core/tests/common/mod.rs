//! Shared test support: a scripted world model that drives the track
//! engine without any learned weights, plus the gradient-check harness.

pub mod gradcheck;

use mqt_core::grad::Tensor;
use mqt_core::model::{
    AggregatedOutput, BoundingBox, ModelConfig, ModelError, QueryBatch, QueryKind, QueryOutput,
    QuerySource,
};
use mqt_core::scene::FrameGrid;
use mqt_core::track::TrackModel;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const D_APP: usize = 16;
/// Scripted scenarios confirm at this threshold: object matches are exact
/// (distance 0) and decoys stay far above it.
pub const SCRIPT_TAU: f64 = 0.3;

pub struct ScriptedObject {
    pub app: Vec<f64>,
    /// One entry per frame; `None` means occluded/absent.
    pub boxes: Vec<Option<BoundingBox>>,
}

/// A model whose outputs are read off a scripted world: queries resolve to
/// objects by appearance or box proximity, invisible objects produce decoy
/// outputs far from every real appearance.
pub struct ScriptedModel {
    pub cfg: ModelConfig,
    pub objects: Vec<ScriptedObject>,
}

/// Object appearances skip dimension 0, which is the engine's background
/// attractor.
pub fn basis_app(k: usize) -> Vec<f64> {
    let mut v = vec![0.0; D_APP];
    v[k + 1] = 1.0;
    v
}

/// Frames whose first grid value carries the frame index, so the scripted
/// model knows where it is.
pub fn marker_frames(n: usize) -> Vec<FrameGrid> {
    (0..n)
        .map(|t| {
            let mut f = FrameGrid::zeros(2, 2, 1);
            *f.at_mut(0, 0, 0) = t as f64;
            f
        })
        .collect()
}

/// cx of object `k` at frame `t` in the standard scripted layout.
pub fn script_cx(k: usize, t: usize) -> f64 {
    0.15 + 0.28 * k as f64 + 0.004 * t as f64
}

pub fn script_box(k: usize, t: usize) -> BoundingBox {
    BoundingBox::new(script_cx(k, t), 0.5, 0.1, 0.12).unwrap()
}

/// A world with `n` objects, each visible except on the frames its entry
/// in `hidden` covers.
pub fn scripted_world(n_objects: usize, frames: usize, hidden: &[(usize, std::ops::Range<usize>)]) -> ScriptedModel {
    let objects = (0..n_objects)
        .map(|k| ScriptedObject {
            app: basis_app(k),
            boxes: (0..frames)
                .map(|t| {
                    let occluded = hidden.iter().any(|(obj, r)| *obj == k && r.contains(&t));
                    (!occluded).then(|| script_box(k, t))
                })
                .collect(),
        })
        .collect();
    ScriptedModel {
        cfg: ModelConfig {
            d_model: D_APP,
            d_ff: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_app: D_APP,
            n_det_queries: 6,
            n_tags: 8,
            channels: 1,
            ..ModelConfig::default()
        },
        objects,
    }
}

fn decoy(t: usize, qi: usize) -> (Vec<f64>, BoundingBox) {
    let mut rng = ChaCha8Rng::seed_from_u64(90_000 + (t * 1000 + qi) as u64);
    let v: Vec<f64> = (0..D_APP).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let app = v.into_iter().map(|x| x / norm).collect();
    (app, BoundingBox::new(0.5, 0.9, 0.01, 0.01).unwrap())
}

impl ScriptedModel {
    fn frame_of(&self, frame: &FrameGrid) -> usize {
        frame.at(0, 0, 0) as usize
    }

    fn visible_at(&self, t: usize) -> Vec<(usize, BoundingBox)> {
        self.objects
            .iter()
            .enumerate()
            .filter_map(|(k, o)| o.boxes[t].map(|b| (k, b)))
            .collect()
    }

    fn by_app(&self, a: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, o) in self.objects.iter().enumerate() {
            let dot: f64 = o.app.iter().zip(a).map(|(x, y)| x * y).sum();
            let d = 1.0 - dot;
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        best.filter(|(_, d)| *d < SCRIPT_TAU).map(|(k, _)| k)
    }

    fn by_box(&self, b: &BoundingBox, t: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, obj_box) in self.visible_at(t) {
            let d = ((obj_box.cx - b.cx).powi(2) + (obj_box.cy - b.cy).powi(2)).sqrt();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        best.filter(|(_, d)| *d < 0.2).map(|(k, _)| k)
    }

    fn object_output(&self, k: usize, t: usize) -> Option<(Vec<f64>, BoundingBox)> {
        self.objects[k].boxes[t].map(|b| (self.objects[k].app.clone(), b))
    }
}

impl TrackModel for ScriptedModel {
    fn model_config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn decode_frame(
        &self,
        frame: &FrameGrid,
        batch: &QueryBatch,
    ) -> Result<Vec<QueryOutput>, ModelError> {
        let t = self.frame_of(frame);
        let visible = self.visible_at(t);
        let mut out = Vec::with_capacity(batch.len());
        for (qi, q) in batch.queries.iter().enumerate() {
            let resolved: Option<usize> = match (&q.source, q.kind) {
                (QuerySource::DetIndex(i), _) => visible.get(*i).map(|(k, _)| *k),
                (QuerySource::Box(b), _) => self.by_box(b, t),
                (QuerySource::Appearance(a), _) => self.by_app(a.data()),
                (QuerySource::Embedding(v), _) => self.by_app(v.data()),
            };
            let (app, bbox) = resolved
                .and_then(|k| self.object_output(k, t))
                .unwrap_or_else(|| decoy(t, qi));
            out.push(QueryOutput {
                kind: q.kind,
                owner: q.owner,
                v: Tensor::from_vec(app.clone()),
                b: bbox,
                a: Tensor::from_vec(app),
            });
        }
        Ok(out)
    }

    fn aggregate_outputs(&self, group: &[&QueryOutput]) -> Result<AggregatedOutput, ModelError> {
        let first = group.first().ok_or(ModelError::EmptyAggregation)?;
        Ok(AggregatedOutput {
            v: first.v.clone(),
            b: first.b,
            a: first.a.clone(),
            gate_weights: vec![(QueryKind::Pos, 1.0)],
        })
    }
}

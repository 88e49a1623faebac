//! Two-frame training: an initialization step on frame k (box regression
//! from pos and det queries) and a tracking step on frame k+1 (the
//! set-prediction loss with appearance matching across the two steps).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assoc::{
    giou_var, hungarian, l1_var, match_cost, set_prediction_loss, AssocError, CostMatrix,
    LossWeights, TrackPrediction,
};
use crate::grad::{GradError, Tape, Var};
use crate::model::{
    BoundingBox, ModelError, MqtModel, Query, QueryBatch, QueryKind, QueryOutputVar, QueryOwner,
    QuerySource,
};
use crate::scene::{pseudo_pair, SceneError, Sequence};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("nothing to train on: every frame pair is empty")]
    NoTrainingPairs,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Assoc(#[from] AssocError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Optimization schedule. Defaults are the desk-scale recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub lr: f64,
    /// Multiply the learning rate by this factor once, at
    /// `lr_decay_at · iterations`.
    pub lr_decay_factor: f64,
    pub lr_decay_at: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_grad_norm: f64,
    /// Uniform jitter applied to ground-truth boxes fed as init pos
    /// queries.
    pub pos_query_noise: f64,
    /// Train on affine pseudo-pairs instead of adjacent scene frames.
    pub use_pseudo_pairs: bool,
    pub max_aug: f64,
    /// Fraction of iterations trained without det queries, so batches
    /// without them (the public protocol) stay in-distribution.
    pub det_dropout: f64,
    /// Fraction of iterations trained without semantic track queries,
    /// exercising the det-only tracking pathway (detection, reID).
    pub track_dropout: f64,
    /// Fraction of iterations that add per-frame detection pos queries to
    /// the tracking step, as the public protocols do.
    pub pub_det_rate: f64,
    /// Weight pulling unmatched det-query appearances toward the
    /// background attractor (the class-agnostic no-object signal).
    pub bg_attract: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            iterations: 3000,
            lr: 3e-3,
            lr_decay_factor: 0.1,
            lr_decay_at: 0.8,
            clip_grad_norm: 1.0,
            pos_query_noise: 0.02,
            use_pseudo_pairs: false,
            max_aug: 0.05,
            det_dropout: 0.15,
            track_dropout: 0.4,
            pub_det_rate: 0.5,
            bg_attract: 0.05,
            seed: 7,
            log_every: 50,
        }
    }
}

/// What the loop trains on: a fixed corpus of sequences, or a fresh
/// two-frame scene sampled from the generator every iteration (removes
/// any possibility of memorizing a finite corpus).
#[derive(Debug, Clone)]
pub enum TrainData<'a> {
    Sequences(&'a [Sequence]),
    FreshScenes { base: crate::scene::SceneConfig },
}

/// One logged point of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub iteration: usize,
    pub total: f64,
    pub box_loss: f64,
    pub app_loss: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(model: &MqtModel) -> Self {
        let shapes: Vec<usize> = model.params.iter().map(|(_, t)| t.numel()).collect();
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut MqtModel, grads: &[Vec<f64>], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for (pi, (_, tensor)) in model.params.iter_mut().enumerate() {
            let g = &grads[pi];
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let data = tensor.data_mut();
            for i in 0..data.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

fn jitter_box(b: &BoundingBox, noise: f64, rng: &mut ChaCha8Rng) -> BoundingBox {
    let j = |r: &mut ChaCha8Rng| r.gen_range(-noise..=noise);
    BoundingBox {
        cx: (b.cx + j(rng)).clamp(0.0, 1.0),
        cy: (b.cy + j(rng)).clamp(0.0, 1.0),
        w: (b.w + j(rng)).clamp(0.01, 1.0),
        h: (b.h + j(rng)).clamp(0.01, 1.0),
    }
}

/// Box regression loss over a Hungarian matching of outputs to targets.
fn matched_box_loss(
    tape: &Tape,
    outputs: &[&QueryOutputVar],
    gt: &[(u32, BoundingBox)],
    weights: &LossWeights,
) -> Result<(Var, Vec<(usize, u32)>), AssocError> {
    if outputs.is_empty() || gt.is_empty() {
        return Ok((tape.scalar(0.0), Vec::new()));
    }
    let costs = CostMatrix::from_fn(outputs.len(), gt.len(), |r, c| {
        match_cost(&outputs[r].bbox(), outputs[r].a.value().data(), &gt[c].1, None, weights)
    })?;
    let mut loss: Option<Var> = None;
    let mut pairs = Vec::new();
    for (oi, gi) in hungarian(&costs).pairs {
        let (gt_id, gt_box) = gt[gi];
        let l1 = l1_var(tape, &outputs[oi].b, &gt_box).scale(weights.w_l1);
        let g = giou_var(tape, &outputs[oi].b, &gt_box).neg().add_const(1.0).scale(weights.w_giou);
        let term = l1.add(&g);
        loss = Some(match loss {
            None => term,
            Some(s) => s.add(&term),
        });
        pairs.push((oi, gt_id));
    }
    Ok((loss.unwrap_or_else(|| tape.scalar(0.0)), pairs))
}

fn det_query_batch(n: usize) -> Vec<Query> {
    (0..n)
        .map(|i| Query {
            kind: QueryKind::Det,
            owner: QueryOwner::Detection,
            source: QuerySource::DetIndex(i),
            tag: None,
        })
        .collect()
}

/// One two-frame training step; returns the loss values.
#[allow(clippy::too_many_lines)]
struct BatchMix {
    use_det: bool,
    use_tracks: bool,
    add_pub_dets: bool,
    /// Semantic kinds propagated this iteration. Varying the subset keeps
    /// every single- and multi-query configuration in-distribution and
    /// supervises each kind's own outputs through the aggregation
    /// passthrough.
    kinds: Vec<QueryKind>,
}

fn sample_kinds(rng: &mut ChaCha8Rng) -> Vec<QueryKind> {
    let all = [QueryKind::Pos, QueryKind::Id, QueryKind::Both];
    let roll: f64 = rng.gen();
    if roll < 0.5 {
        all.to_vec()
    } else if roll < 0.75 {
        vec![all[rng.gen_range(0..3)]]
    } else {
        let skip = rng.gen_range(0..3);
        all.iter().copied().enumerate().filter(|(i, _)| *i != skip).map(|(_, k)| k).collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &MqtModel,
    frame_a: &crate::scene::FrameGrid,
    gt_a: &[(u32, BoundingBox)],
    frame_b: &crate::scene::FrameGrid,
    gt_b: &[(u32, BoundingBox)],
    weights: &LossWeights,
    tau_conf: f64,
    noise: f64,
    bg_weight: f64,
    mix: &BatchMix,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, LossPoint), TrainError> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let n_det = model.config.n_det_queries;

    // ── Init step on frame a ───────────────────────────────────────────
    let mut init_queries: Vec<Query> = gt_a
        .iter()
        .map(|(_, b)| Query {
            kind: QueryKind::Pos,
            owner: QueryOwner::Detection,
            source: QuerySource::Box(jitter_box(b, noise, rng)),
            tag: None,
        })
        .collect();
    if mix.use_det {
        init_queries.extend(det_query_batch(n_det));
    }
    let mem_a = model.encode_frame_var(&tape, &bound, frame_a)?;
    let outs_a =
        model.decode_var(&tape, &bound, &mem_a, &QueryBatch { queries: init_queries })?;
    let (pos_outs, det_outs_a): (Vec<&QueryOutputVar>, Vec<&QueryOutputVar>) =
        outs_a.iter().partition(|o| o.kind == QueryKind::Pos);

    // Both query pathways learn to regress boxes at init.
    let (pos_loss, pos_pairs) = matched_box_loss(&tape, &pos_outs, gt_a, weights)?;
    let (det_loss, det_pairs_a) = matched_box_loss(&tape, &det_outs_a, gt_a, weights)?;
    let init_loss = pos_loss.add(&det_loss);

    // Previous-frame appearance pool: every init output, pos first. The
    // background attractor joins as one more negative so real appearances
    // stay away from it.
    let bg = tape.constant(crate::grad::Tensor::from_vec(
        crate::model::background_appearance(model.config.d_app),
    ));
    let ordered_a: Vec<&QueryOutputVar> =
        pos_outs.iter().chain(det_outs_a.iter()).copied().collect();
    let mut prev_apps: Vec<Var> = ordered_a.iter().map(|o| o.a.clone()).collect();
    prev_apps.push(bg.clone());
    let prev_app_of_gt: BTreeMap<u32, usize> =
        pos_pairs.iter().map(|(oi, gt_id)| (*gt_id, *oi)).collect();

    // ── Tracking step on frame b ───────────────────────────────────────
    // Known tracks propagate the (detached) init outputs as semantic
    // queries; tags are drawn randomly so the whole pool trains.
    let mut tags: Vec<usize> = (0..model.config.n_tags).collect();
    tags.shuffle(rng);
    let mut track_queries: Vec<Query> = Vec::new();
    let mut known: Vec<(u32, usize, usize)> = Vec::new(); // (gt_id, prev_idx, tag)
    let propagated: &[(usize, u32)] = if mix.use_tracks { &pos_pairs } else { &[] };
    for (k, (oi, gt_id)) in propagated.iter().take(model.config.n_tags).enumerate() {
        let out = ordered_a[*oi];
        let tag = tags[k];
        known.push((*gt_id, *oi, tag));
        for kind in &mix.kinds {
            let source = match kind {
                QueryKind::Pos => QuerySource::Box(out.bbox()),
                QueryKind::Id => QuerySource::Appearance(out.a.value()),
                QueryKind::Both => QuerySource::Embedding(out.v.value()),
                QueryKind::Det => unreachable!(),
            };
            track_queries.push(Query {
                kind: *kind,
                owner: QueryOwner::Track(*gt_id),
                source,
                tag: Some(tag),
            });
        }
    }
    if mix.use_det {
        track_queries.extend(det_query_batch(n_det));
    }
    if mix.add_pub_dets {
        for (_, b) in gt_b {
            track_queries.push(Query {
                kind: QueryKind::Pos,
                owner: QueryOwner::Detection,
                source: QuerySource::Box(jitter_box(b, noise, rng)),
                tag: None,
            });
        }
    }
    if track_queries.is_empty() {
        track_queries.extend(det_query_batch(n_det));
    }

    let mem_b = model.encode_frame_var(&tape, &bound, frame_b)?;
    let outs_b =
        model.decode_var(&tape, &bound, &mem_b, &QueryBatch { queries: track_queries })?;

    let mut tracks: Vec<TrackPrediction> = Vec::new();
    for (gt_id, prev_idx, _) in &known {
        let group: Vec<&QueryOutputVar> = outs_b
            .iter()
            .filter(|o| o.owner == QueryOwner::Track(*gt_id))
            .collect();
        let agg = model.aggregate_var(&tape, &bound, &group)?;
        tracks.push(TrackPrediction { gt_id: *gt_id, agg, prev_idx: *prev_idx });
    }
    let det_outs_b: Vec<&QueryOutputVar> =
        outs_b.iter().filter(|o| o.owner == QueryOwner::Detection).collect();

    let set = set_prediction_loss(
        &tape,
        &tracks,
        &det_outs_b,
        gt_b,
        &prev_apps,
        &prev_app_of_gt,
        weights,
        tau_conf,
    )?;

    // Pull unmatched det-query appearances toward the background
    // attractor (no-object analogue of the dropped classification head).
    let mut bg_loss: Option<Var> = None;
    let matched_a: Vec<usize> = det_pairs_a.iter().map(|(oi, _)| *oi).collect();
    let unmatched_dets = det_outs_a
        .iter()
        .enumerate()
        .filter(|(i, _)| !matched_a.contains(i))
        .map(|(_, o)| *o)
        .chain(
            det_outs_b
                .iter()
                .enumerate()
                .filter(|(i, o)| o.kind == QueryKind::Det && !set.det_matched.contains(i))
                .map(|(_, o)| *o),
        );
    for o in unmatched_dets {
        let term = o.a.dot(&bg).neg().add_const(1.0);
        bg_loss = Some(match bg_loss {
            None => term,
            Some(s) => s.add(&term),
        });
    }
    let bg_loss = bg_loss.unwrap_or_else(|| tape.scalar(0.0)).scale(bg_weight);

    let total = init_loss.add(&set.total).add(&bg_loss);
    let point = LossPoint {
        iteration: 0,
        total: total.item(),
        box_loss: init_loss.item() + set.box_value,
        app_loss: set.app_value,
    };

    let grads = tape.backward(&total)?;
    let grad_vecs: Vec<Vec<f64>> = model
        .params
        .iter()
        .map(|(name, _)| grads.wrt_or_zeros(bound.get(name)).data().to_vec())
        .collect();
    Ok((grad_vecs, point))
}

fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm: f64 = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
    }
}

fn visible_gt(seq: &Sequence, frame: usize) -> Vec<(u32, BoundingBox)> {
    seq.gt[frame]
        .iter()
        .filter(|g| g.visible)
        .map(|g| (g.track_id, g.bbox))
        .collect()
}

/// Train on adjacent-frame pairs (or affine pseudo-pairs) sampled from the
/// given sequences. Deterministic per schedule seed; returns the loss
/// curve sampled every `log_every` iterations (plus the last).
pub fn train(
    model: &mut MqtModel,
    data: TrainData<'_>,
    weights: &LossWeights,
    tau_conf: f64,
    schedule: &TrainSchedule,
) -> Result<Vec<LossPoint>, TrainError> {
    let pairs: Vec<(usize, usize)> = match &data {
        TrainData::Sequences(sequences) => {
            let pairs: Vec<(usize, usize)> = sequences
                .iter()
                .enumerate()
                .flat_map(|(si, s)| (0..s.len().saturating_sub(1)).map(move |f| (si, f)))
                .collect();
            if pairs.is_empty() {
                return Err(TrainError::NoTrainingPairs);
            }
            pairs
        }
        TrainData::FreshScenes { base } => {
            base.validate()?;
            Vec::new()
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = Adam::new(model);
    let mut curve = Vec::new();
    let decay_from = (schedule.lr_decay_at * schedule.iterations as f64) as usize;

    #[allow(unused_assignments)]
    let mut fresh: Option<Sequence> = None;
    for it in 0..schedule.iterations {
        let (seq, fi): (&Sequence, usize) = match &data {
            TrainData::Sequences(sequences) => {
                let (si, fi) = pairs[rng.gen_range(0..pairs.len())];
                (&sequences[si], fi)
            }
            TrainData::FreshScenes { base } => {
                let cfg = crate::scene::SceneConfig {
                    length: 2,
                    seed: rng.gen(),
                    ..base.clone()
                };
                fresh = Some(crate::scene::generate_scene(&cfg)?);
                (fresh.as_ref().unwrap(), 0)
            }
        };
        let mut mix = BatchMix {
            use_det: rng.gen::<f64>() >= schedule.det_dropout,
            use_tracks: rng.gen::<f64>() >= schedule.track_dropout,
            add_pub_dets: rng.gen::<f64>() < schedule.pub_det_rate,
            kinds: sample_kinds(&mut rng),
        };
        if !mix.use_tracks {
            mix.use_det = true;
        }

        let (mut grads, mut point) = if schedule.use_pseudo_pairs {
            let gt = visible_gt(seq, fi);
            let boxes: Vec<BoundingBox> = gt.iter().map(|(_, b)| *b).collect();
            let pair_seed = rng.gen::<u64>();
            let (fa, fb, moved) =
                pseudo_pair(&seq.frames[fi], &boxes, schedule.max_aug, true, pair_seed)?;
            let gt_b: Vec<(u32, BoundingBox)> = gt
                .iter()
                .zip(&moved)
                .map(|((id, _), (_, m))| (*id, *m))
                .collect();
            train_step(
                model,
                &fa,
                &gt,
                &fb,
                &gt_b,
                weights,
                tau_conf,
                schedule.pos_query_noise,
                schedule.bg_attract,
                &mix,
                &mut rng,
            )?
        } else {
            train_step(
                model,
                &seq.frames[fi],
                &visible_gt(seq, fi),
                &seq.frames[fi + 1],
                &visible_gt(seq, fi + 1),
                weights,
                tau_conf,
                schedule.pos_query_noise,
                schedule.bg_attract,
                &mix,
                &mut rng,
            )?
        };

        clip_gradients(&mut grads, schedule.clip_grad_norm);
        let lr = if it >= decay_from && decay_from < schedule.iterations {
            schedule.lr * schedule.lr_decay_factor
        } else {
            schedule.lr
        };
        adam.step(model, &grads, lr);

        point.iteration = it;
        if it % schedule.log_every.max(1) == 0 || it + 1 == schedule.iterations {
            curve.push(point);
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scene::{generate_scene, SceneConfig};

    fn tiny_model() -> MqtModel {
        MqtModel::new(
            ModelConfig {
                d_model: 16,
                d_ff: 32,
                n_heads: 2,
                n_enc_layers: 1,
                n_dec_layers: 1,
                d_app: 8,
                n_det_queries: 6,
                n_tags: 4,
                channels: 3,
                ..ModelConfig::default()
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn loss_decreases_on_a_tiny_scene() {
        let scene = SceneConfig {
            height: 8,
            width: 8,
            objects_min: 2,
            objects_max: 2,
            length: 6,
            seed: 5,
            ..SceneConfig::default()
        };
        let seq = generate_scene(&scene).unwrap();
        let mut model = tiny_model();
        let schedule = TrainSchedule {
            iterations: 120,
            lr: 5e-3,
            log_every: 10,
            seed: 3,
            ..TrainSchedule::default()
        };
        let curve =
            train(&mut model, TrainData::Sequences(&[seq]), &LossWeights::default(), 0.75, &schedule).unwrap();
        let first_avg: f64 =
            curve.iter().take(3).map(|p| p.total).sum::<f64>() / 3.0;
        let last_avg: f64 =
            curve.iter().rev().take(3).map(|p| p.total).sum::<f64>() / 3.0;
        assert!(
            last_avg < first_avg * 0.7,
            "loss did not decrease: first {} last {}",
            first_avg,
            last_avg
        );
        assert!(curve.iter().all(|p| p.total.is_finite()));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let scene = SceneConfig {
            height: 8,
            width: 8,
            objects_min: 2,
            objects_max: 2,
            length: 4,
            seed: 9,
            ..SceneConfig::default()
        };
        let seq = generate_scene(&scene).unwrap();
        let schedule =
            TrainSchedule { iterations: 20, log_every: 5, seed: 21, ..TrainSchedule::default() };
        let run = || {
            let mut model = tiny_model();
            train(&mut model, TrainData::Sequences(&[seq.clone()]), &LossWeights::default(), 0.75, &schedule)
                .unwrap()
                .last()
                .unwrap()
                .total
        };
        let a = run();
        let b = run();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn pseudo_pair_training_runs() {
        let scene = SceneConfig {
            height: 8,
            width: 8,
            objects_min: 2,
            objects_max: 2,
            length: 3,
            seed: 13,
            ..SceneConfig::default()
        };
        let seq = generate_scene(&scene).unwrap();
        let mut model = tiny_model();
        let schedule = TrainSchedule {
            iterations: 10,
            use_pseudo_pairs: true,
            log_every: 2,
            ..TrainSchedule::default()
        };
        let curve =
            train(&mut model, TrainData::Sequences(&[seq]), &LossWeights::default(), 0.75, &schedule).unwrap();
        assert!(!curve.is_empty());
        assert!(curve.iter().all(|p| p.total.is_finite()));
    }
}

//! The toy transformer: patch projection + encoder, query embedding +
//! decoder, and the box / appearance heads.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grad::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::scene::FrameGrid;

use super::pos_enc::grid_positional_encoding;
use super::query::{QueryBatch, QueryOwner, QuerySource};
use super::{BoundingBox, ModelConfig, ModelError, QueryKind};

/// Decoder output for one input query, value level.
#[derive(Debug, Clone)]
pub struct QueryOutput {
    pub kind: QueryKind,
    pub owner: QueryOwner,
    pub v: Tensor,
    pub b: BoundingBox,
    pub a: Tensor,
}

/// Decoder output for one input query, on a tape.
#[derive(Debug, Clone)]
pub struct QueryOutputVar {
    pub kind: QueryKind,
    pub owner: QueryOwner,
    pub v: Var,
    /// Post-sigmoid (cx, cy, w, h), each in (0,1).
    pub b: Var,
    pub a: Var,
}

impl QueryOutputVar {
    pub fn bbox(&self) -> BoundingBox {
        let t = self.b.value();
        BoundingBox::from_array([t.data()[0], t.data()[1], t.data()[2], t.data()[3]])
    }

    pub fn detach(&self) -> QueryOutput {
        QueryOutput {
            kind: self.kind,
            owner: self.owner,
            v: self.v.value(),
            b: self.bbox(),
            a: self.a.value(),
        }
    }
}

/// An encoded frame: the per-frame tape plus the encoder memory on it.
/// Decoding continues on the same tape.
pub struct EncodedFrame {
    pub tape: Tape,
    pub bound: BoundParams,
    pub memory: Var,
}

/// Model = config + named parameters. Parameters are immutable during
/// inference; each forward pass owns a private tape.
#[derive(Clone)]
pub struct MqtModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::new(vec![rows, cols], data).expect("xavier shape")
}

fn embedding(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::new(vec![rows, cols], data).expect("embedding shape")
}

impl MqtModel {
    /// Fresh model with seeded Xavier-uniform initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let d = config.d_model;
        let mut p = ParamStore::new();

        p.add("patch.w", xavier(r, config.channels, d));
        p.add("patch.b", Tensor::zeros(&[d]));

        let add_attn = |p: &mut ParamStore, r: &mut ChaCha8Rng, prefix: &str| {
            for name in ["wq", "wk", "wv", "wo"] {
                p.add(&format!("{prefix}.{name}"), xavier(r, d, d));
            }
            for name in ["bq", "bk", "bv", "bo"] {
                p.add(&format!("{prefix}.{name}"), Tensor::zeros(&[d]));
            }
        };
        let add_ln = |p: &mut ParamStore, prefix: &str| {
            p.add(&format!("{prefix}.g"), Tensor::full(&[d], 1.0));
            p.add(&format!("{prefix}.b"), Tensor::zeros(&[d]));
        };
        let add_ff = |p: &mut ParamStore, r: &mut ChaCha8Rng, prefix: &str| {
            p.add(&format!("{prefix}.w1"), xavier(r, d, config.d_ff));
            p.add(&format!("{prefix}.b1"), Tensor::zeros(&[config.d_ff]));
            p.add(&format!("{prefix}.w2"), xavier(r, config.d_ff, d));
            p.add(&format!("{prefix}.b2"), Tensor::zeros(&[d]));
        };

        for i in 0..config.n_enc_layers {
            add_attn(&mut p, r, &format!("enc{i}.attn"));
            add_ln(&mut p, &format!("enc{i}.ln1"));
            add_ff(&mut p, r, &format!("enc{i}.ff"));
            add_ln(&mut p, &format!("enc{i}.ln2"));
        }
        for i in 0..config.n_dec_layers {
            add_attn(&mut p, r, &format!("dec{i}.self"));
            add_ln(&mut p, &format!("dec{i}.ln1"));
            add_attn(&mut p, r, &format!("dec{i}.cross"));
            add_ln(&mut p, &format!("dec{i}.ln2"));
            add_ff(&mut p, r, &format!("dec{i}.ff"));
            add_ln(&mut p, &format!("dec{i}.ln3"));
        }

        p.add("pos_proj.w", xavier(r, 4, d));
        p.add("pos_proj.b", Tensor::zeros(&[d]));
        p.add("id_proj.w", xavier(r, config.d_app, d));
        p.add("id_proj.b", Tensor::zeros(&[d]));
        p.add("det.q", embedding(r, config.n_det_queries.max(1), d, 0.3));
        p.add("tag.embed", embedding(r, config.n_tags, d, 0.3));

        p.add("bbox.w1", xavier(r, d, d));
        p.add("bbox.b1", Tensor::zeros(&[d]));
        p.add("bbox.w2", xavier(r, d, d));
        p.add("bbox.b2", Tensor::zeros(&[d]));
        p.add("bbox.w3", xavier(r, d, 4));
        p.add("bbox.b3", Tensor::zeros(&[4]));

        p.add("app.w1", xavier(r, d, d));
        p.add("app.b1", Tensor::zeros(&[d]));
        p.add("app.w2", xavier(r, d, config.d_app));
        p.add("app.b2", Tensor::zeros(&[config.d_app]));

        p.add("gate.w1", xavier(r, 4 * d, d));
        p.add("gate.b1", Tensor::zeros(&[d]));
        p.add("gate.w2", xavier(r, d, 4));
        p.add("gate.b2", Tensor::zeros(&[4]));

        Ok(MqtModel { config, params: p })
    }

    /// Rebuild a model around loaded parameters, validating shapes against
    /// a reference initialization.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        let reference = MqtModel::new(config.clone(), 0)?;
        let mut want: Vec<(&str, &[usize])> = Vec::new();
        for (name, t) in reference.params.iter() {
            want.push((name, t.shape()));
        }
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if want.len() != got.len() {
            return Err(ModelError::InvalidConfig(format!(
                "checkpoint has {} parameters, model wants {}",
                got.len(),
                want.len()
            )));
        }
        for ((wn, ws), (gn, gs)) in want.iter().zip(&got) {
            if wn != gn || ws != gs {
                return Err(ModelError::InvalidConfig(format!(
                    "checkpoint parameter {:?} {:?} does not match expected {:?} {:?}",
                    gn, gs, wn, ws
                )));
            }
        }
        Ok(MqtModel { config, params })
    }

    // ── Differentiable forward (shared by training and inference) ──────

    /// Patch projection + positional encoding + encoder stack.
    /// Returns memory of shape `[h*w, d_model]`.
    pub fn encode_frame_var(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        frame: &FrameGrid,
    ) -> Result<Var, ModelError> {
        if frame.c != self.config.channels {
            return Err(ModelError::ChannelMismatch { got: frame.c, want: self.config.channels });
        }
        let n = frame.h * frame.w;
        let cells = tape.constant(Tensor::new(vec![n, frame.c], frame.data().to_vec())?);
        let pe = tape.constant(grid_positional_encoding(frame.h, frame.w, self.config.d_model));
        let mut x = linear(&cells, bound, "patch.w", "patch.b").add(&pe);
        for i in 0..self.config.n_enc_layers {
            x = self.encoder_layer(bound, &x, i);
        }
        Ok(x)
    }

    fn encoder_layer(&self, bound: &BoundParams, x: &Var, i: usize) -> Var {
        let attn = self.mha(bound, &format!("enc{i}.attn"), x, x);
        let x = ln(&x.add(&attn), bound, &format!("enc{i}.ln1"));
        let ffv = ff(&x, bound, &format!("enc{i}.ff"));
        ln(&x.add(&ffv), bound, &format!("enc{i}.ln2"))
    }

    fn decoder_layer(&self, bound: &BoundParams, q: &Var, memory: &Var, i: usize) -> Var {
        let sa = self.mha(bound, &format!("dec{i}.self"), q, q);
        let q = ln(&q.add(&sa), bound, &format!("dec{i}.ln1"));
        let ca = self.mha(bound, &format!("dec{i}.cross"), &q, memory);
        let q = ln(&q.add(&ca), bound, &format!("dec{i}.ln2"));
        let ffv = ff(&q, bound, &format!("dec{i}.ff"));
        ln(&q.add(&ffv), bound, &format!("dec{i}.ln3"))
    }

    fn mha(&self, bound: &BoundParams, prefix: &str, q_in: &Var, kv_in: &Var) -> Var {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let q = linear(q_in, bound, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
        let k = linear(kv_in, bound, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
        let v = linear(kv_in, bound, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice(1, h * dh, dh);
            let kh = k.slice(1, h * dh, dh);
            let vh = v.slice(1, h * dh, dh);
            let attn = qh.matmul_nt(&kh).scale(scale).softmax();
            outs.push(attn.matmul(&vh));
        }
        let refs: Vec<&Var> = outs.iter().collect();
        let cat = Var::concat(&refs, 1);
        linear(&cat, bound, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    /// Single affine layer from (cx, cy, w, h) to model width.
    pub fn encode_pos_query_var(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        bbox: &BoundingBox,
    ) -> Result<Var, ModelError> {
        bbox.validate()?;
        let b = tape.constant(Tensor::new(vec![1, 4], bbox.to_array().to_vec())?);
        Ok(linear(&b, bound, "pos_proj.w", "pos_proj.b"))
    }

    /// Embed one query to a `[1, d_model]` row.
    fn embed_query(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        query: &super::query::Query,
    ) -> Result<Var, ModelError> {
        let d = self.config.d_model;
        let mut row = match &query.source {
            QuerySource::Box(b) => self.encode_pos_query_var(tape, bound, b)?,
            QuerySource::Appearance(a) => {
                let a = tape.constant(a.reshaped(&[1, self.config.d_app])?);
                linear(&a, bound, "id_proj.w", "id_proj.b")
            }
            QuerySource::Embedding(v) => tape.constant(v.reshaped(&[1, d])?),
            QuerySource::DetIndex(i) => {
                assert!(*i < self.config.n_det_queries, "det index out of range");
                bound.get("det.q").slice(0, *i, 1)
            }
        };
        if let Some(tag) = query.tag {
            assert!(tag < self.config.n_tags, "tag index out of pool");
            row = row.add(&bound.get("tag.embed").slice(0, tag, 1));
        }
        Ok(row)
    }

    /// Decoder stack plus heads over a query batch. Empty batches yield an
    /// empty output.
    pub fn decode_var(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        memory: &Var,
        batch: &QueryBatch,
    ) -> Result<Vec<QueryOutputVar>, ModelError> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Var> = batch
            .queries
            .iter()
            .map(|q| self.embed_query(tape, bound, q))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&Var> = rows.iter().collect();
        let mut x = Var::concat(&refs, 0);
        for i in 0..self.config.n_dec_layers {
            x = self.decoder_layer(bound, &x, memory, i);
        }

        // Box head: 3-layer perceptron, sigmoid output in (0,1)^4.
        let h1 = linear(&x, bound, "bbox.w1", "bbox.b1").relu();
        let h2 = linear(&h1, bound, "bbox.w2", "bbox.b2").relu();
        let boxes = linear(&h2, bound, "bbox.w3", "bbox.b3").sigmoid();

        // Appearance head: 2-layer perceptron + row-wise L2 normalization.
        let a1 = linear(&x, bound, "app.w1", "app.b1").relu();
        let apps = linear(&a1, bound, "app.w2", "app.b2").l2_normalize();

        let out = batch
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| QueryOutputVar {
                kind: q.kind,
                owner: q.owner,
                v: x.row(i),
                b: boxes.row(i),
                a: apps.row(i),
            })
            .collect();
        Ok(out)
    }

    // ── Value-level inference API ──────────────────────────────────────

    pub fn encode_frame(&self, frame: &FrameGrid) -> Result<EncodedFrame, ModelError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let memory = self.encode_frame_var(&tape, &bound, frame)?;
        Ok(EncodedFrame { tape, bound, memory })
    }

    pub fn decode(
        &self,
        enc: &EncodedFrame,
        batch: &QueryBatch,
    ) -> Result<Vec<QueryOutputVar>, ModelError> {
        self.decode_var(&enc.tape, &enc.bound, &enc.memory, batch)
    }

    pub fn encode_pos_query(&self, bbox: &BoundingBox) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let v = self.encode_pos_query_var(&tape, &bound, bbox)?;
        Ok(v.value().reshaped(&[self.config.d_model])?)
    }
}

pub(super) fn linear(x: &Var, bound: &BoundParams, w: &str, b: &str) -> Var {
    x.matmul(bound.get(w)).add(bound.get(b))
}

fn ff(x: &Var, bound: &BoundParams, prefix: &str) -> Var {
    let h = linear(x, bound, &format!("{prefix}.w1"), &format!("{prefix}.b1")).relu();
    linear(&h, bound, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

fn ln(x: &Var, bound: &BoundParams, prefix: &str) -> Var {
    x.layer_norm(bound.get(&format!("{prefix}.g")), bound.get(&format!("{prefix}.b")))
}

//! Wengert tape: forward primitives recorded in order, replayed in reverse
//! for gradients.
//!
//! Values live on the tape as nodes; [`Var`] is a cheap handle (tape + node
//! index). Binary elementwise ops broadcast the right operand when its shape
//! is a suffix of the left operand's shape (scalar `[]` broadcasts over
//! everything); nothing more general is supported.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, GradError, Tensor};

const L2_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

/// Forward primitive selector for the checked [`Tape::primitive`] entry
/// point. Aux arguments (axes, slice bounds, constants) ride along.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    /// a @ b^T without materializing the transpose.
    MatMulNT,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    Relu,
    Sigmoid,
    Abs,
    Neg,
    Scale { factor: f64 },
    AddConst { value: f64 },
    Softmax,
    LayerNorm,
    L2Normalize,
    Sum,
    Mean,
    Log,
    Exp,
    MinElem,
    MaxElem,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize, len: usize },
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Neg(usize),
    Scale { input: usize, factor: f64 },
    AddConst { input: usize },
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize },
    L2Normalize(usize),
    Sum(usize),
    Mean(usize),
    Log(usize),
    Exp(usize),
    MinElem(usize, usize),
    MaxElem(usize, usize),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
}

/// Recording tape. Clone is cheap (shared handle); a tape and its vars are
/// single-threaded by construction (`Rc`).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape_vec()).finish()
    }
}

/// Handle to a recorded tensor.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

/// Gradient of a scalar loss with respect to every recorded node that
/// requires grad, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when no gradient flowed to it.
    pub fn wrt_or_zeros(&self, v: &Var) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape_vec().as_slice()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, value, requires_grad });
        Var { tape: self.clone(), id }
    }

    /// Record a differentiable leaf (a trainable parameter or checked input).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Record a constant; no gradient is tracked through it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Checked forward primitive: validates shapes, computes the result and
    /// records it. `inputs` order matters for non-commutative kinds.
    pub fn primitive(&self, kind: PrimitiveKind, inputs: &[&Var]) -> Result<Var, GradError> {
        let name = format!("{:?}", kind);
        let arity_err = |want: usize| GradError::Invalid {
            op: name.clone(),
            detail: format!("expected {} inputs, got {}", want, inputs.len()),
        };
        match kind {
            PrimitiveKind::Add => {
                let [a, b] = two(inputs).ok_or_else(|| arity_err(2))?;
                a.try_binary(b, BinKind::Add)
            }
            PrimitiveKind::Sub => {
                let [a, b] = two(inputs).ok_or_else(|| arity_err(2))?;
                a.try_binary(b, BinKind::Sub)
            }
            PrimitiveKind::Mul => {
                let [a, b] = two(inputs).ok_or_else(|| arity_err(2))?;
                a.try_binary(b, BinKind::Mul)
            }
            PrimitiveKind::Div => {
                let [a, b] = two(inputs).ok_or_else(|| arity_err(2))?;
                a.try_binary(b, BinKind::Div)
            }
            PrimitiveKind::MinElem => {
                let [a, b] = two(inputs).ok_or_else(|| arity_err(2))?;
                a.try_binary(b, BinKind::Min)
            }
            PrimitiveKind::MaxElem => {
                let [a, b] = two(inputs).ok_or_else(|| arity_err(2))?;
                a.try_binary(b, BinKind::Max)
            }
            PrimitiveKind::MatMul => {
                let [a, b] = two(inputs).ok_or_else(|| arity_err(2))?;
                a.try_matmul(b, false)
            }
            PrimitiveKind::MatMulNT => {
                let [a, b] = two(inputs).ok_or_else(|| arity_err(2))?;
                a.try_matmul(b, true)
            }
            PrimitiveKind::Concat { axis } => Tape::try_concat(inputs, axis),
            PrimitiveKind::Slice { axis, start, len } => {
                let [a] = one(inputs).ok_or_else(|| arity_err(1))?;
                a.try_slice(axis, start, len)
            }
            PrimitiveKind::Reshape { shape } => {
                let [a] = one(inputs).ok_or_else(|| arity_err(1))?;
                a.try_reshape(&shape)
            }
            PrimitiveKind::LayerNorm => {
                let [x, g, b] = three(inputs).ok_or_else(|| arity_err(3))?;
                x.try_layer_norm(g, b)
            }
            PrimitiveKind::Relu
            | PrimitiveKind::Sigmoid
            | PrimitiveKind::Abs
            | PrimitiveKind::Neg
            | PrimitiveKind::Softmax
            | PrimitiveKind::L2Normalize
            | PrimitiveKind::Sum
            | PrimitiveKind::Mean
            | PrimitiveKind::Log
            | PrimitiveKind::Exp
            | PrimitiveKind::Scale { .. }
            | PrimitiveKind::AddConst { .. } => {
                let [a] = one(inputs).ok_or_else(|| arity_err(1))?;
                a.try_unary(kind)
            }
        }
    }

    fn try_concat(inputs: &[&Var], axis: usize) -> Result<Var, GradError> {
        if inputs.is_empty() {
            return Err(GradError::EmptyTensor { op: "Concat".into() });
        }
        let tape = inputs[0].tape.clone();
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|v| v.shape_vec()).collect();
        let rank = shapes[0].len();
        if axis >= rank {
            return Err(GradError::Invalid {
                op: "Concat".into(),
                detail: format!("axis {} out of range for rank {}", axis, rank),
            });
        }
        for s in &shapes {
            if s.len() != rank {
                return Err(GradError::ShapeMismatch {
                    op: "Concat".into(),
                    detail: format!("mixed ranks: {:?} vs {:?}", shapes[0], s),
                });
            }
            for d in 0..rank {
                if d != axis && s[d] != shapes[0][d] {
                    return Err(GradError::ShapeMismatch {
                        op: "Concat".into(),
                        detail: format!("non-axis dims differ: {:?} vs {:?}", shapes[0], s),
                    });
                }
            }
        }
        let mut out_shape = shapes[0].clone();
        out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();

        // Row-major gather: iterate over the outer block index, copying each
        // input's contiguous run for that block.
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut axis_off = 0usize;
        for (v, s) in inputs.iter().zip(&shapes) {
            let value = v.value();
            let run = s[axis] * inner;
            for o in 0..outer {
                let src = &value.data()[o * run..(o + 1) * run];
                let dst_base = o * out_shape[axis] * inner + axis_off * inner;
                data[dst_base..dst_base + run].copy_from_slice(src);
            }
            axis_off += s[axis];
        }
        let requires = inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(tape.push(Op::Concat { inputs: ids, axis }, Tensor::new(out_shape, data)?, requires))
    }

    /// Reverse pass. `loss` must be a scalar (one element) on this tape.
    pub fn backward(&self, loss: &Var) -> Result<Gradients, GradError> {
        if loss.numel() != 1 {
            return Err(GradError::NotScalar { op: "backward".into(), shape: loss.shape_vec() });
        }
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);

        // Nodes are pushed in topological order, so a single reverse sweep
        // visits every consumer before its inputs.
        for id in (0..=loss.id).rev() {
            if !inner.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_op(&inner, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    Tensor::new(inner.nodes[id].value.shape().to_vec(), data)
                        .expect("gradient shape matches node shape")
                })
            })
            .collect();
        Ok(Gradients { grads: tensors })
    }
}

fn one<'a>(inputs: &[&'a Var]) -> Option<[&'a Var; 1]> {
    match inputs {
        [a] => Some([a]),
        _ => None,
    }
}

fn two<'a>(inputs: &[&'a Var]) -> Option<[&'a Var; 2]> {
    match inputs {
        [a, b] => Some([a, b]),
        _ => None,
    }
}

fn three<'a>(inputs: &[&'a Var]) -> Option<[&'a Var; 3]> {
    match inputs {
        [a, b, c] => Some([a, b, c]),
        _ => None,
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape_vec(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.numel()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    fn try_binary(&self, rhs: &Var, kind: BinKind) -> Result<Var, GradError> {
        let op_name = match kind {
            BinKind::Add => "Add",
            BinKind::Sub => "Sub",
            BinKind::Mul => "Mul",
            BinKind::Div => "Div",
            BinKind::Min => "MinElem",
            BinKind::Max => "MaxElem",
        };
        let (ls, rs) = (self.shape_vec(), rhs.shape_vec());
        if !suffix_broadcastable(&ls, &rs) {
            return Err(GradError::ShapeMismatch {
                op: op_name.into(),
                detail: format!("{:?} vs {:?} (rhs must equal lhs or be a suffix of it)", ls, rs),
            });
        }
        let out = self.with_value(|a| {
            rhs.with_value(|b| {
                let rn = b.numel();
                let data: Vec<f64> = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &av)| {
                        let bv = b.data()[i % rn];
                        match kind {
                            BinKind::Add => av + bv,
                            BinKind::Sub => av - bv,
                            BinKind::Mul => av * bv,
                            BinKind::Div => av / bv,
                            BinKind::Min => {
                                if av <= bv {
                                    av
                                } else {
                                    bv
                                }
                            }
                            BinKind::Max => {
                                if av >= bv {
                                    av
                                } else {
                                    bv
                                }
                            }
                        }
                    })
                    .collect();
                Tensor::new(ls.clone(), data)
            })
        })?;
        let requires = self.requires_grad() || rhs.requires_grad();
        let op = match kind {
            BinKind::Add => Op::Add(self.id, rhs.id),
            BinKind::Sub => Op::Sub(self.id, rhs.id),
            BinKind::Mul => Op::Mul(self.id, rhs.id),
            BinKind::Div => Op::Div(self.id, rhs.id),
            BinKind::Min => Op::MinElem(self.id, rhs.id),
            BinKind::Max => Op::MaxElem(self.id, rhs.id),
        };
        Ok(self.tape.push(op, out, requires))
    }

    fn try_matmul(&self, rhs: &Var, nt: bool) -> Result<Var, GradError> {
        let op_name = if nt { "MatMulNT" } else { "MatMul" };
        let (ls, rs) = (self.shape_vec(), rhs.shape_vec());
        if ls.len() != 2 || rs.len() != 2 {
            return Err(GradError::ShapeMismatch {
                op: op_name.into(),
                detail: format!("need 2-D operands, got {:?} and {:?}", ls, rs),
            });
        }
        let (m, k) = (ls[0], ls[1]);
        let (n, kb) = if nt { (rs[0], rs[1]) } else { (rs[1], rs[0]) };
        if k != kb {
            return Err(GradError::ShapeMismatch {
                op: op_name.into(),
                detail: format!("inner dims differ: {:?} x {:?}", ls, rs),
            });
        }
        let out = self.with_value(|a| {
            rhs.with_value(|b| {
                let data = if nt {
                    matmul_nt_raw(a.data(), b.data(), m, k, n)
                } else {
                    matmul_raw(a.data(), b.data(), m, k, n)
                };
                Tensor::new(vec![m, n], data)
            })
        })?;
        let requires = self.requires_grad() || rhs.requires_grad();
        let op = if nt { Op::MatMulNT(self.id, rhs.id) } else { Op::MatMul(self.id, rhs.id) };
        Ok(self.tape.push(op, out, requires))
    }

    fn try_slice(&self, axis: usize, start: usize, len: usize) -> Result<Var, GradError> {
        let shape = self.shape_vec();
        if axis >= shape.len() {
            return Err(GradError::Invalid {
                op: "Slice".into(),
                detail: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        if len == 0 {
            return Err(GradError::EmptyTensor { op: "Slice".into() });
        }
        if start + len > shape[axis] {
            return Err(GradError::Invalid {
                op: "Slice".into(),
                detail: format!("range {}..{} exceeds dim {} of {:?}", start, start + len, axis, shape),
            });
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.with_value(|t| {
            let mut data = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = o * shape[axis] * inner + start * inner;
                let dst = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&t.data()[src..src + len * inner]);
            }
            data
        });
        let requires = self.requires_grad();
        Ok(self.tape.push(
            Op::Slice { input: self.id, axis, start, len },
            Tensor::new(out_shape, data)?,
            requires,
        ))
    }

    fn try_reshape(&self, shape: &[usize]) -> Result<Var, GradError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(GradError::ShapeMismatch {
                op: "Reshape".into(),
                detail: format!("{:?} -> {:?}", self.shape_vec(), shape),
            });
        }
        let value = Tensor::new(shape.to_vec(), self.with_value(|t| t.data().to_vec()))?;
        let requires = self.requires_grad();
        Ok(self.tape.push(Op::Reshape(self.id), value, requires))
    }

    fn try_layer_norm(&self, gamma: &Var, beta: &Var) -> Result<Var, GradError> {
        let shape = self.shape_vec();
        let d = *shape.last().ok_or_else(|| GradError::Invalid {
            op: "LayerNorm".into(),
            detail: "scalar input".into(),
        })?;
        if gamma.shape_vec() != [d] || beta.shape_vec() != [d] {
            return Err(GradError::ShapeMismatch {
                op: "LayerNorm".into(),
                detail: format!(
                    "gamma {:?} / beta {:?} must be [{}] for input {:?}",
                    gamma.shape_vec(),
                    beta.shape_vec(),
                    d,
                    shape
                ),
            });
        }
        let out = self.with_value(|x| {
            gamma.with_value(|g| {
                beta.with_value(|b| {
                    let rows = x.numel() / d;
                    let mut data = vec![0.0; x.numel()];
                    for r in 0..rows {
                        let row = &x.data()[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        for j in 0..d {
                            data[r * d + j] = g.data()[j] * (row[j] - mean) * inv + b.data()[j];
                        }
                    }
                    Tensor::new(shape.clone(), data)
                })
            })
        })?;
        let requires = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id },
            out,
            requires,
        ))
    }

    fn try_unary(&self, kind: PrimitiveKind) -> Result<Var, GradError> {
        let shape = self.shape_vec();
        let (op, value) = self.with_value(|t| -> Result<(Op, Tensor), GradError> {
            let d = t.data();
            Ok(match kind {
                PrimitiveKind::Relu => (
                    Op::Relu(self.id),
                    Tensor::new(shape.clone(), d.iter().map(|&v| v.max(0.0)).collect())?,
                ),
                PrimitiveKind::Sigmoid => (
                    Op::Sigmoid(self.id),
                    Tensor::new(shape.clone(), d.iter().map(|&v| sigmoid(v)).collect())?,
                ),
                PrimitiveKind::Abs => (
                    Op::Abs(self.id),
                    Tensor::new(shape.clone(), d.iter().map(|&v| v.abs()).collect())?,
                ),
                PrimitiveKind::Neg => (
                    Op::Neg(self.id),
                    Tensor::new(shape.clone(), d.iter().map(|&v| -v).collect())?,
                ),
                PrimitiveKind::Scale { factor } => (
                    Op::Scale { input: self.id, factor },
                    Tensor::new(shape.clone(), d.iter().map(|&v| factor * v).collect())?,
                ),
                PrimitiveKind::AddConst { value } => (
                    Op::AddConst { input: self.id },
                    Tensor::new(shape.clone(), d.iter().map(|&v| v + value).collect())?,
                ),
                PrimitiveKind::Log => (
                    Op::Log(self.id),
                    Tensor::new(shape.clone(), d.iter().map(|&v| v.ln()).collect())?,
                ),
                PrimitiveKind::Exp => (
                    Op::Exp(self.id),
                    Tensor::new(shape.clone(), d.iter().map(|&v| v.exp()).collect())?,
                ),
                PrimitiveKind::Sum => {
                    (Op::Sum(self.id), Tensor::scalar(d.iter().sum::<f64>()))
                }
                PrimitiveKind::Mean => (
                    Op::Mean(self.id),
                    Tensor::scalar(d.iter().sum::<f64>() / d.len() as f64),
                ),
                PrimitiveKind::Softmax => {
                    let cols = *shape.last().unwrap_or(&1);
                    let rows = d.len() / cols;
                    let mut data = vec![0.0; d.len()];
                    for r in 0..rows {
                        let row = &d[r * cols..(r + 1) * cols];
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for j in 0..cols {
                            let e = (row[j] - m).exp();
                            data[r * cols + j] = e;
                            sum += e;
                        }
                        for j in 0..cols {
                            data[r * cols + j] /= sum;
                        }
                    }
                    (Op::Softmax(self.id), Tensor::new(shape.clone(), data)?)
                }
                PrimitiveKind::L2Normalize => {
                    let cols = *shape.last().unwrap_or(&1);
                    let rows = d.len() / cols;
                    let mut data = vec![0.0; d.len()];
                    for r in 0..rows {
                        let row = &d[r * cols..(r + 1) * cols];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
                        for j in 0..cols {
                            data[r * cols + j] = row[j] / norm;
                        }
                    }
                    (Op::L2Normalize(self.id), Tensor::new(shape.clone(), data)?)
                }
                _ => unreachable!("try_unary called with non-unary kind {:?}", kind),
            })
        })?;
        let requires = self.requires_grad();
        Ok(self.tape.push(op, value, requires))
    }

    // Panicking sugar for internal model code; shape errors here are
    // programmer errors with static shapes.

    pub fn add(&self, rhs: &Var) -> Var {
        self.try_binary(rhs, BinKind::Add).unwrap()
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        self.try_binary(rhs, BinKind::Sub).unwrap()
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        self.try_binary(rhs, BinKind::Mul).unwrap()
    }

    pub fn div(&self, rhs: &Var) -> Var {
        self.try_binary(rhs, BinKind::Div).unwrap()
    }

    pub fn min_elem(&self, rhs: &Var) -> Var {
        self.try_binary(rhs, BinKind::Min).unwrap()
    }

    pub fn max_elem(&self, rhs: &Var) -> Var {
        self.try_binary(rhs, BinKind::Max).unwrap()
    }

    pub fn matmul(&self, rhs: &Var) -> Var {
        self.try_matmul(rhs, false).unwrap()
    }

    pub fn matmul_nt(&self, rhs: &Var) -> Var {
        self.try_matmul(rhs, true).unwrap()
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var {
        self.try_slice(axis, start, len).unwrap()
    }

    /// Row `r` of a 2-D tensor, as a 1-D vector.
    pub fn row(&self, r: usize) -> Var {
        let shape = self.shape_vec();
        self.slice(0, r, 1).reshape(&[shape[1]])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        self.try_reshape(shape).unwrap()
    }

    pub fn relu(&self) -> Var {
        self.try_unary(PrimitiveKind::Relu).unwrap()
    }

    pub fn sigmoid(&self) -> Var {
        self.try_unary(PrimitiveKind::Sigmoid).unwrap()
    }

    pub fn abs(&self) -> Var {
        self.try_unary(PrimitiveKind::Abs).unwrap()
    }

    pub fn neg(&self) -> Var {
        self.try_unary(PrimitiveKind::Neg).unwrap()
    }

    pub fn scale(&self, factor: f64) -> Var {
        self.try_unary(PrimitiveKind::Scale { factor }).unwrap()
    }

    pub fn add_const(&self, value: f64) -> Var {
        self.try_unary(PrimitiveKind::AddConst { value }).unwrap()
    }

    pub fn softmax(&self) -> Var {
        self.try_unary(PrimitiveKind::Softmax).unwrap()
    }

    pub fn l2_normalize(&self) -> Var {
        self.try_unary(PrimitiveKind::L2Normalize).unwrap()
    }

    pub fn layer_norm(&self, gamma: &Var, beta: &Var) -> Var {
        self.try_layer_norm(gamma, beta).unwrap()
    }

    pub fn sum(&self) -> Var {
        self.try_unary(PrimitiveKind::Sum).unwrap()
    }

    pub fn mean(&self) -> Var {
        self.try_unary(PrimitiveKind::Mean).unwrap()
    }

    pub fn log(&self) -> Var {
        self.try_unary(PrimitiveKind::Log).unwrap()
    }

    pub fn exp(&self) -> Var {
        self.try_unary(PrimitiveKind::Exp).unwrap()
    }

    /// Dot product of two same-shape tensors, as a scalar.
    pub fn dot(&self, rhs: &Var) -> Var {
        self.mul(rhs).sum()
    }

    pub fn concat(vars: &[&Var], axis: usize) -> Var {
        Tape::try_concat(vars, axis).unwrap()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn suffix_broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    if rhs.len() > lhs.len() {
        return false;
    }
    lhs[lhs.len() - rhs.len()..] == *rhs
}

/// Accumulate `g`, reduced over broadcast leading dims, into `acc`.
fn accumulate_reduced(acc: &mut Option<Vec<f64>>, g: impl Iterator<Item = f64>, rhs_numel: usize) {
    let buf = acc.get_or_insert_with(|| vec![0.0; rhs_numel]);
    for (i, v) in g.enumerate() {
        buf[i % rhs_numel] += v;
    }
}

fn accumulate(acc: &mut Option<Vec<f64>>, g: impl Iterator<Item = f64>, numel: usize) {
    let buf = acc.get_or_insert_with(|| vec![0.0; numel]);
    for (i, v) in g.enumerate() {
        buf[i] += v;
    }
}

#[allow(clippy::too_many_lines)]
fn backward_op(inner: &Inner, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &inner.nodes[id];
    let val = |i: usize| inner.nodes[i].value.data();
    let nel = |i: usize| inner.nodes[i].value.numel();
    let wants = |i: usize| inner.nodes[i].requires_grad;

    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.iter().copied(), nel(*a));
            }
            if wants(*b) {
                accumulate_reduced(&mut grads[*b], g.iter().copied(), nel(*b));
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.iter().copied(), nel(*a));
            }
            if wants(*b) {
                accumulate_reduced(&mut grads[*b], g.iter().map(|v| -v), nel(*b));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let bn = bv.len();
            if wants(*a) {
                accumulate(
                    &mut grads[*a],
                    g.iter().enumerate().map(|(i, v)| v * bv[i % bn]),
                    nel(*a),
                );
            }
            if wants(*b) {
                accumulate_reduced(
                    &mut grads[*b],
                    g.iter().enumerate().map(|(i, v)| v * av[i]),
                    bn,
                );
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let bn = bv.len();
            if wants(*a) {
                accumulate(
                    &mut grads[*a],
                    g.iter().enumerate().map(|(i, v)| v / bv[i % bn]),
                    nel(*a),
                );
            }
            if wants(*b) {
                accumulate_reduced(
                    &mut grads[*b],
                    g.iter()
                        .enumerate()
                        .map(|(i, v)| -v * av[i] / (bv[i % bn] * bv[i % bn])),
                    bn,
                );
            }
        }
        Op::MinElem(a, b) | Op::MaxElem(a, b) => {
            let is_min = matches!(node.op, Op::MinElem(..));
            let (av, bv) = (val(*a), val(*b));
            let bn = bv.len();
            // Left operand wins ties, matching the forward pass.
            let a_wins = |i: usize| {
                let (x, y) = (av[i], bv[i % bn]);
                if is_min {
                    x <= y
                } else {
                    x >= y
                }
            };
            if wants(*a) {
                accumulate(
                    &mut grads[*a],
                    g.iter().enumerate().map(|(i, v)| if a_wins(i) { *v } else { 0.0 }),
                    nel(*a),
                );
            }
            if wants(*b) {
                accumulate_reduced(
                    &mut grads[*b],
                    g.iter().enumerate().map(|(i, v)| if a_wins(i) { 0.0 } else { *v }),
                    bn,
                );
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = inner.nodes[*a].value.dims2();
            let n = inner.nodes[*b].value.dims2().1;
            if wants(*a) {
                // dA = g @ B^T
                let da = matmul_nt_raw(g, val(*b), m, n, k);
                accumulate(&mut grads[*a], da.into_iter(), m * k);
            }
            if wants(*b) {
                // dB = A^T @ g
                let db = matmul_tn_raw(val(*a), g, m, k, n);
                accumulate(&mut grads[*b], db.into_iter(), k * n);
            }
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = inner.nodes[*a].value.dims2();
            let n = inner.nodes[*b].value.dims2().0;
            if wants(*a) {
                // dA = g @ B
                let da = matmul_raw(g, val(*b), m, n, k);
                accumulate(&mut grads[*a], da.into_iter(), m * k);
            }
            if wants(*b) {
                // dB = g^T @ A
                let db = matmul_tn_raw(g, val(*a), m, n, k);
                accumulate(&mut grads[*b], db.into_iter(), n * k);
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner_sz: usize = out_shape[*axis + 1..].iter().product();
            let total_axis = out_shape[*axis];
            let mut axis_off = 0usize;
            for inp in inputs {
                let s = inner.nodes[*inp].value.shape();
                let run = s[*axis] * inner_sz;
                if wants(*inp) {
                    let mut dg = vec![0.0; inner.nodes[*inp].value.numel()];
                    for o in 0..outer {
                        let src = o * total_axis * inner_sz + axis_off * inner_sz;
                        dg[o * run..(o + 1) * run].copy_from_slice(&g[src..src + run]);
                    }
                    accumulate(&mut grads[*inp], dg.into_iter(), inner.nodes[*inp].value.numel());
                }
                axis_off += s[*axis];
            }
        }
        Op::Slice { input, axis, start, len } => {
            if wants(*input) {
                let in_shape = inner.nodes[*input].value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner_sz: usize = in_shape[*axis + 1..].iter().product();
                let mut dg = vec![0.0; inner.nodes[*input].value.numel()];
                for o in 0..outer {
                    let dst = o * in_shape[*axis] * inner_sz + start * inner_sz;
                    let src = o * len * inner_sz;
                    for j in 0..len * inner_sz {
                        dg[dst + j] += g[src + j];
                    }
                }
                let n = dg.len();
                accumulate(&mut grads[*input], dg.into_iter(), n);
            }
        }
        Op::Reshape(input) => {
            if wants(*input) {
                accumulate(&mut grads[*input], g.iter().copied(), nel(*input));
            }
        }
        Op::Relu(input) => {
            if wants(*input) {
                let x = val(*input);
                accumulate(
                    &mut grads[*input],
                    g.iter().enumerate().map(|(i, v)| if x[i] > 0.0 { *v } else { 0.0 }),
                    nel(*input),
                );
            }
        }
        Op::Sigmoid(input) => {
            if wants(*input) {
                let y = node.value.data();
                accumulate(
                    &mut grads[*input],
                    g.iter().enumerate().map(|(i, v)| v * y[i] * (1.0 - y[i])),
                    nel(*input),
                );
            }
        }
        Op::Abs(input) => {
            if wants(*input) {
                let x = val(*input);
                accumulate(
                    &mut grads[*input],
                    g.iter().enumerate().map(|(i, v)| v * sign(x[i])),
                    nel(*input),
                );
            }
        }
        Op::Neg(input) => {
            if wants(*input) {
                accumulate(&mut grads[*input], g.iter().map(|v| -v), nel(*input));
            }
        }
        Op::Scale { input, factor } => {
            if wants(*input) {
                accumulate(&mut grads[*input], g.iter().map(|v| v * factor), nel(*input));
            }
        }
        Op::AddConst { input } => {
            if wants(*input) {
                accumulate(&mut grads[*input], g.iter().copied(), nel(*input));
            }
        }
        Op::Softmax(input) => {
            if wants(*input) {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap_or(&1);
                let rows = y.len() / cols;
                let mut dg = vec![0.0; y.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let dot: f64 = (0..cols).map(|j| g[base + j] * y[base + j]).sum();
                    for j in 0..cols {
                        dg[base + j] = y[base + j] * (g[base + j] - dot);
                    }
                }
                accumulate(&mut grads[*input], dg.into_iter(), nel(*input));
            }
        }
        Op::L2Normalize(input) => {
            if wants(*input) {
                let x = val(*input);
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap_or(&1);
                let rows = y.len() / cols;
                let mut dg = vec![0.0; y.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let norm = x[base..base + cols].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm <= L2_EPS {
                        // Below the clamp, forward is x / eps: a plain scale.
                        for j in 0..cols {
                            dg[base + j] = g[base + j] / L2_EPS;
                        }
                    } else {
                        let dot: f64 = (0..cols).map(|j| g[base + j] * y[base + j]).sum();
                        for j in 0..cols {
                            dg[base + j] = (g[base + j] - y[base + j] * dot) / norm;
                        }
                    }
                }
                accumulate(&mut grads[*input], dg.into_iter(), nel(*input));
            }
        }
        Op::LayerNorm { x, gamma, beta } => {
            let xd = val(*x);
            let gd = val(*gamma);
            let d = gd.len();
            let rows = xd.len() / d;
            let mut dx = vec![0.0; xd.len()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                let gr = &g[r * d..(r + 1) * d];
                let mut sum_gg = 0.0;
                let mut sum_ggx = 0.0;
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv;
                    let gg = gr[j] * gd[j];
                    sum_gg += gg;
                    sum_ggx += gg * xhat;
                    dgamma[j] += gr[j] * xhat;
                    dbeta[j] += gr[j];
                }
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv;
                    dx[r * d + j] =
                        inv * (gr[j] * gd[j] - sum_gg / d as f64 - xhat * sum_ggx / d as f64);
                }
            }
            if wants(*x) {
                accumulate(&mut grads[*x], dx.into_iter(), xd.len());
            }
            if wants(*gamma) {
                accumulate(&mut grads[*gamma], dgamma.into_iter(), d);
            }
            if wants(*beta) {
                accumulate(&mut grads[*beta], dbeta.into_iter(), d);
            }
        }
        Op::Sum(input) => {
            if wants(*input) {
                let s = g[0];
                accumulate(&mut grads[*input], (0..nel(*input)).map(|_| s), nel(*input));
            }
        }
        Op::Mean(input) => {
            if wants(*input) {
                let n = nel(*input);
                let s = g[0] / n as f64;
                accumulate(&mut grads[*input], (0..n).map(|_| s), n);
            }
        }
        Op::Log(input) => {
            if wants(*input) {
                let x = val(*input);
                accumulate(
                    &mut grads[*input],
                    g.iter().enumerate().map(|(i, v)| v / x[i]),
                    nel(*input),
                );
            }
        }
        Op::Exp(input) => {
            if wants(*input) {
                let y = node.value.data();
                accumulate(
                    &mut grads[*input],
                    g.iter().enumerate().map(|(i, v)| v * y[i]),
                    nel(*input),
                );
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value; since a node
//! can only reference nodes recorded before it, tape order is already a
//! topological order and the backward sweep visits each node exactly once,
//! in reverse.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Square,
    SmoothL1,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    MaskBlocks(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, shift: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Broadcast { x: Var, axis: usize },
    SumAll(Var),
    WeightedSum { x: Var, axis: usize, weights: Vec<f64> },
    Conv1d { x: Var, kernel: Var },
    Cumsum { x: Var, axis: usize },
    NormalizeLast(Var),
    LstmStep { pre: Var, h: Var, c: Var, mask: Option<Vec<f64>> },
    Select { x: Var, index: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORMALIZE_EPS: f64 = 1e-12;

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for every parameter that took part in the computation.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params.iter().filter_map(move |&(id, v)| {
            self.grads[v.0].as_deref().map(|g| (id, g))
        })
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Differentiable leaf that is not a model parameter.
    pub fn input(&self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls for the same id
    /// return the same node, so a shared weight has a single gradient path.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Parameters read so far, in first-use order.
    pub fn params_used(&self) -> Vec<ParamId> {
        let map = self.params.borrow();
        let mut used: Vec<_> = map.iter().map(|(&id, &v)| (v.0, id)).collect();
        used.sort_unstable();
        used.into_iter().map(|(_, id)| id).collect()
    }

    fn binary_same(
        &self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(shape_err(name, ta.shape(), tb.shape()));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape equals a trailing suffix of `a`'s shape.
    pub fn add_suffix(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
                return Err(shape_err("add_suffix", sa, sb));
            }
            let n = tb.numel();
            let mut data = ta.data().to_vec();
            for chunk in data.chunks_mut(n.max(1)) {
                for (x, y) in chunk.iter_mut().zip(tb.data()) {
                    *x += y;
                }
            }
            Tensor::new(sa.to_vec(), data)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::AddSuffix(a, b), rg))
    }

    /// Multiplies contiguous blocks of `x` by constant weights: `mask[i]`
    /// scales the i-th of `mask.len()` equal blocks.
    pub fn mask_blocks(&self, x: Var, mask: &[f64]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if mask.is_empty() || t.numel() % mask.len() != 0 {
                return Err(Error::shape(format!(
                    "mask of length {} does not tile shape {:?}",
                    mask.len(),
                    t.shape()
                )));
            }
            let block = t.numel() / mask.len();
            let mut data = t.data().to_vec();
            if block > 0 {
                for (chunk, &m) in data.chunks_mut(block).zip(mask) {
                    if m == 0.0 {
                        chunk.fill(0.0);
                    } else if m != 1.0 {
                        chunk.iter_mut().for_each(|v| *v *= m);
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaskBlocks(x, mask.to_vec()), rg))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())
                .expect("same shape")
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect())
                .expect("same shape")
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// `x [.., n] · w [n, m] -> [.., m]`.
    pub fn matmul(&self, x: Var, w: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (sx, sw) = (tx.shape(), tw.shape());
            if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
                return Err(shape_err("matmul", sx, sw));
            }
            let (n, m) = (sw[0], sw[1]);
            let rows = tx.numel() / n.max(1);
            let mut out = vec![0.0; rows * m];
            matmul_into(tx.data(), tw.data(), &mut out, rows, n, m);
            let mut shape = sx.to_vec();
            *shape.last_mut().unwrap() = m;
            Tensor::new(shape, out)?
        };
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::MatMul(x, w), rg))
    }

    /// Batched product `a [B, n, k] · b [B, k, m]`, or `a · bᵀ` with
    /// `b [B, m, k]` when `trans_b` is set.
    pub fn batch_matmul(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
                return Err(shape_err("batch_matmul", sa, sb));
            }
            let (bsz, n, k) = (sa[0], sa[1], sa[2]);
            let (kb, m) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
            if kb != k {
                return Err(shape_err("batch_matmul", sa, sb));
            }
            let mut out = vec![0.0; bsz * n * m];
            for bi in 0..bsz {
                let ad = &ta.data()[bi * n * k..(bi + 1) * n * k];
                let bd = &tb.data()[bi * k * m..(bi + 1) * k * m];
                let od = &mut out[bi * n * m..(bi + 1) * n * m];
                if trans_b {
                    matmul_bt_into(ad, bd, od, n, k, m);
                } else {
                    matmul_into(ad, bd, od, n, k, m);
                }
            }
            Tensor::new(vec![bsz, n, m], out)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    fn unary(&self, x: Var, u: Unary) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let f: fn(f64) -> f64 = match u {
                Unary::Relu => |v| v.max(0.0),
                Unary::Tanh => f64::tanh,
                Unary::Sigmoid => sigmoid,
                Unary::Exp => f64::exp,
                Unary::Log => f64::ln,
                Unary::Softplus => softplus,
                Unary::Square => |v| v * v,
                Unary::SmoothL1 => |v| {
                    let a = v.abs();
                    if a < 1.0 {
                        0.5 * v * v
                    } else {
                        a - 0.5
                    }
                },
            };
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
                .expect("same shape")
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary(x, u), rg)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    /// Elementwise `0.5 e²` for `|e| < 1`, `|e| - 0.5` otherwise.
    pub fn smooth_l1(&self, x: Var) -> Var {
        self.unary(x, Unary::SmoothL1)
    }

    /// Softmax over the last axis. Positions where `mask` is false receive
    /// exactly zero weight; `mask`, when given, has one entry per element.
    pub fn softmax(&self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let shape = t.shape();
            if shape.is_empty() {
                return Err(Error::shape("softmax of a scalar"));
            }
            if let Some(m) = mask {
                if m.len() != t.numel() {
                    return Err(Error::shape(format!(
                        "softmax mask has {} entries for shape {:?}",
                        m.len(),
                        shape
                    )));
                }
            }
            let n = shape[shape.len() - 1];
            let mut out = vec![0.0; t.numel()];
            for (r, (row, orow)) in t.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
                let keep = |j: usize| mask.is_none_or(|m| m[r * n + j]);
                let mut max = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if keep(j) && v > max {
                        max = v;
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateSoftmax);
                }
                let mut sum = 0.0;
                for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                    if keep(j) {
                        *o = (v - max).exp();
                        sum += *o;
                    }
                }
                orow.iter_mut().for_each(|o| *o /= sum);
            }
            Tensor::new(shape.to_vec(), out)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `shift`.
    pub fn layer_norm(&self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (t, g, s) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[shift.0].value);
            let n = *t.shape().last().ok_or_else(|| Error::shape("layer_norm of a scalar"))?;
            if g.shape() != [n] || s.shape() != [n] {
                return Err(shape_err("layer_norm", t.shape(), g.shape()));
            }
            let mut out = vec![0.0; t.numel()];
            for (row, orow) in t.data().chunks(n).zip(out.chunks_mut(n)) {
                let (mean, rstd) = moments(row);
                for j in 0..n {
                    orow[j] = (row[j] - mean) * rstd * g.data()[j] + s.data()[j];
                }
            }
            Tensor::new(t.shape().to_vec(), out)?
        };
        let rg = self.rg(&[x, gain, shift]);
        Ok(self.push(value, Op::LayerNorm { x, gain, shift }, rg))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts.first().ok_or_else(|| Error::shape("concat of nothing"))?.0]
                .value
                .shape()
                .to_vec();
            if axis >= first.len() {
                return Err(Error::shape(format!("concat axis {axis} for shape {first:?}")));
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(shape_err("concat", &first, s));
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&first, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let w = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::new(shape, out)?
        };
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks equally shaped arrays along a new leading axis.
    pub fn stack(&self, parts: &[Var]) -> Result<Var> {
        let reshaped = parts
            .iter()
            .map(|&p| {
                let mut s = self.shape(p);
                s.insert(0, 1);
                self.reshape(p, &s)
            })
            .collect::<Result<Vec<_>>>()?;
        self.concat(&reshaped, 0)
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s = t.shape();
            if axis >= s.len() || start + len > s[axis] {
                return Err(Error::shape(format!(
                    "slice [{start}, {}) on axis {axis} of shape {s:?}",
                    start + len
                )));
            }
            let (outer, dim, inner) = split_axis(s, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            Tensor::new(shape, out)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    /// Picks index `index` along the leading axis, dropping that axis.
    pub fn select(&self, x: Var, index: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s = t.shape();
            if s.is_empty() || index >= s[0] {
                return Err(Error::shape(format!("select {index} from shape {s:?}")));
            }
            let block = t.numel() / s[0];
            Tensor::new(s[1..].to_vec(), t.data()[index * block..(index + 1) * block].to_vec())?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Select { x, index }, rg))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s = t.shape();
            let mut seen = vec![false; s.len()];
            if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::shape(format!("permutation {perm:?} for shape {s:?}")));
            }
            let (shape, data) = permute_data(s, t.data(), perm);
            Tensor::new(shape, data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the input.
    pub fn broadcast(&self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s = t.shape();
            if axis > s.len() {
                return Err(Error::shape(format!("broadcast axis {axis} for shape {s:?}")));
            }
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis..].iter().product();
            let mut out = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let block = &t.data()[o * inner..(o + 1) * inner];
                for _ in 0..n {
                    out.extend_from_slice(block);
                }
            }
            let mut shape = s.to_vec();
            shape.insert(axis, n);
            Tensor::new(shape, out)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Broadcast { x, axis }, rg))
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ_i weights[i] · x[.., i, ..]` along `axis`, removing the axis.
    pub fn weighted_sum(&self, x: Var, axis: usize, weights: &[f64]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s = t.shape();
            if axis >= s.len() || s[axis] != weights.len() {
                return Err(Error::shape(format!(
                    "{} weights for axis {axis} of shape {s:?}",
                    weights.len()
                )));
            }
            let (outer, dim, inner) = split_axis(s, axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                let orow = &mut out[o * inner..(o + 1) * inner];
                for (i, &w) in weights.iter().enumerate().take(dim) {
                    if w == 0.0 {
                        continue;
                    }
                    let base = (o * dim + i) * inner;
                    for (acc, &v) in orow.iter_mut().zip(&t.data()[base..base + inner]) {
                        *acc += w * v;
                    }
                }
            }
            let mut shape = s.to_vec();
            shape.remove(axis);
            Tensor::new(shape, out)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::WeightedSum {
                x,
                axis,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Same-length 1-D cross-correlation along axis 1 of `x [B, L, C_in]`
    /// with `kernel [k, C_in, C_out]`, zero padded symmetrically.
    pub fn conv1d(&self, x: Var, kernel: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (t, kt) = (&nodes[x.0].value, &nodes[kernel.0].value);
            let (s, ks) = (t.shape(), kt.shape());
            if s.len() != 3 || ks.len() != 3 || s[2] != ks[1] {
                return Err(shape_err("conv1d", s, ks));
            }
            if ks[0] % 2 == 0 {
                return Err(Error::Config(format!(
                    "conv1d kernel size {} is even; symmetric padding needs an odd size",
                    ks[0]
                )));
            }
            let (b, l, cin) = (s[0], s[1], s[2]);
            let (k, cout) = (ks[0], ks[2]);
            let pad = k / 2;
            let mut out = vec![0.0; b * l * cout];
            for bi in 0..b {
                for pos in 0..l {
                    let orow = &mut out[(bi * l + pos) * cout..(bi * l + pos + 1) * cout];
                    for j in 0..k {
                        let src = pos as isize + j as isize - pad as isize;
                        if src < 0 || src >= l as isize {
                            continue;
                        }
                        let xrow = &t.data()[(bi * l + src as usize) * cin..][..cin];
                        let kmat = &kt.data()[j * cin * cout..(j + 1) * cin * cout];
                        for (c, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &kmat[c * cout..(c + 1) * cout];
                            for (o, &kv) in orow.iter_mut().zip(krow) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![b, l, cout], out)?
        };
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(value, Op::Conv1d { x, kernel }, rg))
    }

    pub fn cumsum(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s = t.shape();
            if axis >= s.len() {
                return Err(Error::shape(format!("cumsum axis {axis} for shape {s:?}")));
            }
            let (outer, dim, inner) = split_axis(s, axis);
            let mut data = t.data().to_vec();
            for o in 0..outer {
                for i in 1..dim {
                    for j in 0..inner {
                        let prev = data[(o * dim + i - 1) * inner + j];
                        data[(o * dim + i) * inner + j] += prev;
                    }
                }
            }
            Tensor::new(s.to_vec(), data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Cumsum { x, axis }, rg))
    }

    /// Scales each last-axis vector to unit Euclidean length.
    pub fn normalize_last(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let n = *t.shape().last().ok_or_else(|| Error::shape("normalize a scalar"))?;
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(n) {
                let norm = (row.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS).sqrt();
                row.iter_mut().for_each(|v| *v /= norm);
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::NormalizeLast(x), rg))
    }

    /// One LSTM update from gate pre-activations `pre [B, 4H]` (ordered
    /// input, forget, candidate, output) and previous state `h, c [B, H]`.
    /// Returns `[B, 2H]` holding `h'` then `c'`. Rows whose `mask` entry is
    /// zero carry the previous state through unchanged.
    pub fn lstm_step(&self, pre: Var, h: Var, c: Var, mask: Option<&[f64]>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tp, th, tc) = (&nodes[pre.0].value, &nodes[h.0].value, &nodes[c.0].value);
            let (sp, sh) = (tp.shape(), th.shape());
            if sp.len() != 2 || sh.len() != 2 || tc.shape() != sh || sp[0] != sh[0] || sp[1] != 4 * sh[1] {
                return Err(shape_err("lstm_step", sp, sh));
            }
            let (b, hd) = (sh[0], sh[1]);
            if mask.is_some_and(|m| m.len() != b) {
                return Err(Error::shape("lstm_step mask length differs from batch"));
            }
            let mut out = vec![0.0; b * 2 * hd];
            for r in 0..b {
                let orow = &mut out[r * 2 * hd..(r + 1) * 2 * hd];
                if mask.is_some_and(|m| m[r] == 0.0) {
                    orow[..hd].copy_from_slice(&th.data()[r * hd..(r + 1) * hd]);
                    orow[hd..].copy_from_slice(&tc.data()[r * hd..(r + 1) * hd]);
                    continue;
                }
                let p = &tp.data()[r * 4 * hd..(r + 1) * 4 * hd];
                for j in 0..hd {
                    let i = sigmoid(p[j]);
                    let f = sigmoid(p[hd + j]);
                    let g = p[2 * hd + j].tanh();
                    let o = sigmoid(p[3 * hd + j]);
                    let cn = f * tc.data()[r * hd + j] + i * g;
                    orow[hd + j] = cn;
                    orow[j] = o * cn.tanh();
                }
            }
            Tensor::new(vec![b, 2 * hd], out)?
        };
        let rg = self.rg(&[pre, h, c]);
        Ok(self.push(
            value,
            Op::LstmStep {
                pre,
                h,
                c,
                mask: mask.map(<[f64]>::to_vec),
            },
            rg,
        ))
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect();
        let params = self
            .params
            .borrow()
            .iter()
            .filter(|(_, v)| v.0 <= loss.0)
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.max(0.0) + (-v.abs()).exp().ln_1p()
    }
}

fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// `out[rows × m] += a[rows × n] · b[n × m]`.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, n: usize, m: usize) {
    for r in 0..rows {
        let orow = &mut out[r * m..(r + 1) * m];
        for (k, &av) in a[r * n..(r + 1) * n].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[k * m..(k + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[rows × m] += a[rows × n] · b[m × n]ᵀ`.
fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, n: usize, m: usize) {
    let mut bt = vec![0.0; n * m];
    for c in 0..m {
        for k in 0..n {
            bt[k * m + c] = b[c * n + k];
        }
    }
    matmul_into(a, &bt, out, rows, n, m);
}

/// `out[n × m] += a[rows × n]ᵀ · b[rows × m]`.
fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, n: usize, m: usize) {
    for r in 0..rows {
        let brow = &b[r * m..(r + 1) * m];
        for (k, &av) in a[r * n..(r + 1) * n].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[k * m..(k + 1) * m].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let y = node.value.data();
    match &node.op {
        Op::Constant | Op::Input | Op::Param => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_assign(ga, g));
            accumulate(grads, nodes, *b, |gb| add_assign(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_assign(ga, g));
            accumulate(grads, nodes, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a).data(), val(*b).data());
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * tb[i];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..g.len() {
                    gb[i] += g[i] * ta[i];
                }
            });
        }
        Op::AddSuffix(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_assign(ga, g));
            let n = val(*b).numel().max(1);
            accumulate(grads, nodes, *b, |gb| {
                for chunk in g.chunks(n) {
                    add_assign(gb, chunk);
                }
            });
        }
        Op::MaskBlocks(x, mask) => {
            let block = g.len() / mask.len();
            accumulate(grads, nodes, *x, |gx| {
                if block == 0 {
                    return;
                }
                for ((gc, c), &m) in gx.chunks_mut(block).zip(g.chunks(block)).zip(mask) {
                    if m != 0.0 {
                        gc.iter_mut().zip(c).for_each(|(o, v)| *o += m * v);
                    }
                }
            });
        }
        Op::Scale(x, c) => {
            accumulate(grads, nodes, *x, |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v));
        }
        Op::AddScalar(x) => accumulate(grads, nodes, *x, |gx| add_assign(gx, g)),
        Op::MatMul(x, w) => {
            let (tx, tw) = (val(*x), val(*w));
            let (n, m) = (tw.shape()[0], tw.shape()[1]);
            let rows = tx.numel() / n.max(1);
            accumulate(grads, nodes, *x, |gx| matmul_bt_into(g, tw.data(), gx, rows, m, n));
            accumulate(grads, nodes, *w, |gw| matmul_at_into(tx.data(), g, gw, rows, n, m));
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (ta, tb) = (val(*a), val(*b));
            let (bsz, n, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
            let m = node.value.shape()[2];
            accumulate(grads, nodes, *a, |ga| {
                for bi in 0..bsz {
                    let gy = &g[bi * n * m..(bi + 1) * n * m];
                    let bd = &tb.data()[bi * k * m..(bi + 1) * k * m];
                    let out = &mut ga[bi * n * k..(bi + 1) * n * k];
                    if *trans_b {
                        // y = a·bᵀ, b [m × k]: ga = gy·b
                        matmul_into(gy, bd, out, n, m, k);
                    } else {
                        // b [k × m]: ga = gy·bᵀ
                        matmul_bt_into(gy, bd, out, n, m, k);
                    }
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for bi in 0..bsz {
                    let gy = &g[bi * n * m..(bi + 1) * n * m];
                    let ad = &ta.data()[bi * n * k..(bi + 1) * n * k];
                    let out = &mut gb[bi * k * m..(bi + 1) * k * m];
                    if *trans_b {
                        // gb [m × k] = gyᵀ·a
                        matmul_at_into(gy, ad, out, n, m, k);
                    } else {
                        // gb [k × m] = aᵀ·gy
                        matmul_at_into(ad, gy, out, n, k, m);
                    }
                }
            });
        }
        Op::Unary(x, u) => {
            let tx = val(*x).data();
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..g.len() {
                    let d = match u {
                        Unary::Relu => {
                            if tx[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Exp => y[i],
                        Unary::Log => 1.0 / tx[i],
                        Unary::Softplus => sigmoid(tx[i]),
                        Unary::Square => 2.0 * tx[i],
                        Unary::SmoothL1 => {
                            if tx[i].abs() < 1.0 {
                                tx[i]
                            } else {
                                tx[i].signum()
                            }
                        }
                    };
                    gx[i] += g[i] * d;
                }
            });
        }
        Op::Softmax(x) => {
            let n = *node.value.shape().last().unwrap();
            accumulate(grads, nodes, *x, |gx| {
                for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gxr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, shift } => {
            let (tx, tg) = (val(*x), val(*gain));
            let n = tg.numel();
            let gd = tg.data();
            accumulate(grads, nodes, *x, |gx| {
                for ((row, gr), gxr) in tx.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let (mean, rstd) = moments(row);
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let d = gr[j] * gd[j];
                        let xh = (row[j] - mean) * rstd;
                        sum_d += d;
                        sum_dx += d * xh;
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let xh = (row[j] - mean) * rstd;
                        gxr[j] += rstd / nf * (nf * gr[j] * gd[j] - sum_d - xh * sum_dx);
                    }
                }
            });
            accumulate(grads, nodes, *gain, |gg| {
                for (row, gr) in tx.data().chunks(n).zip(g.chunks(n)) {
                    let (mean, rstd) = moments(row);
                    for j in 0..n {
                        gg[j] += gr[j] * (row[j] - mean) * rstd;
                    }
                }
            });
            accumulate(grads, nodes, *shift, |gs| {
                for gr in g.chunks(n) {
                    add_assign(gs, gr);
                }
            });
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let w = val(*p).shape()[*axis] * inner;
                accumulate(grads, nodes, *p, |gp| {
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset..][..w];
                        add_assign(&mut gp[o * w..(o + 1) * w], src);
                    }
                });
                offset += w;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, dim, inner) = split_axis(val(*x).shape(), *axis);
            let len = node.value.shape()[*axis];
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    add_assign(&mut gx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            });
        }
        Op::Select { x, index } => {
            let block = g.len();
            accumulate(grads, nodes, *x, |gx| add_assign(&mut gx[index * block..(index + 1) * block], g));
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, |gx| add_assign(gx, g)),
        Op::Permute { x, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (_, back) = permute_data(node.value.shape(), g, &inverse);
            accumulate(grads, nodes, *x, |gx| add_assign(gx, &back));
        }
        Op::Broadcast { x, axis } => {
            let s = node.value.shape();
            let outer: usize = s[..*axis].iter().product();
            let n = s[*axis];
            let inner: usize = s[axis + 1..].iter().product();
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    for r in 0..n {
                        let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                        add_assign(&mut gx[o * inner..(o + 1) * inner], src);
                    }
                }
            });
        }
        Op::SumAll(x) => accumulate(grads, nodes, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
        Op::WeightedSum { x, axis, weights } => {
            let (outer, dim, inner) = split_axis(val(*x).shape(), *axis);
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    let gr = &g[o * inner..(o + 1) * inner];
                    for (i, &w) in weights.iter().enumerate().take(dim) {
                        if w == 0.0 {
                            continue;
                        }
                        let base = (o * dim + i) * inner;
                        gx[base..base + inner].iter_mut().zip(gr).for_each(|(a, &b)| *a += w * b);
                    }
                }
            });
        }
        Op::Conv1d { x, kernel } => {
            let (tx, tk) = (val(*x), val(*kernel));
            let (b, l, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let (k, cout) = (tk.shape()[0], tk.shape()[2]);
            let pad = k / 2;
            let need_x = nodes[x.0].requires_grad;
            let need_k = nodes[kernel.0].requires_grad;
            let mut gx = if need_x { vec![0.0; tx.numel()] } else { vec![] };
            let mut gk = if need_k { vec![0.0; tk.numel()] } else { vec![] };
            for bi in 0..b {
                for pos in 0..l {
                    let grow = &g[(bi * l + pos) * cout..(bi * l + pos + 1) * cout];
                    for j in 0..k {
                        let src = pos as isize + j as isize - pad as isize;
                        if src < 0 || src >= l as isize {
                            continue;
                        }
                        let xoff = (bi * l + src as usize) * cin;
                        for c in 0..cin {
                            let koff = (j * cin + c) * cout;
                            let krow = &tk.data()[koff..koff + cout];
                            if need_x {
                                gx[xoff + c] += grow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if need_k {
                                let xv = tx.data()[xoff + c];
                                if xv != 0.0 {
                                    gk[koff..koff + cout].iter_mut().zip(grow).for_each(|(o, &gv)| *o += xv * gv);
                                }
                            }
                        }
                    }
                }
            }
            accumulate(grads, nodes, *x, |dst| add_assign(dst, &gx));
            accumulate(grads, nodes, *kernel, |dst| add_assign(dst, &gk));
        }
        Op::Cumsum { x, axis } => {
            let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    for j in 0..inner {
                        let mut run = 0.0;
                        for i in (0..dim).rev() {
                            let idx = (o * dim + i) * inner + j;
                            run += g[idx];
                            gx[idx] += run;
                        }
                    }
                }
            });
        }
        Op::NormalizeLast(x) => {
            let tx = val(*x).data();
            let n = *node.value.shape().last().unwrap();
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..g.len() / n {
                    let xr = &tx[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let norm = (xr.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS).sqrt();
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += (gr[j] - yr[j] * dot) / norm;
                    }
                }
            });
        }
        Op::LstmStep { pre, h, c, mask } => {
            let (tp, tc) = (val(*pre).data(), val(*c).data());
            let hd = val(*h).shape()[1];
            let b = g.len() / (2 * hd);
            let mut gpre = vec![0.0; tp.len()];
            let mut gh = vec![0.0; b * hd];
            let mut gc = vec![0.0; b * hd];
            for r in 0..b {
                let gr = &g[r * 2 * hd..(r + 1) * 2 * hd];
                if mask.as_ref().is_some_and(|m| m[r] == 0.0) {
                    gh[r * hd..(r + 1) * hd].copy_from_slice(&gr[..hd]);
                    gc[r * hd..(r + 1) * hd].copy_from_slice(&gr[hd..]);
                    continue;
                }
                let p = &tp[r * 4 * hd..(r + 1) * 4 * hd];
                for j in 0..hd {
                    let i = sigmoid(p[j]);
                    let f = sigmoid(p[hd + j]);
                    let gg = p[2 * hd + j].tanh();
                    let o = sigmoid(p[3 * hd + j]);
                    let cprev = tc[r * hd + j];
                    let cn = y[r * 2 * hd + hd + j];
                    let tcn = cn.tanh();
                    let dh = gr[j];
                    let dc = gr[hd + j] + dh * o * (1.0 - tcn * tcn);
                    let gp = &mut gpre[r * 4 * hd..(r + 1) * 4 * hd];
                    gp[j] = dc * gg * i * (1.0 - i);
                    gp[hd + j] = dc * cprev * f * (1.0 - f);
                    gp[2 * hd + j] = dc * i * (1.0 - gg * gg);
                    gp[3 * hd + j] = dh * tcn * o * (1.0 - o);
                    gc[r * hd + j] = dc * f;
                }
            }
            accumulate(grads, nodes, *pre, |dst| add_assign(dst, &gpre));
            accumulate(grads, nodes, *h, |dst| add_assign(dst, &gh));
            accumulate(grads, nodes, *c, |dst| add_assign(dst, &gc));
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

//! Parameterized building blocks recorded onto a [`Tape`].

use super::params::{ParamBuilder, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `y = x·W + b` for `x [.., n_in]`, `W [n_in × n_out]`, `b [n_out]`.
pub fn linear(tape: &Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let (sx, sw, sb) = (tape.shape(x), tape.shape(w), tape.shape(b));
    if sw.len() != 2 || sx.last() != Some(&sw[0]) || sb != [sw[1]] {
        return Err(Error::Shape(format!(
            "linear: input {sx:?} does not match weights {sw:?} / bias {sb:?}"
        )));
    }
    let y = tape.matmul(x, w)?;
    tape.add_suffix(y, b)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, n_in: usize, n_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.uniform("weight", &[n_in, n_out], n_in)?,
            bias: pb.uniform("bias", &[n_out], n_in)?,
            n_in,
            n_out,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        linear(
            tape,
            x,
            tape.param(store, self.weight),
            tape.param(store, self.bias),
        )
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder<'_>, n_in: usize, hidden: usize, n_out: usize) -> Result<Self> {
        Ok(Self {
            first: Linear::new(&mut pb.scope("fc1"), n_in, hidden)?,
            second: Linear::new(&mut pb.scope("fc2"), hidden, n_out)?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        self.second.forward(tape, store, tape.relu(h))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: pb.constant("gain", &[dim], 1.0)?,
            shift: pb.constant("shift", &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        tape.layer_norm(x, tape.param(store, self.gain), tape.param(store, self.shift))
    }
}

/// Same-length convolution over axis 1 of `[B, L, C_in]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub size: usize,
}

impl Conv1d {
    pub fn new(pb: &mut ParamBuilder<'_>, size: usize, c_in: usize, c_out: usize) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d kernel size {size} is even; symmetric padding needs an odd size"
            )));
        }
        Ok(Self {
            kernel: pb.uniform("kernel", &[size, c_in, c_out], size * c_in)?,
            bias: pb.uniform("bias", &[c_out], size * c_in)?,
            size,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = tape.conv1d(x, tape.param(store, self.kernel))?;
        tape.add_suffix(y, tape.param(store, self.bias))
    }
}

/// Single-layer LSTM with gates ordered input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

pub struct LstmOutput {
    /// Hidden state after every step, `[B, L, H]`.
    pub states: Var,
    /// Hidden state after the last step, `[B, H]`.
    pub last: Var,
}

impl Lstm {
    pub fn new(pb: &mut ParamBuilder<'_>, n_in: usize, hidden: usize) -> Result<Self> {
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        Ok(Self {
            input_weight: pb.uniform("input_weight", &[n_in, 4 * hidden], hidden)?,
            hidden_weight: pb.uniform("hidden_weight", &[hidden, 4 * hidden], hidden)?,
            bias: pb.tensor("bias", Tensor::from_vec(bias))?,
            hidden,
        })
    }

    /// One recurrence step from explicit state.
    pub fn cell(&self, tape: &Tape, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xw = linear(
            tape,
            x,
            tape.param(store, self.input_weight),
            tape.param(store, self.bias),
        )?;
        self.step(tape, store, xw, h, c, None)
    }

    fn step(
        &self,
        tape: &Tape,
        store: &ParamStore,
        xw: Var,
        h: Var,
        c: Var,
        mask: Option<&[f64]>,
    ) -> Result<(Var, Var)> {
        let hw = tape.matmul(h, tape.param(store, self.hidden_weight))?;
        let pre = tape.add(xw, hw)?;
        let hc = tape.lstm_step(pre, h, c, mask)?;
        Ok((
            tape.slice(hc, 1, 0, self.hidden)?,
            tape.slice(hc, 1, self.hidden, self.hidden)?,
        ))
    }

    /// Runs over axis 1 of `x [B, L, n_in]` from a zero state. Where
    /// `step_mask [B × L]` is zero the state is carried through unchanged,
    /// so `last` is the state after each row's final unmasked step.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: Var,
        step_mask: Option<&[f64]>,
    ) -> Result<LstmOutput> {
        let s = tape.shape(x);
        if s.len() != 3 {
            return Err(Error::Shape(format!("lstm input must be [B, L, C], got {s:?}")));
        }
        let (b, l) = (s[0], s[1]);
        if step_mask.is_some_and(|m| m.len() != b * l) {
            return Err(Error::shape("lstm step mask must have B × L entries"));
        }
        let xw = linear(
            tape,
            x,
            tape.param(store, self.input_weight),
            tape.param(store, self.bias),
        )?;
        let time_major = tape.permute(xw, &[1, 0, 2])?;
        let mut h = tape.constant(Tensor::zeros(&[b, self.hidden]));
        let mut c = tape.constant(Tensor::zeros(&[b, self.hidden]));
        let mut states = Vec::with_capacity(l);
        let mut column = vec![0.0; b];
        for t in 0..l {
            let xt = tape.select(time_major, t)?;
            let mask = step_mask.map(|m| {
                for (r, v) in column.iter_mut().enumerate() {
                    *v = m[r * l + t];
                }
                column.as_slice()
            });
            (h, c) = self.step(tape, store, xt, h, c, mask)?;
            states.push(h);
        }
        let stacked = tape.stack(&states)?;
        Ok(LstmOutput {
            states: tape.permute(stacked, &[1, 0, 2])?,
            last: h,
        })
    }
}

/// Multi-scale node: parallel convolutions of sizes {1, 3, 5} over the
/// sequence axis, channel-concatenated, then an LSTM along the same axis.
#[derive(Clone, Debug)]
pub struct MultiScaleNode {
    pub convs: Vec<Conv1d>,
    pub lstm: Lstm,
}

pub const MSN_KERNEL_SIZES: [usize; 3] = [1, 3, 5];

impl MultiScaleNode {
    pub fn new(pb: &mut ParamBuilder<'_>, c_in: usize, dim: usize) -> Result<Self> {
        let convs = MSN_KERNEL_SIZES
            .iter()
            .map(|&k| Conv1d::new(&mut pb.scope(&format!("conv{k}")), k, c_in, dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            lstm: Lstm::new(&mut pb.scope("lstm"), dim * MSN_KERNEL_SIZES.len(), dim)?,
        })
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: Var,
        step_mask: Option<&[f64]>,
    ) -> Result<LstmOutput> {
        let branches = self
            .convs
            .iter()
            .map(|c| c.forward(tape, store, x))
            .collect::<Result<Vec<_>>>()?;
        let merged = tape.relu(tape.concat(&branches, 2)?);
        self.lstm.forward(tape, store, merged, step_mask)
    }
}

/// Scaled dot-product attention split over `heads`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide dimension {dim}"
            )));
        }
        Ok(Self {
            query: Linear::new(&mut pb.scope("query"), dim, dim)?,
            key: Linear::new(&mut pb.scope("key"), dim, dim)?,
            value: Linear::new(&mut pb.scope("value"), dim, dim)?,
            output: Linear::new(&mut pb.scope("output"), dim, dim)?,
            heads,
            dim,
        })
    }

    /// `queries [B, Lq, D]` attend over `keys_values [B, Lk, D]`.
    /// `key_mask [B × Lk]` excludes keys; a batch with no valid key is a
    /// degenerate-softmax error.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        queries: Var,
        keys_values: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (sq, sk) = (tape.shape(queries), tape.shape(keys_values));
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != self.dim || sk[2] != self.dim {
            return Err(Error::Shape(format!(
                "attention: queries {sq:?} and keys {sk:?} for dimension {}",
                self.dim
            )));
        }
        let (b, lq, lk) = (sq[0], sq[1], sk[1]);
        if key_mask.is_some_and(|m| m.len() != b * lk) {
            return Err(Error::shape("attention key mask must have B × Lk entries"));
        }
        let (h, dh) = (self.heads, self.dim / self.heads);
        let split = |v: Var, l: usize| -> Result<Var> {
            let r = tape.reshape(v, &[b, l, h, dh])?;
            let p = tape.permute(r, &[0, 2, 1, 3])?;
            tape.reshape(p, &[b * h, l, dh])
        };
        let q = split(self.query.forward(tape, store, queries)?, lq)?;
        let k = split(self.key.forward(tape, store, keys_values)?, lk)?;
        let v = split(self.value.forward(tape, store, keys_values)?, lk)?;
        let scores = tape.scale(tape.batch_matmul(q, k, true)?, 1.0 / (dh as f64).sqrt());
        let full_mask = key_mask.map(|m| expand_key_mask(m, b, h, lq, lk));
        let weights = tape.softmax(scores, full_mask.as_deref())?;
        let mixed = tape.batch_matmul(weights, v, false)?;
        let merged = tape.reshape(mixed, &[b, h, lq, dh])?;
        let merged = tape.permute(merged, &[0, 2, 1, 3])?;
        let merged = tape.reshape(merged, &[b, lq, self.dim])?;
        self.output.forward(tape, store, merged)
    }
}

/// Expands a per-key mask `[B × Lk]` to the `[B·H, Lq, Lk]` score layout.
pub(crate) fn expand_key_mask(mask: &[bool], b: usize, heads: usize, lq: usize, lk: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(b * heads * lq * lk);
    for bi in 0..b {
        let row = &mask[bi * lk..(bi + 1) * lk];
        for _ in 0..heads * lq {
            out.extend_from_slice(row);
        }
    }
    out
}

/// Sinusoidal embedding: `PE[t, 2i] = sin(t / 10000^(2i/D))`,
/// `PE[t, 2i+1] = cos(t / 10000^(2i/D))`.
pub fn positional_embedding(length: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!(
            "positional embedding dimension {dim} must be even"
        )));
    }
    let mut data = vec![0.0; length * dim];
    for t in 0..length {
        for i in 0..dim / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[t * dim + 2 * i] = angle.sin();
            data[t * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![length, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::seeded_rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_hand_product() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.5]));
        let y = linear(&tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5]);
    }

    #[test]
    fn linear_identity_passthrough() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.set(&[i, i], 1.0);
        }
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = linear(&tape, x, w, b).unwrap();
        assert_eq!(*tape.value(y), *tape.value(x));
    }

    #[test]
    fn linear_names_both_shapes_on_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let w = tape.constant(Tensor::zeros(&[2, 4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let err = linear(&tape, x, w, b).unwrap_err().to_string();
        assert!(err.contains("[3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn lstm_cell_zero_params_hand_values() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let lstm = Lstm::new(&mut ParamBuilder::new(&mut store, &mut rng), 2, 1).unwrap();
        for id in [lstm.input_weight, lstm.hidden_weight, lstm.bias] {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let h = tape.constant(Tensor::zeros(&[1, 1]));
        let c = tape.constant(Tensor::full(&[1, 1], 1.0));
        let (h2, c2) = lstm.cell(&tape, &store, x, h, c).unwrap();
        assert!((tape.scalar(c2) - 0.5).abs() < 1e-15);
        let expected = 0.5 * 0.5f64.tanh();
        assert!((tape.scalar(h2) - expected).abs() < 1e-15);
        assert!((expected - 0.231).abs() < 1e-3);

        let tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[1, 1]));
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let (h3, c3) = lstm.cell(&tape, &store, x, zero, zero).unwrap();
        assert_eq!((tape.scalar(h3), tape.scalar(c3)), (0.0, 0.0));
    }

    #[test]
    fn lstm_is_causal_along_sequence() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1);
        let lstm = Lstm::new(&mut ParamBuilder::new(&mut store, &mut rng), 3, 4).unwrap();
        let run = |bump: Option<usize>| {
            let mut data: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
            if let Some(step) = bump {
                data[step * 3] += 0.5;
            }
            let tape = Tape::new();
            let x = tape.constant(t(&[1, 6, 3], &data));
            let out = lstm.forward(&tape, &store, x, None).unwrap();
            let v = tape.value(out.states).clone();
            v
        };
        let base = run(None);
        let bumped = run(Some(3));
        for step in 0..6 {
            let diff: f64 = (0..4)
                .map(|j| (base.at(&[0, step, j]) - bumped.at(&[0, step, j])).abs())
                .sum();
            if step < 3 {
                assert_eq!(diff, 0.0, "step {step} changed");
            } else {
                assert!(diff > 0.0, "step {step} unchanged");
            }
        }
    }

    #[test]
    fn conv1d_hand_values_and_even_kernel_rejected() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 1], &[1.0, 2.0, 3.0]));
        let k = tape.constant(t(&[3, 1, 1], &[1.0, 1.0, 1.0]));
        let y = tape.conv1d(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);

        let even = tape.constant(Tensor::zeros(&[2, 1, 1]));
        assert!(matches!(tape.conv1d(x, even), Err(Error::Config(_))));

        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        assert!(Conv1d::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, 1, 1).is_err());
    }

    #[test]
    fn conv1d_unit_kernel_is_passthrough() {
        let tape = Tape::new();
        let data = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0];
        let x = tape.constant(t(&[1, 3, 2], &data));
        let k = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv1d(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &data);
    }

    fn attention(heads: usize, seed: u64) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mha = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, heads).unwrap();
        (store, mha)
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        assert!(MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), 10, 4).is_err());
    }

    #[test]
    fn attention_single_key_returns_its_value() {
        let (store, mha) = attention(4, 2);
        let tape = Tape::new();
        let q = tape.constant(t(&[1, 2, 8], &(0..16).map(|i| i as f64 * 0.1).collect::<Vec<_>>()));
        let kv = tape.constant(t(&[1, 1, 8], &[0.3, -0.2, 0.5, 1.0, 0.0, 0.7, -0.4, 0.2]));
        let out = mha.forward(&tape, &store, q, kv, None).unwrap();
        // expected: output(value(kv)) for every query
        let v = mha.value.forward(&tape, &store, kv).unwrap();
        let expected = mha.output.forward(&tape, &store, v).unwrap();
        let (o, e) = (tape.value(out).clone(), tape.value(expected).clone());
        for qi in 0..2 {
            for j in 0..8 {
                assert!((o.at(&[0, qi, j]) - e.at(&[0, 0, j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_all_keys_masked_is_degenerate() {
        let (store, mha) = attention(4, 3);
        let tape = Tape::new();
        let q = tape.constant(Tensor::full(&[1, 1, 8], 0.1));
        let kv = tape.constant(Tensor::full(&[1, 2, 8], 0.2));
        let r = mha.forward(&tape, &store, q, kv, Some(&[false, false]));
        assert!(matches!(r, Err(Error::DegenerateSoftmax)));
    }

    #[test]
    fn positional_embedding_contract() {
        let pe = positional_embedding(50, 16).unwrap();
        assert_eq!(pe.shape(), &[50, 16]);
        for i in 0..8 {
            assert_eq!(pe.at(&[0, 2 * i]), 0.0);
            assert_eq!(pe.at(&[0, 2 * i + 1]), 1.0);
        }
        assert!(positional_embedding(4, 3).is_err());
    }
}

//! Loss terms for the three jointly trained tasks (coupled motion, motion
//! capture, primary prediction), the optimizer, and the training loop.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderOutput;
use crate::error::{Error, Result};
use crate::inputs::{Labels, SceneInputs, MOTION_DIM, POS_SCALE};
use crate::model::{output_values, Model, ModelConfig};
use crate::nn::params::seeded_rng;
use crate::nn::{Checkpoint, ParamStore, Tape, Tensor, Var};

/// Weight of the heading/speed term on the best mode inside the primary loss.
pub const HEADING_SPEED_WEIGHT: f64 = 0.1;

/// Mean squared error over the valid segments' entries.
pub fn loss_couple(tape: &Tape, predicted: Var, target: Var, segment_mask: &[bool]) -> Result<Var> {
    let s = tape.shape(predicted);
    if s != tape.shape(target) || s.first() != Some(&segment_mask.len()) {
        return Err(Error::Shape(format!(
            "couple loss: prediction {s:?}, target {:?}, {} mask entries",
            tape.shape(target),
            segment_mask.len()
        )));
    }
    let valid = segment_mask.iter().filter(|&&m| m).count();
    let per_segment: usize = s[1..].iter().product();
    if valid == 0 || per_segment == 0 {
        return Err(Error::DegenerateLoss("no valid segment for the couple loss".into()));
    }
    let sq = tape.square(tape.sub(predicted, target)?);
    let mask: Vec<f64> = segment_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let kept = tape.mask_blocks(sq, &mask)?;
    Ok(tape.scale(tape.sum(kept), 1.0 / (valid * per_segment) as f64))
}

/// Mean smooth-L1 of `prior - gt_xy`.
pub fn loss_capture(tape: &Tape, prior: Var, gt_xy: Var) -> Result<Var> {
    Ok(tape.mean(tape.smooth_l1(tape.sub(prior, gt_xy)?)))
}

/// `-log Σ_k p_k exp(-½ Σ_t ‖xy_k,t − gt_t‖²)` in log-sum-exp form.
/// `trajectories [K, f, ≥2]`, `probs [K]`, `gt [f, ≥2]`.
pub fn loss_gmm(tape: &Tape, trajectories: Var, probs: Var, gt: Var) -> Result<Var> {
    let (st, sg) = (tape.shape(trajectories), tape.shape(gt));
    if st.len() != 3 || sg.len() != 2 || st[1] != sg[0] || st[2] < 2 || sg[1] < 2 || tape.shape(probs) != [st[0]] {
        return Err(Error::Shape(format!(
            "gmm loss: trajectories {st:?}, probabilities {:?}, ground truth {sg:?}",
            tape.shape(probs)
        )));
    }
    if let Some(p) = tape.value(probs).data().iter().find(|&&p| !(p >= 0.0)) {
        return Err(Error::Domain(format!("mixture weight {p} is negative")));
    }
    let (k, f) = (st[0], st[1]);
    let xy = tape.slice(trajectories, 2, 0, 2)?;
    let gt_xy = tape.broadcast(tape.slice(gt, 1, 0, 2)?, 0, k)?;
    let sq = tape.reshape(tape.square(tape.sub(xy, gt_xy)?), &[k, 2 * f])?;
    let energy = tape.weighted_sum(sq, 1, &vec![0.5; 2 * f])?;
    let shift = tape.value(energy).data().iter().copied().fold(f64::INFINITY, f64::min);
    let shift = if shift.is_finite() { shift } else { 0.0 };
    let terms = tape.mul(probs, tape.exp(tape.scale(tape.add_scalar(energy, -shift), -1.0)))?;
    Ok(tape.add_scalar(tape.scale(tape.log(tape.sum(terms)), -1.0), shift))
}

/// `(1/(K−1)) Σ_{i≠best} max(0, p_i + δ − p_best)`; zero when `K = 1`.
pub fn loss_margin(tape: &Tape, probs: Var, best: usize, delta: f64) -> Result<Var> {
    let k = tape.shape(probs)[0];
    if best >= k {
        return Err(Error::Shape(format!("best mode {best} out of {k}")));
    }
    if k == 1 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let p_best = tape.broadcast(tape.select(probs, best)?, 0, k)?;
    let gap = tape.relu(tape.add_scalar(tape.sub(probs, p_best)?, delta));
    let weights: Vec<f64> = (0..k).map(|i| if i == best { 0.0 } else { 1.0 / (k - 1) as f64 }).collect();
    tape.weighted_sum(gap, 0, &weights)
}

/// Mode whose endpoint is nearest the ground-truth endpoint (lowest index on ties).
pub fn best_mode_index(trajectories: &Tensor, gt: &Tensor) -> usize {
    let (k, f) = (trajectories.shape()[0], trajectories.shape()[1]);
    let c = trajectories.shape()[2];
    let g = &gt.data()[(f - 1) * gt.shape()[1]..];
    let mut best = (0, f64::INFINITY);
    for m in 0..k {
        let e = &trajectories.data()[(m * f + f - 1) * c..];
        let d = (e[0] - g[0]).powi(2) + (e[1] - g[1]).powi(2);
        if d < best.1 {
            best = (m, d);
        }
    }
    best.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossToggles {
    pub couple: bool,
    pub capture: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            couple: true,
            capture: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub primary: f64,
    pub couple: f64,
    pub capture: f64,
    pub total: f64,
    pub best_mode_index: usize,
    pub gmm: f64,
    pub margin: f64,
}

/// Total loss for one target. `margin` defaults to `1/K`.
pub fn total_loss(
    tape: &Tape,
    out: &DecoderOutput,
    labels: &Labels,
    segment_mask: &[bool],
    toggles: LossToggles,
    margin: Option<f64>,
) -> Result<(Var, LossBreakdown)> {
    let k = tape.shape(out.probabilities)[0];
    let f = labels.future.shape()[0];
    let gt = tape.constant(labels.future.clone());
    let best = best_mode_index(&tape.value(out.trajectories), &labels.future);
    let gmm = loss_gmm(tape, out.trajectories, out.probabilities, gt)?;
    let margin_term = loss_margin(tape, out.probabilities, best, margin.unwrap_or(1.0 / k as f64))?;

    // Heading and speed of the best mode, speed brought to network units.
    let mode = tape.slice(tape.select(out.trajectories, best)?, 1, 2, 3)?;
    let scales = Tensor::new(vec![f, 3], (0..f).flat_map(|_| [1.0, 1.0, 1.0 / POS_SCALE]).collect())?;
    let scales = tape.constant(scales);
    let gt_motion = tape.slice(gt, 1, 2, 3)?;
    let diff = tape.mul(tape.sub(mode, gt_motion)?, scales)?;
    let heading_speed = tape.scale(tape.mean(tape.smooth_l1(diff)), HEADING_SPEED_WEIGHT);
    let primary = tape.add(tape.add(gmm, margin_term)?, heading_speed)?;

    let zero = || tape.constant(Tensor::scalar(0.0));
    let couple = if toggles.couple {
        let target = tape.constant(labels.relative.clone());
        loss_couple(tape, out.coupled_motion, target, segment_mask)?
    } else {
        zero()
    };
    let capture = if toggles.capture {
        let gt_xy = tape.slice(gt, 1, 0, 2)?;
        loss_capture(tape, out.motion_prior, gt_xy)?
    } else {
        zero()
    };
    let total = tape.add(tape.add(primary, couple)?, capture)?;
    let breakdown = LossBreakdown {
        primary: tape.scalar(primary),
        couple: tape.scalar(couple),
        capture: tape.scalar(capture),
        total: tape.scalar(total),
        best_mode_index: best,
        gmm: tape.scalar(gmm),
        margin: tape.scalar(margin_term),
    };
    Ok((total, breakdown))
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One update with learning rate `lr` from dense per-parameter gradients.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.0;
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v, g) = (&mut self.first[i], &mut self.second[i], &grads[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let step = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w -= step;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs (0-based) at which the rate is multiplied by the matching factor.
    pub decay_epochs: Vec<usize>,
    pub decay_factors: Vec<f64>,
    pub seed: u64,
    pub use_couple_loss: bool,
    pub use_capture_loss: bool,
    /// Margin δ of the probability loss; `1/K` when unset.
    pub margin: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 4,
            learning_rate: 1e-3,
            decay_epochs: vec![150, 250, 350, 450],
            decay_factors: vec![0.5, 0.5, 0.5, 0.5],
            seed: 0,
            use_couple_loss: true,
            use_capture_loss: true,
            margin: None,
        }
    }
}

impl TrainConfig {
    /// Schedule used for full-scale training runs.
    pub fn reference_schedule() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-4,
            decay_epochs: vec![170, 190],
            decay_factors: vec![0.1, 0.1],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if self.decay_epochs.len() != self.decay_factors.len() {
            return Err(Error::Config("decay_epochs and decay_factors differ in length".into()));
        }
        if self.decay_factors.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::Config("decay factors must be non-negative".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.decay_epochs
            .iter()
            .zip(&self.decay_factors)
            .filter(|(e, _)| epoch >= **e)
            .fold(self.learning_rate, |lr, (_, f)| lr * f)
    }

    pub fn toggles(&self) -> LossToggles {
        LossToggles {
            couple: self.use_couple_loss,
            capture: self.use_capture_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_primary: f64,
    pub loss_couple: f64,
    pub loss_capture: f64,
    pub grad_norm: f64,
}

pub fn log_to_csv(rows: &[EpochLog]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

/// Loss and dense gradient (indexed by parameter id) for one labeled target.
pub fn scenario_gradient(
    model: &Model,
    store: &ParamStore,
    inputs: &SceneInputs,
    toggles: LossToggles,
    margin: Option<f64>,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let labels = inputs
        .labels
        .as_ref()
        .ok_or_else(|| Error::Label(format!("scenario {} has no labels", inputs.scenario_id)))?;
    let tape = Tape::new();
    let out = model.forward(&tape, store, inputs)?;
    let (loss, breakdown) = total_loss(&tape, &out.decoded, labels, &inputs.segment_mask, toggles, margin)?;
    if !breakdown.total.is_finite() {
        let culprit = output_values(&tape, &out)
            .into_iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map_or_else(|| "loss".to_string(), |(n, _)| n);
        return Err(Error::NumericHealth(format!(
            "non-finite loss on scenario {}; first non-finite tensor: {culprit}",
            inputs.scenario_id
        )));
    }
    let grads = tape.backward(loss)?;
    let mut dense: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
    for (id, g) in grads.params() {
        dense[id.0].copy_from_slice(g);
    }
    for ((_, p), g) in store.iter().zip(&dense) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericHealth(format!(
                "non-finite gradient for `{}` on scenario {}",
                p.name, inputs.scenario_id
            )));
        }
    }
    Ok((breakdown, dense))
}

/// Optimizer state carried across epochs (and checkpoints).
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(config: TrainConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: Adam::new(store),
            config,
            epoch: 0,
            log: Vec::new(),
        })
    }

    /// One pass over `data` in seeded minibatches. `threads > 1` computes the
    /// per-scenario gradients of a batch in parallel; they are summed in
    /// dataset order either way, so results do not depend on `threads`.
    pub fn run_epoch(
        &mut self,
        model: &Model,
        store: &mut ParamStore,
        data: &[SceneInputs],
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let lr = self.config.learning_rate_at(self.epoch);
        let toggles = self.config.toggles();
        let margin = self.config.margin;
        let mut order: Vec<usize> = (0..data.len()).collect();
        if self.config.batch_size < data.len() {
            let mut rng = seeded_rng(self.config.seed ^ (self.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);
        }
        let mut sums = LossBreakdown::default();
        let mut norm_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(self.config.batch_size) {
            let run = |&i: &usize| scenario_gradient(model, store, &data[i], toggles, margin);
            let results: Vec<Result<(LossBreakdown, Vec<Vec<f64>>)>> = match pool {
                Some(p) => p.install(|| batch.par_iter().map(run).collect()),
                None => batch.iter().map(run).collect(),
            };
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for r in results {
                let (b, g) = r?;
                sums.primary += b.primary;
                sums.couple += b.couple;
                sums.capture += b.capture;
                sums.total += b.total;
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&g) {
                            for (u, v) in x.iter_mut().zip(y) {
                                *u += v;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            norm_sum += grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            batches += 1;
            self.adam.update(store, &grads, lr);
        }
        let n = data.len() as f64;
        let row = EpochLog {
            epoch: self.epoch,
            lr,
            loss_total: sums.total / n,
            loss_primary: sums.primary / n,
            loss_couple: sums.couple / n,
            loss_capture: sums.capture / n,
            grad_norm: norm_sum / batches as f64,
        };
        self.epoch += 1;
        self.log.push(row.clone());
        Ok(row)
    }

    /// Runs until `config.epochs` epochs have completed in total.
    pub fn train(
        &mut self,
        model: &Model,
        store: &mut ParamStore,
        data: &[SceneInputs],
        threads: usize,
    ) -> Result<Vec<EpochLog>> {
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        let start = self.log.len();
        while self.epoch < self.config.epochs {
            self.run_epoch(model, store, data, pool.as_ref())?;
        }
        Ok(self.log[start..].to_vec())
    }
}

const ADAM_FIRST: &str = "adam.first/";
const ADAM_SECOND: &str = "adam.second/";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    model: ModelConfig,
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    epoch: usize,
    #[serde(default)]
    adam_step: u64,
}

/// Parameters, model configuration and (when given) optimizer state.
pub fn checkpoint(model: &Model, store: &ParamStore, trainer: Option<&Trainer>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_store(store);
    if let Some(tr) = trainer {
        for ((_, p), (m, v)) in store.iter().zip(tr.adam.first.iter().zip(&tr.adam.second)) {
            let shape = p.value.shape().to_vec();
            ck.arrays.insert(format!("{ADAM_FIRST}{}", p.name), Tensor::new(shape.clone(), m.clone())?);
            ck.arrays.insert(format!("{ADAM_SECOND}{}", p.name), Tensor::new(shape, v.clone())?);
        }
    }
    let meta = CheckpointMeta {
        format: "macformer".into(),
        model: model.config.clone(),
        train: trainer.map(|t| t.config.clone()),
        epoch: trainer.map_or(0, |t| t.epoch),
        adam_step: trainer.map_or(0, |t| t.adam.step),
    };
    ck.metadata = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(ck)
}

/// Rebuilds the model, its parameters and, if stored, the trainer.
pub fn restore(ck: &Checkpoint) -> Result<(Model, ParamStore, Option<Trainer>)> {
    let meta: CheckpointMeta = serde_json::from_value(ck.metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    if meta.format != "macformer" {
        return Err(Error::Checkpoint(format!("unknown checkpoint format `{}`", meta.format)));
    }
    let (model, mut store) = Model::new(meta.model, 0)?;
    ck.restore_into(&mut store)?;
    let trainer = match meta.train {
        None => None,
        Some(cfg) => {
            let mut tr = Trainer::new(cfg, &store)?;
            for (i, (_, p)) in store.iter().enumerate() {
                for (prefix, slot) in [(ADAM_FIRST, &mut tr.adam.first[i]), (ADAM_SECOND, &mut tr.adam.second[i])] {
                    let key = format!("{prefix}{}", p.name);
                    let t = ck
                        .arrays
                        .get(&key)
                        .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))?;
                    if t.shape() != p.value.shape() {
                        return Err(Error::Checkpoint(format!("optimizer state `{key}` has shape {:?}", t.shape())));
                    }
                    slot.copy_from_slice(t.data());
                }
            }
            tr.epoch = meta.epoch;
            tr.adam.step = meta.adam_step;
            Some(tr)
        }
    };
    Ok((model, store, trainer))
}

/// Reads the `[K, f, 5]` motion layout of a trajectory tensor.
pub fn motion_at(trajectories: &Tensor, mode: usize, step: usize) -> [f64; MOTION_DIM] {
    let f = trajectories.shape()[1];
    let at = (mode * f + step) * MOTION_DIM;
    trajectories.data()[at..at + MOTION_DIM].try_into().expect("five channels")
}

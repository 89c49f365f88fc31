//! Reference extractor, auxiliary heads, map-conditioned regression and the
//! mode probability head.
//!
//! Predicted trajectories are `[K, f, 5]` in the target frame: positions are
//! the running sum of per-step displacements (meters), headings are unit
//! vectors and speeds are in m/s.

use log::warn;

use crate::encoder::{mask_f64, mean_weights, swap01, tile_mask, AttentionLayer, EncodedContext};
use crate::error::{Error, Result};
use crate::geometry::REL_DIM;
use crate::inputs::{MOTION_DIM, POS_SCALE};
use crate::nn::{positional_embedding, Linear, Lstm, Mlp, MultiHeadAttention};
use crate::nn::{ParamBuilder, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub modes: usize,
    pub history: usize,
    pub future: usize,
    pub use_reference_extractor: bool,
}

impl DecoderConfig {
    fn steps(&self) -> usize {
        self.history + self.future
    }
}

/// Per-modality learned tokens attend over the encoded map at every
/// timestamp, are conditioned on a pooled global map feature, then interact
/// with each other.
#[derive(Clone, Debug)]
pub struct ReferenceExtractor {
    pub tokens: ParamId,
    pub cross: MultiHeadAttention,
    pub pool_mlp: Mlp,
    pub interaction: AttentionLayer,
    pe: Tensor,
}

impl ReferenceExtractor {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &DecoderConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            tokens: pb.uniform("tokens", &[cfg.modes, d], 1)?,
            cross: MultiHeadAttention::new(&mut pb.scope("cross"), d, cfg.heads)?,
            pool_mlp: Mlp::new(&mut pb.scope("pool_mlp"), 2 * d, d, d)?,
            interaction: AttentionLayer::new(&mut pb.scope("interaction"), d, cfg.heads)?,
            pe: positional_embedding(cfg.steps(), d)?,
        })
    }

    /// `map [N_m, T, D]` to references `[K, T, D]`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, map: Var, segment_mask: &[bool]) -> Result<Var> {
        let steps = self.pe.shape()[0];
        let tokens = tape.param(store, self.tokens);
        let k = tape.shape(tokens)[0];
        if !segment_mask.iter().any(|&m| m) {
            warn!("reference extractor: no valid map segment, returning bare tokens");
            return tape.broadcast(tokens, 1, steps);
        }
        let mt = swap01(tape, map)?;
        let queries = tape.broadcast(tokens, 0, steps)?;
        let mask = tile_mask(segment_mask, steps);
        let attended = self.cross.forward(tape, store, queries, mt, Some(&mask))?;
        let over_segments = tape.weighted_sum(map, 0, &mean_weights(segment_mask))?;
        let pooled = tape.weighted_sum(over_segments, 0, &vec![1.0 / steps as f64; steps])?;
        let pooled = tape.broadcast(tape.broadcast(pooled, 0, k)?, 0, steps)?;
        let z = self.pool_mlp.forward(tape, store, tape.concat(&[attended, pooled], 2)?)?;
        let pe = tape.broadcast(tape.constant(self.pe.clone()), 1, k)?;
        let z = tape.add(z, pe)?;
        let all = vec![true; k];
        let refs = self.interaction.forward_time_major(tape, store, z, z, &all)?;
        swap01(tape, refs)
    }
}

#[derive(Clone, Debug)]
pub enum References {
    Extractor(ReferenceExtractor),
    /// Ablation: references regressed from the target's own features.
    AgentMlp(Mlp),
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[K, f, 5]`.
    pub trajectories: Var,
    /// `[K]`.
    pub probabilities: Var,
    /// `[K]` pre-softmax scores.
    pub logits: Var,
    /// Future relative motions `[N_m, f, 3]` (distance in network units).
    pub coupled_motion: Var,
    /// Motion prior positions `[f, 2]` in meters.
    pub motion_prior: Var,
    /// `[K, T, D]`.
    pub references: Var,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub references: References,
    pub couple_attention: AttentionLayer,
    pub couple_mlp: Mlp,
    pub capture_mlp: Mlp,
    pub relative_mlp: Mlp,
    pub prior_mlp: Mlp,
    pub condition_mlp: Mlp,
    pub lstm: Lstm,
    pub output: Linear,
    pub probability_mlp: Mlp,
}

impl Decoder {
    /// Builds parameters under `decoder.`.
    pub fn new(pb: &mut ParamBuilder<'_>, config: DecoderConfig) -> Result<Self> {
        let d = config.dim;
        if d % 2 != 0 {
            return Err(Error::Config(format!("dimension {d} must be even")));
        }
        let mut p = pb.scope("decoder");
        let references = if config.use_reference_extractor {
            References::Extractor(ReferenceExtractor::new(&mut p.scope("reference"), &config)?)
        } else {
            References::AgentMlp(Mlp::new(&mut p.scope("reference_ablation"), d, d, config.modes * d)?)
        };
        Ok(Self {
            references,
            couple_attention: AttentionLayer::new(&mut p.scope("couple_attention"), d, config.heads)?,
            couple_mlp: Mlp::new(&mut p.scope("couple_mlp"), d, d, REL_DIM)?,
            capture_mlp: Mlp::new(&mut p.scope("capture_mlp"), d, d, 2)?,
            relative_mlp: Mlp::new(&mut p.scope("relative_mlp"), REL_DIM, d, d / 2)?,
            prior_mlp: Mlp::new(&mut p.scope("prior_mlp"), 2, d, d / 2)?,
            condition_mlp: Mlp::new(&mut p.scope("condition_mlp"), 2 * d, d, d)?,
            lstm: Lstm::new(&mut p.scope("lstm"), d, d)?,
            output: Linear::new(&mut p.scope("output"), d, MOTION_DIM)?,
            probability_mlp: Mlp::new(&mut p.scope("probability_mlp"), d, d, 1)?,
            config,
        })
    }

    pub fn reference_features(&self, tape: &Tape, store: &ParamStore, ctx: &EncodedContext) -> Result<Var> {
        match &self.references {
            References::Extractor(re) => re.forward(tape, store, ctx.map, &ctx.segment_mask),
            References::AgentMlp(mlp) => {
                let steps = self.config.steps();
                let target = tape.select(ctx.agents, 0)?;
                let r = mlp.forward(tape, store, target)?;
                let r = tape.reshape(r, &[steps, self.config.modes, self.config.dim])?;
                swap01(tape, r)
            }
        }
    }

    /// Future relative motions from the encoded map: `[N_m, f, 3]`.
    pub fn coupled_motion_head(&self, tape: &Tape, store: &ParamStore, map: Var, segment_mask: &[bool]) -> Result<Var> {
        let h = self.couple_attention.forward(tape, store, map, segment_mask, map, segment_mask)?;
        let r = self.couple_mlp.forward(tape, store, h)?;
        let r = tape.slice(r, 1, self.config.history, self.config.future)?;
        tape.mask_blocks(r, &mask_f64(segment_mask))
    }

    /// Motion prior from the target's encoded features only: `[f, 2]` meters.
    pub fn motion_capture_head(&self, tape: &Tape, store: &ParamStore, agents: Var) -> Result<Var> {
        let target = tape.select(agents, 0)?;
        let fut = tape.slice(target, 0, self.config.history, self.config.future)?;
        Ok(tape.scale(self.capture_mlp.forward(tape, store, fut)?, POS_SCALE))
    }

    /// Trajectories `[K, f, 5]` conditioned on references and both
    /// auxiliary outputs.
    pub fn regression(
        &self,
        tape: &Tape,
        store: &ParamStore,
        references: Var,
        coupled_motion: Var,
        motion_prior: Var,
        segment_mask: &[bool],
    ) -> Result<Var> {
        let (k, f) = (self.config.modes, self.config.future);
        let nm = segment_mask.len();
        let r = self.relative_mlp.forward(tape, store, coupled_motion)?;
        let j = self.prior_mlp.forward(tape, store, tape.scale(motion_prior, 1.0 / POS_SCALE))?;
        let z = tape.concat(&[r, tape.broadcast(j, 0, nm)?], 2)?;
        let pooled = tape.weighted_sum(z, 0, &mean_weights(segment_mask))?;
        let refs = tape.slice(references, 1, self.config.history, f)?;
        let cond = tape.concat(&[refs, tape.broadcast(pooled, 0, k)?], 2)?;
        let cond = self.condition_mlp.forward(tape, store, cond)?;
        let states = self.lstm.forward(tape, store, cond, None)?.states;
        let raw = self.output.forward(tape, store, states)?;
        let xy = tape.cumsum(tape.slice(raw, 2, 0, 2)?, 1)?;
        let heading = tape.normalize_last(tape.slice(raw, 2, 2, 2)?)?;
        let speed = tape.scale(tape.slice(raw, 2, 4, 1)?, POS_SCALE);
        tape.concat(&[xy, heading, speed], 2)
    }

    /// Softmax over per-mode scores of time-averaged references.
    pub fn probability_head(&self, tape: &Tape, store: &ParamStore, references: Var) -> Result<(Var, Var)> {
        let s = tape.shape(references);
        let (k, steps) = (s[0], s[1]);
        let pooled = tape.weighted_sum(references, 1, &vec![1.0 / steps as f64; steps])?;
        let logits = tape.reshape(self.probability_mlp.forward(tape, store, pooled)?, &[1, k])?;
        let probs = tape.softmax(logits, None)?;
        Ok((tape.reshape(probs, &[k])?, tape.reshape(logits, &[k])?))
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, ctx: &EncodedContext) -> Result<DecoderOutput> {
        let references = self.reference_features(tape, store, ctx)?;
        let coupled_motion = self.coupled_motion_head(tape, store, ctx.map, &ctx.segment_mask)?;
        let motion_prior = self.motion_capture_head(tape, store, ctx.agents)?;
        let trajectories = self.regression(tape, store, references, coupled_motion, motion_prior, &ctx.segment_mask)?;
        let (probabilities, logits) = self.probability_head(tape, store, references)?;
        Ok(DecoderOutput {
            trajectories,
            probabilities,
            logits,
            coupled_motion,
            motion_prior,
            references,
        })
    }
}

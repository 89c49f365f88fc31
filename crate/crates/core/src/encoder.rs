//! Coupled layer, per-domain social interaction, and context fusion.
//!
//! Entity-major features are laid out `[E, T, D]`; attention across entities
//! runs on the time-major view `[T, E, D]` so every timestamp is one batch row.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inputs::{SceneInputs, AGENT_DIM, RELATIVE_INPUT_DIM};
use crate::nn::{positional_embedding, LayerNorm, Linear, Mlp, MultiHeadAttention, MultiScaleNode};
use crate::nn::{ParamBuilder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scene::MAP_POINT_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Bilateral,
    Stack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub bq_heads: usize,
    pub steps: usize,
    pub fusion: Fusion,
    pub use_relative_motions: bool,
    pub use_bilateral_query: bool,
}

pub(crate) fn mask_f64(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// Averaging weights over the valid entries; all zero when none are valid.
pub(crate) fn mean_weights(mask: &[bool]) -> Vec<f64> {
    let n = mask.iter().filter(|&&m| m).count();
    mask.iter()
        .map(|&m| if m { 1.0 / n as f64 } else { 0.0 })
        .collect()
}

/// `[T, E]` key mask repeated for every timestamp.
pub(crate) fn tile_mask(mask: &[bool], times: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(mask.len() * times);
    for _ in 0..times {
        out.extend_from_slice(mask);
    }
    out
}

pub(crate) fn swap01(tape: &Tape, x: Var) -> Result<Var> {
    tape.permute(x, &[1, 0, 2])
}

/// Post-norm transformer layer: `y = LN(q + MHA(q, kv))`, `out = LN(y + MLP(y))`.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub attention: MultiHeadAttention,
    pub norm_attention: LayerNorm,
    pub mlp: Mlp,
    pub norm_mlp: LayerNorm,
}

impl AttentionLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(&mut pb.scope("attention"), dim, heads)?,
            norm_attention: LayerNorm::new(&mut pb.scope("norm1"), dim)?,
            mlp: Mlp::new(&mut pb.scope("mlp"), dim, dim, dim)?,
            norm_mlp: LayerNorm::new(&mut pb.scope("norm2"), dim)?,
        })
    }

    /// Time-major `queries [T, Eq, D]` over `keys [T, Ek, D]`; `key_mask`
    /// has one entry per key entity. No valid key means passthrough.
    pub fn forward_time_major(
        &self,
        tape: &Tape,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        key_mask: &[bool],
    ) -> Result<Var> {
        if !key_mask.iter().any(|&m| m) {
            return Ok(queries);
        }
        let steps = tape.shape(queries)[0];
        let mask = tile_mask(key_mask, steps);
        let attended = self.attention.forward(tape, store, queries, keys, Some(&mask))?;
        let y = self.norm_attention.forward(tape, store, tape.add(queries, attended)?)?;
        let z = tape.add(y, self.mlp.forward(tape, store, y)?)?;
        self.norm_mlp.forward(tape, store, z)
    }

    /// Entity-major variant; rows of masked query entities come out zero.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        queries: Var,
        query_mask: &[bool],
        keys: Var,
        key_mask: &[bool],
    ) -> Result<Var> {
        if !key_mask.iter().any(|&m| m) {
            return Ok(queries);
        }
        let q = swap01(tape, queries)?;
        let k = if keys == queries { q } else { swap01(tape, keys)? };
        let out = swap01(tape, self.forward_time_major(tape, store, q, k, key_mask)?)?;
        tape.mask_blocks(out, &mask_f64(query_mask))
    }
}

/// Bookkeeping exposed by the bilateral query for inspection.
#[derive(Clone, Debug)]
pub struct FusionTrace {
    /// `[T·H, A, M]` affinity, computed once and read by both directions.
    pub affinity: Var,
    /// Number of per-timestamp affinity materializations.
    pub affinity_evaluations: usize,
    /// Agent-side weights `[T·H, A, M]` (absent with no valid segment).
    pub agent_weights: Option<Var>,
    /// Map-side weights `[T·H, M, A]` (absent with no valid segment).
    pub map_weights: Option<Var>,
    pub degenerate: bool,
}

/// Both domains query each other through one shared affinity matrix built
/// from a single projection `W_bq`. The mean query of each side is reduced
/// to a positive temperature that scales its view of the affinity.
#[derive(Clone, Debug)]
pub struct BilateralQuery {
    pub w_bq: ParamId,
    pub query_agent: Linear,
    pub query_map: Linear,
    pub value_agent: Linear,
    pub value_map: Linear,
    pub temperature_agent: Linear,
    pub temperature_map: Linear,
    pub norm_agent: LayerNorm,
    pub norm_map: LayerNorm,
    pub mlp_agent: Mlp,
    pub mlp_map: Mlp,
    pub dim: usize,
    pub heads: usize,
}

impl BilateralQuery {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} bilateral-query heads do not divide {dim}")));
        }
        Ok(Self {
            w_bq: pb.uniform("w_bq", &[dim, dim], dim)?,
            query_agent: Linear::new(&mut pb.scope("query_agent"), dim, dim)?,
            query_map: Linear::new(&mut pb.scope("query_map"), dim, dim)?,
            value_agent: Linear::new(&mut pb.scope("value_agent"), dim, dim)?,
            value_map: Linear::new(&mut pb.scope("value_map"), dim, dim)?,
            temperature_agent: Linear::new(&mut pb.scope("temperature_agent"), dim, 1)?,
            temperature_map: Linear::new(&mut pb.scope("temperature_map"), dim, 1)?,
            norm_agent: LayerNorm::new(&mut pb.scope("norm_agent"), dim)?,
            norm_map: LayerNorm::new(&mut pb.scope("norm_map"), dim)?,
            mlp_agent: Mlp::new(&mut pb.scope("mlp_agent"), dim, dim, dim)?,
            mlp_map: Mlp::new(&mut pb.scope("mlp_map"), dim, dim, dim)?,
            dim,
            heads,
        })
    }

    /// `[T, E, D] -> [T·H, E, D/H]`.
    fn split(&self, tape: &Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        let (t, e, dh) = (s[0], s[1], self.dim / self.heads);
        let r = tape.reshape(x, &[t, e, self.heads, dh])?;
        let p = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(p, &[t * self.heads, e, dh])
    }

    fn merge(&self, tape: &Tape, x: Var, steps: usize) -> Result<Var> {
        let s = tape.shape(x);
        let (e, dh) = (s[1], s[2]);
        let r = tape.reshape(x, &[steps, self.heads, e, dh])?;
        let p = tape.permute(r, &[0, 2, 1, 3])?;
        tape.reshape(p, &[steps, e, self.dim])
    }

    /// Positive temperature per timestamp from the masked-mean query,
    /// expanded to `[T·H, rows, cols]`.
    fn temperature(
        &self,
        tape: &Tape,
        store: &ParamStore,
        head: &Linear,
        queries: Var,
        mask: &[bool],
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let steps = tape.shape(queries)[0];
        let mean = tape.weighted_sum(queries, 1, &mean_weights(mask))?;
        let tau = tape.softplus(head.forward(tape, store, mean)?);
        let tau = tape.reshape(tau, &[steps])?;
        let tau = tape.reshape(tape.broadcast(tau, 1, self.heads)?, &[steps * self.heads])?;
        tape.broadcast(tape.broadcast(tau, 1, rows)?, 2, cols)
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        agents: Var,
        agent_mask: &[bool],
        map: Var,
        segment_mask: &[bool],
    ) -> Result<(Var, Var, FusionTrace)> {
        let at = swap01(tape, agents)?;
        let mt = swap01(tape, map)?;
        let (steps, na, nm) = (tape.shape(at)[0], agent_mask.len(), segment_mask.len());
        let w = tape.param(store, self.w_bq);
        let z_agent = self.split(tape, tape.matmul(at, w)?)?;
        let z_map = self.split(tape, tape.matmul(mt, w)?)?;
        let affinity = tape.batch_matmul(z_agent, z_map, true)?;
        let affinity_t = tape.permute(affinity, &[0, 2, 1])?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();

        let any_segment = segment_mask.iter().any(|&m| m);
        let any_agent = agent_mask.iter().any(|&m| m);
        let mut trace = FusionTrace {
            affinity,
            affinity_evaluations: steps,
            agent_weights: None,
            map_weights: None,
            degenerate: !any_segment,
        };
        let zeros = |e: usize| tape.constant(Tensor::zeros(&[steps, e, self.dim]));

        let h_agent = if any_segment {
            let qa = self.query_agent.forward(tape, store, at)?;
            let tau = self.temperature(tape, store, &self.temperature_agent, qa, agent_mask, na, nm)?;
            let logits = tape.scale(tape.mul(affinity, tau)?, scale);
            let mask = tile_mask(segment_mask, steps * self.heads * na);
            let weights = tape.softmax(logits, Some(&mask))?;
            trace.agent_weights = Some(weights);
            let v = self.split(tape, self.value_map.forward(tape, store, mt)?)?;
            self.merge(tape, tape.batch_matmul(weights, v, false)?, steps)?
        } else {
            warn!("bilateral query: no valid map segment, agent features pass through");
            zeros(na)
        };
        let fused_agent = self.mlp_agent.forward(
            tape,
            store,
            self.norm_agent.forward(tape, store, tape.add(h_agent, at)?)?,
        )?;
        let out_agent = tape.mask_blocks(swap01(tape, fused_agent)?, &mask_f64(agent_mask))?;

        let out_map = if any_segment && any_agent {
            let qm = self.query_map.forward(tape, store, mt)?;
            let tau = self.temperature(tape, store, &self.temperature_map, qm, segment_mask, nm, na)?;
            let logits = tape.scale(tape.mul(affinity_t, tau)?, scale);
            let mask = tile_mask(agent_mask, steps * self.heads * nm);
            let weights = tape.softmax(logits, Some(&mask))?;
            trace.map_weights = Some(weights);
            let v = self.split(tape, self.value_agent.forward(tape, store, at)?)?;
            let h_map = self.merge(tape, tape.batch_matmul(weights, v, false)?, steps)?;
            let fused = self.mlp_map.forward(
                tape,
                store,
                self.norm_map.forward(tape, store, tape.add(h_map, mt)?)?,
            )?;
            tape.mask_blocks(swap01(tape, fused)?, &mask_f64(segment_mask))?
        } else {
            swap01(tape, zeros(nm))?
        };
        Ok((out_agent, out_map, trace))
    }
}

/// Baseline fusion: agent→map and map→agent cross-attention followed by four
/// self-attention layers alternating between the agent and map domains.
#[derive(Clone, Debug)]
pub struct StackAttention {
    pub layers: Vec<AttentionLayer>,
}

impl StackAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        let layers = (0..6)
            .map(|i| AttentionLayer::new(&mut pb.scope(&format!("layer{i}")), dim, heads))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        agents: Var,
        agent_mask: &[bool],
        map: Var,
        segment_mask: &[bool],
    ) -> Result<(Var, Var)> {
        let (s, l) = (store, &self.layers);
        let mut a = l[0].forward(tape, s, agents, agent_mask, map, segment_mask)?;
        let mut m = l[1].forward(tape, s, map, segment_mask, a, agent_mask)?;
        for (i, layer) in l[2..].iter().enumerate() {
            if i % 2 == 0 {
                a = layer.forward(tape, s, a, agent_mask, a, agent_mask)?;
            } else {
                m = layer.forward(tape, s, m, segment_mask, m, segment_mask)?;
            }
        }
        Ok((a, m))
    }
}

/// Ablation fusion: agents query the map; map features pass through.
#[derive(Clone, Debug)]
pub struct UnilateralQuery {
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl UnilateralQuery {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(&mut pb.scope("attention"), dim, heads)?,
            norm: LayerNorm::new(&mut pb.scope("norm"), dim)?,
            mlp: Mlp::new(&mut pb.scope("mlp"), dim, dim, dim)?,
        })
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        agents: Var,
        agent_mask: &[bool],
        map: Var,
        segment_mask: &[bool],
    ) -> Result<(Var, Var)> {
        let at = swap01(tape, agents)?;
        let steps = tape.shape(at)[0];
        let h = if segment_mask.iter().any(|&m| m) {
            let mt = swap01(tape, map)?;
            let mask = tile_mask(segment_mask, steps);
            self.attention.forward(tape, store, at, mt, Some(&mask))?
        } else {
            warn!("unilateral query: no valid map segment, agent features pass through");
            tape.constant(Tensor::zeros(&tape.shape(at)))
        };
        let fused = self.mlp.forward(tape, store, self.norm.forward(tape, store, tape.add(h, at)?)?)?;
        let a = tape.mask_blocks(swap01(tape, fused)?, &mask_f64(agent_mask))?;
        Ok((a, map))
    }
}

#[derive(Clone, Debug)]
pub enum FusionStage {
    Bilateral(BilateralQuery),
    Stack(StackAttention),
    Unilateral(UnilateralQuery),
}

#[derive(Clone, Debug)]
pub struct EncodedContext {
    /// `[A, T, D]`.
    pub agents: Var,
    /// `[N_m, T, D]`.
    pub map: Var,
    pub agent_mask: Vec<bool>,
    pub segment_mask: Vec<bool>,
    pub trace: Option<FusionTrace>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub agent_mlp: Mlp,
    pub topo: MultiScaleNode,
    pub motion_mlp: Mlp,
    pub motion: MultiScaleNode,
    pub coupled_mlp: Mlp,
    pub agent_interaction: AttentionLayer,
    pub map_interaction: AttentionLayer,
    pub fusion: FusionStage,
    agent_pe: Tensor,
    relative_pe: Tensor,
}

impl Encoder {
    /// Builds parameters under `encoder.` and `fusion.`.
    pub fn new(pb: &mut ParamBuilder<'_>, config: EncoderConfig) -> Result<Self> {
        let d = config.dim;
        if config.heads == 0 || d % config.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide dimension {d}", config.heads)));
        }
        let mut e = pb.scope("encoder");
        let agent_mlp = Mlp::new(&mut e.scope("agent"), AGENT_DIM, d, d)?;
        let topo = MultiScaleNode::new(&mut e.scope("topo"), MAP_POINT_DIM, d)?;
        let motion_mlp = Mlp::new(&mut e.scope("motion_mlp"), RELATIVE_INPUT_DIM, d, d)?;
        let motion = MultiScaleNode::new(&mut e.scope("motion"), d, d)?;
        let coupled_mlp = Mlp::new(&mut e.scope("coupled"), 2 * d, d, d)?;
        let agent_interaction = AttentionLayer::new(&mut e.scope("agent_interaction"), d, config.heads)?;
        let map_interaction = AttentionLayer::new(&mut e.scope("map_interaction"), d, config.heads)?;
        let mut f = pb.scope("fusion");
        let fusion = match (config.fusion, config.use_bilateral_query) {
            (Fusion::Stack, _) => FusionStage::Stack(StackAttention::new(&mut f, d, config.heads)?),
            (Fusion::Bilateral, true) => FusionStage::Bilateral(BilateralQuery::new(&mut f, d, config.bq_heads)?),
            (Fusion::Bilateral, false) => FusionStage::Unilateral(UnilateralQuery::new(&mut f, d, config.heads)?),
        };
        Ok(Self {
            agent_pe: positional_embedding(config.steps, AGENT_DIM)?,
            relative_pe: positional_embedding(config.steps, RELATIVE_INPUT_DIM)?,
            config,
            agent_mlp,
            topo,
            motion_mlp,
            motion,
            coupled_mlp,
            agent_interaction,
            map_interaction,
            fusion,
        })
    }

    /// `MLP(PE(agent inputs))`, padded agents zeroed: `[A, T, D]`.
    pub fn coupled_layer_agent(&self, tape: &Tape, store: &ParamStore, x: &SceneInputs) -> Result<Var> {
        let input = tape.constant(x.agents.clone());
        let pe = tape.constant(self.agent_pe.clone());
        let h = self.agent_mlp.forward(tape, store, tape.add_suffix(input, pe)?)?;
        tape.mask_blocks(h, &mask_f64(&x.agent_mask))
    }

    /// Spatial multi-scale node over each segment's points, last valid state
    /// tiled over time: `[N_m, T, D]`.
    pub fn topo_gate(&self, tape: &Tape, store: &ParamStore, x: &SceneInputs) -> Result<Var> {
        let points = tape.constant(x.points.clone());
        let out = self.topo.forward(tape, store, points, Some(&x.point_mask))?;
        tape.broadcast(out.last, 1, self.config.steps)
    }

    /// Relative-motion MLP then a temporal multi-scale node: `[N_m, T, D]`.
    pub fn motion_gate(&self, tape: &Tape, store: &ParamStore, x: &SceneInputs) -> Result<Var> {
        let input = tape.constant(x.relative.clone());
        let pe = tape.constant(self.relative_pe.clone());
        let h = self.motion_mlp.forward(tape, store, tape.add_suffix(input, pe)?)?;
        Ok(self.motion.forward(tape, store, h, None)?.states)
    }

    /// `MLP([topo, motion])`, padded segments zeroed.
    pub fn coupled_layer_map(&self, tape: &Tape, store: &ParamStore, topo: Var, motion: Var, mask: &[bool]) -> Result<Var> {
        if tape.shape(topo) != tape.shape(motion) {
            return Err(Error::Shape(format!(
                "coupled layer: topology {:?} vs motion {:?}",
                tape.shape(topo),
                tape.shape(motion)
            )));
        }
        let h = self.coupled_mlp.forward(tape, store, tape.concat(&[topo, motion], 2)?)?;
        tape.mask_blocks(h, &mask_f64(mask))
    }

    pub fn social_interaction(&self, tape: &Tape, store: &ParamStore, x: Var, mask: &[bool], agents: bool) -> Result<Var> {
        let layer = if agents { &self.agent_interaction } else { &self.map_interaction };
        layer.forward(tape, store, x, mask, x, mask)
    }

    pub fn fuse(
        &self,
        tape: &Tape,
        store: &ParamStore,
        agents: Var,
        agent_mask: &[bool],
        map: Var,
        segment_mask: &[bool],
    ) -> Result<(Var, Var, Option<FusionTrace>)> {
        Ok(match &self.fusion {
            FusionStage::Bilateral(b) => {
                let (a, m, t) = b.forward(tape, store, agents, agent_mask, map, segment_mask)?;
                (a, m, Some(t))
            }
            FusionStage::Stack(s) => {
                let (a, m) = s.forward(tape, store, agents, agent_mask, map, segment_mask)?;
                (a, m, None)
            }
            FusionStage::Unilateral(u) => {
                let (a, m) = u.forward(tape, store, agents, agent_mask, map, segment_mask)?;
                (a, m, None)
            }
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &SceneInputs) -> Result<EncodedContext> {
        let agents = self.coupled_layer_agent(tape, store, x)?;
        let topo = self.topo_gate(tape, store, x)?;
        let motion = if self.config.use_relative_motions {
            self.motion_gate(tape, store, x)?
        } else {
            tape.constant(Tensor::zeros(&tape.shape(topo)))
        };
        let map = self.coupled_layer_map(tape, store, topo, motion, &x.segment_mask)?;
        let agents = self.social_interaction(tape, store, agents, &x.agent_mask, true)?;
        let map = self.social_interaction(tape, store, map, &x.segment_mask, false)?;
        let (agents, map, trace) = self.fuse(tape, store, agents, &x.agent_mask, map, &x.segment_mask)?;
        Ok(EncodedContext {
            agents,
            map,
            agent_mask: x.agent_mask.clone(),
            segment_mask: x.segment_mask.clone(),
            trace,
        })
    }
}

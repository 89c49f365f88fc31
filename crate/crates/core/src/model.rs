//! The full network: encoder and decoder over one target's scene inputs.

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, DecoderOutput};
use crate::encoder::{EncodedContext, Encoder, EncoderConfig, Fusion};
use crate::error::{Error, Result};
use crate::inputs::{prepare_inputs, Capacity, SceneInputs, MOTION_DIM};
use crate::nn::params::seeded_rng;
use crate::nn::{ParamBuilder, ParamStore, Tape, Var};
use crate::scene::{RigidTransform, Scenario};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub modes: usize,
    pub heads: usize,
    pub bq_heads: usize,
    pub max_segments: usize,
    pub points_per_segment: usize,
    pub max_agents: usize,
    pub history: usize,
    pub future: usize,
    pub fusion: Fusion,
    pub use_relative_motions: bool,
    pub use_bilateral_query: bool,
    pub use_reference_extractor: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            modes: 3,
            heads: 4,
            bq_heads: 1,
            max_segments: 16,
            points_per_segment: 9,
            max_agents: 7,
            history: 10,
            future: 15,
            fusion: Fusion::Bilateral,
            use_relative_motions: true,
            use_bilateral_query: true,
            use_reference_extractor: true,
        }
    }
}

impl ModelConfig {
    pub fn capacity(&self) -> Capacity {
        Capacity {
            max_segments: self.max_segments,
            points_per_segment: self.points_per_segment,
            max_agents: self.max_agents,
            history: self.history,
            future: self.future,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("modes", self.modes),
            ("heads", self.heads),
            ("bq_heads", self.bq_heads),
            ("max_segments", self.max_segments),
            ("points_per_segment", self.points_per_segment),
            ("history", self.history),
            ("future", self.future),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.dim % 2 != 0 {
            return Err(Error::Config(format!("dim {} must be even", self.dim)));
        }
        for (name, h) in [("heads", self.heads), ("bq_heads", self.bq_heads)] {
            if self.dim % h != 0 {
                return Err(Error::Config(format!("{name} = {h} does not divide dim {}", self.dim)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub context: EncodedContext,
    pub decoded: DecoderOutput,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Builds the network and its freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let encoder = Encoder::new(
            &mut pb,
            EncoderConfig {
                dim: config.dim,
                heads: config.heads,
                bq_heads: config.bq_heads,
                steps: config.history + config.future,
                fusion: config.fusion,
                use_relative_motions: config.use_relative_motions,
                use_bilateral_query: config.use_bilateral_query,
            },
        )?;
        let decoder = Decoder::new(
            &mut pb,
            DecoderConfig {
                dim: config.dim,
                heads: config.heads,
                modes: config.modes,
                history: config.history,
                future: config.future,
                use_reference_extractor: config.use_reference_extractor,
            },
        )?;
        Ok((
            Self {
                config,
                encoder,
                decoder,
            },
            store,
        ))
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, inputs: &SceneInputs) -> Result<ModelOutput> {
        if inputs.capacity != self.config.capacity() {
            return Err(Error::Shape(format!(
                "inputs were prepared for {:?}, model expects {:?}",
                inputs.capacity,
                self.config.capacity()
            )));
        }
        let context = self.encoder.forward(tape, store, inputs)?;
        let decoded = self.decoder.forward(tape, store, &context)?;
        Ok(ModelOutput { context, decoded })
    }

    /// Runs the network and returns the target's predictions in the world frame.
    pub fn predict(&self, store: &ParamStore, inputs: &SceneInputs) -> Result<PredictionSet> {
        let tape = Tape::new();
        let out = self.forward(&tape, store, inputs)?;
        let traj = tape.value(out.decoded.trajectories).clone();
        let probs = tape.value(out.decoded.probabilities).clone();
        if !traj.all_finite() || !probs.all_finite() {
            return Err(Error::NumericHealth("non-finite model output".into()));
        }
        Ok(PredictionSet::from_local(
            &inputs.scenario_id,
            inputs.target_id,
            traj.data(),
            probs.data(),
            self.config.future,
            &inputs.frame,
        ))
    }

    /// Predicts one target of a scenario in any frame.
    pub fn predict_scenario(&self, store: &ParamStore, scenario: &Scenario, target: u64) -> Result<PredictionSet> {
        let inputs = prepare_inputs(scenario, target, &self.config.capacity(), false)?;
        self.predict(store, &inputs)
    }

    pub fn parameter_count(store: &ParamStore) -> usize {
        store.count()
    }

    pub fn fusion_parameter_count(store: &ParamStore) -> usize {
        store.count_prefix("fusion.")
    }
}

/// Forward outputs as plain values, for inspection.
pub fn output_values(tape: &Tape, out: &ModelOutput) -> Vec<(String, Vec<f64>)> {
    let d = &out.decoded;
    let named: [(&str, Var); 6] = [
        ("trajectories", d.trajectories),
        ("probabilities", d.probabilities),
        ("coupled_motion", d.coupled_motion),
        ("motion_prior", d.motion_prior),
        ("references", d.references),
        ("agent_features", out.context.agents),
    ];
    let mut v: Vec<(String, Vec<f64>)> = named
        .iter()
        .map(|(n, var)| (n.to_string(), tape.value(*var).data().to_vec()))
        .collect();
    v.push(("map_features".into(), tape.value(out.context.map).data().to_vec()));
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedMode {
    pub prob: f64,
    /// `[x, y, cos, sin, v]` per future step.
    pub points: Vec<[f64; MOTION_DIM]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scenario_id: String,
    pub target_id: u64,
    pub frame: String,
    pub modes: Vec<PredictedMode>,
}

impl PredictionSet {
    /// Maps `[K, f, 5]` target-frame trajectories to the world.
    pub fn from_local(
        scenario_id: &str,
        target_id: u64,
        trajectories: &[f64],
        probabilities: &[f64],
        future: usize,
        frame: &RigidTransform,
    ) -> Self {
        let modes = probabilities
            .iter()
            .enumerate()
            .map(|(k, &prob)| {
                let points = (0..future)
                    .map(|t| {
                        let r = &trajectories[(k * future + t) * MOTION_DIM..(k * future + t + 1) * MOTION_DIM];
                        let p = frame.apply([r[0], r[1]]);
                        let h = frame.rotate([r[2], r[3]]);
                        [p[0], p[1], h[0], h[1], r[4]]
                    })
                    .collect();
                PredictedMode { prob, points }
            })
            .collect();
        Self {
            scenario_id: scenario_id.to_string(),
            target_id,
            frame: "world".into(),
            modes,
        }
    }

    pub fn endpoints(&self) -> Vec<[f64; 2]> {
        self.modes
            .iter()
            .map(|m| {
                let p = m.points.last().expect("non-empty horizon");
                [p[0], p[1]]
            })
            .collect()
    }
}

//! Forecasting metrics, the history-degradation sweep and the
//! parameter/latency benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{generate_synthetic_scenario, GeneratorConfig};
use crate::inputs::{prepare_inputs, SceneInputs, MOTION_DIM};
use crate::model::{Model, ModelConfig, PredictionSet};
use crate::nn::params::seeded_rng;
use crate::nn::{ParamStore, Tape};
use crate::scene::{recompute_kinematics, MotionState, Scenario};

/// Endpoint distance above which a scenario counts as a miss (meters).
pub const MISS_THRESHOLD: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss: f64,
    pub brier: f64,
    pub brier_min_fde: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub brier: f64,
    pub brier_min_fde: f64,
    pub count: usize,
    pub k: usize,
}

impl MetricsReport {
    /// `(name, value)` pairs in a fixed order.
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("min_ade", self.min_ade),
            ("min_fde", self.min_fde),
            ("miss_rate", self.miss_rate),
            ("brier", self.brier),
            ("brier_min_fde", self.brier_min_fde),
        ]
    }

    /// Header plus one summary row.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(self).map_err(csv_error)?;
        w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Metrics for one target. `gt` is the world-frame future xy.
pub fn compute_metrics(pred: &PredictionSet, gt: &[[f64; 2]]) -> Result<ScenarioMetrics> {
    if pred.frame != "world" {
        return Err(Error::Frame(format!("predictions are in frame `{}`, expected world", pred.frame)));
    }
    if pred.modes.is_empty() || gt.is_empty() {
        return Err(Error::Shape("metrics need at least one mode and one future step".into()));
    }
    let f = gt.len();
    let mut best = (0, f64::INFINITY);
    let mut min_ade = f64::INFINITY;
    for (k, mode) in pred.modes.iter().enumerate() {
        if mode.points.len() != f {
            return Err(Error::Shape(format!(
                "mode {k} has {} steps, ground truth has {f}",
                mode.points.len()
            )));
        }
        let dists: Vec<f64> = mode
            .points
            .iter()
            .zip(gt)
            .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
            .collect();
        min_ade = min_ade.min(dists.iter().sum::<f64>() / f as f64);
        if dists[f - 1] < best.1 {
            best = (k, dists[f - 1]);
        }
    }
    let min_fde = best.1;
    let brier = (1.0 - pred.modes[best.0].prob).powi(2);
    Ok(ScenarioMetrics {
        min_ade,
        min_fde,
        miss: if min_fde > MISS_THRESHOLD { 1.0 } else { 0.0 },
        brier,
        brier_min_fde: min_fde + brier,
    })
}

/// Averages per-scenario metrics.
pub fn aggregate(per_scenario: &[ScenarioMetrics], k: usize) -> Result<MetricsReport> {
    if per_scenario.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = per_scenario.len() as f64;
    let mean = |f: fn(&ScenarioMetrics) -> f64| per_scenario.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        min_ade: mean(|m| m.min_ade),
        min_fde: mean(|m| m.min_fde),
        miss_rate: mean(|m| m.miss),
        brier: mean(|m| m.brier),
        brier_min_fde: mean(|m| m.brier_min_fde),
        count: per_scenario.len(),
        k,
    })
}

/// World-frame future xy of the labeled target in `inputs`.
pub fn world_future(inputs: &SceneInputs) -> Result<Vec<[f64; 2]>> {
    let labels = inputs
        .labels
        .as_ref()
        .ok_or_else(|| Error::Label(format!("scenario {} has no labels", inputs.scenario_id)))?;
    Ok(labels
        .future
        .data()
        .chunks(MOTION_DIM)
        .map(|r| inputs.frame.apply([r[0], r[1]]))
        .collect())
}

/// Per-scenario metrics over prepared, labeled inputs (parallel over the
/// current rayon pool, results in input order).
pub fn evaluate_inputs_detailed(model: &Model, store: &ParamStore, data: &[SceneInputs]) -> Result<Vec<ScenarioMetrics>> {
    data.par_iter()
        .map(|x| compute_metrics(&model.predict(store, x)?, &world_future(x)?))
        .collect()
}

pub fn evaluate_inputs(model: &Model, store: &ParamStore, data: &[SceneInputs]) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    aggregate(&evaluate_inputs_detailed(model, store, data)?, model.config.modes)
}

/// Prepares every scenario on its flagged target.
pub fn prepare_dataset(model: &ModelConfig, scenarios: &[Scenario], with_labels: bool) -> Result<Vec<SceneInputs>> {
    scenarios
        .iter()
        .map(|s| {
            let target = s
                .target()
                .ok_or_else(|| Error::Label(format!("scenario {} has no target agent", s.meta.id)))?;
            prepare_inputs(s, target.id, &model.capacity(), with_labels)
        })
        .collect()
}

/// Evaluates the flagged target of every scenario.
pub fn evaluate(model: &Model, store: &ParamStore, scenarios: &[Scenario]) -> Result<MetricsReport> {
    if scenarios.is_empty() {
        return Err(Error::EmptyDataset);
    }
    evaluate_inputs(model, store, &prepare_dataset(&model.config, scenarios, true)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationAxis {
    MaskRate,
    NoiseSigma,
}

impl DegradationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MaskRate => "mask_rate",
            Self::NoiseSigma => "noise_sigma",
        }
    }
}

/// Perturbs the observed history. Level 0 returns an exact copy.
pub fn perturb_scenario(scenario: &Scenario, axis: DegradationAxis, level: f64, rng: &mut impl Rng) -> Result<Scenario> {
    check_level(axis, level)?;
    let mut out = scenario.clone();
    if level == 0.0 {
        return Ok(out);
    }
    let h = scenario.meta.history;
    match axis {
        DegradationAxis::MaskRate => {
            for agent in &mut out.agents {
                for t in 0..h {
                    let drop = rng.random::<f64>() < level;
                    if drop && !(agent.is_target && t == h - 1) {
                        agent.states[t] = MotionState::invalid();
                    }
                }
            }
        }
        DegradationAxis::NoiseSigma => {
            let normal = Normal::new(0.0, level).map_err(|e| Error::Domain(format!("noise level {level}: {e}")))?;
            for agent in &mut out.agents {
                for s in agent.states[..h].iter_mut().filter(|s| s.valid) {
                    s.x += normal.sample(rng);
                    s.y += normal.sample(rng);
                }
                recompute_kinematics(&mut agent.states[..h], scenario.meta.dt);
            }
        }
    }
    Ok(out)
}

fn check_level(axis: DegradationAxis, level: f64) -> Result<()> {
    if !(level >= 0.0) || !level.is_finite() {
        return Err(Error::Domain(format!("{} level {level} must be finite and non-negative", axis.as_str())));
    }
    if axis == DegradationAxis::MaskRate && level >= 1.0 {
        return Err(Error::Domain(format!("mask rate {level} would remove the whole history")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationCurve {
    pub axis: DegradationAxis,
    pub points: Vec<(f64, MetricsReport)>,
}

impl DegradationCurve {
    /// One row per (level, metric).
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["axis", "level", "metric", "value"]).map_err(csv_error)?;
        for (level, report) in &self.points {
            for (name, value) in report.named() {
                w.write_record([self.axis.as_str(), &level.to_string(), name, &value.to_string()])
                    .map_err(csv_error)?;
            }
        }
        w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
    }

    /// Line chart of every metric against the level.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const PAD: f64 = 50.0;
        const COLORS: [&str; 5] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
        let levels: Vec<f64> = self.points.iter().map(|p| p.0).collect();
        let x_max = levels.iter().copied().fold(0.0, f64::max).max(1e-12);
        let y_max = self
            .points
            .iter()
            .flat_map(|p| p.1.named().map(|(_, v)| v))
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max)
            .max(1e-12);
        let sx = |x: f64| PAD + x / x_max * (W - 2.0 * PAD);
        let sy = |y: f64| H - PAD - y / y_max * (H - 2.0 * PAD);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{0}" stroke="black"/>"#,
            H - PAD,
            W - PAD
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            W / 2.0,
            H - 12.0,
            self.axis.as_str()
        );
        let _ = writeln!(s, r#"<text x="{PAD}" y="{}" font-size="11" text-anchor="middle">0</text>"#, H - PAD + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{x_max}</text>"#, W - PAD, H - PAD + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{y_max:.3}</text>"#, PAD - 4.0, PAD + 4.0);
        for (m, color) in COLORS.iter().enumerate() {
            let name = self.points.first().map_or("", |p| p.1.named()[m].0);
            let pts: Vec<String> = self
                .points
                .iter()
                .map(|(l, r)| format!("{:.2},{:.2}", sx(*l), sy(r.named()[m].1)))
                .collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="11" fill="{color}">{name}</text>"#,
                W - PAD - 90.0,
                PAD + 14.0 * m as f64
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Evaluates the flagged targets under increasing history degradation.
/// Perturbations are seeded per (level index, scenario index).
pub fn robustness_sweep(
    model: &Model,
    store: &ParamStore,
    scenarios: &[Scenario],
    axis: DegradationAxis,
    levels: &[f64],
    seed: u64,
) -> Result<DegradationCurve> {
    if scenarios.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if levels.first() != Some(&0.0) {
        return Err(Error::Config("levels must start at 0".into()));
    }
    if levels.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("levels must be strictly ascending".into()));
    }
    for &l in levels {
        check_level(axis, l)?;
    }
    let mut points = Vec::with_capacity(levels.len());
    for (li, &level) in levels.iter().enumerate() {
        let perturbed = scenarios
            .iter()
            .enumerate()
            .map(|(si, s)| {
                let mut rng = seeded_rng(seed ^ ((li as u64) << 32 | si as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                perturb_scenario(s, axis, level, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        points.push((level, evaluate(model, store, &perturbed)?));
    }
    Ok(DegradationCurve { axis, points })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub param_count: usize,
    pub fusion_param_count: usize,
    pub median_forward_latency_ms: f64,
    pub batch: usize,
    pub passes: usize,
}

/// Synthetic batch used for latency measurements. Horizons, map capacity and
/// agent count follow `config`; everything else comes from `scenes`.
pub fn bench_batch(config: &ModelConfig, scenes: &GeneratorConfig, batch: usize) -> Result<Vec<SceneInputs>> {
    let gen = GeneratorConfig {
        history: config.history,
        future: config.future,
        max_segments: config.max_segments,
        points_per_segment: config.points_per_segment,
        agents: config.max_agents + 1,
        ..scenes.clone()
    };
    (0..batch as u64)
        .map(|seed| {
            let s = generate_synthetic_scenario(seed, &gen)?;
            prepare_inputs(&s, 1, &config.capacity(), false)
        })
        .collect()
}

/// Median wall time of one forward pass over `batch` targets, measured
/// single-threaded after `warmup` untimed passes.
pub fn bench(
    config: &ModelConfig,
    scenes: &GeneratorConfig,
    seed: u64,
    batch: usize,
    passes: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if passes == 0 {
        return Err(Error::Config("bench needs at least one timed pass".into()));
    }
    let (model, store) = Model::new(config.clone(), seed)?;
    let data = bench_batch(config, scenes, batch)?;
    let run = || -> Result<()> {
        for x in &data {
            let tape = Tape::new();
            model.forward(&tape, &store, x)?;
        }
        Ok(())
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(passes);
    for _ in 0..passes {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    };
    Ok(BenchReport {
        param_count: Model::parameter_count(&store),
        fusion_param_count: Model::fusion_parameter_count(&store),
        median_forward_latency_ms: median,
        batch,
        passes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PredictedMode;

    fn pred(endpoints: &[([f64; 2], f64)]) -> PredictionSet {
        PredictionSet {
            scenario_id: "s".into(),
            target_id: 1,
            frame: "world".into(),
            modes: endpoints
                .iter()
                .map(|&(e, prob)| PredictedMode {
                    prob,
                    points: vec![[e[0], e[1], 1.0, 0.0, 0.0]],
                })
                .collect(),
        }
    }

    #[test]
    fn perfect_prediction() {
        let m = compute_metrics(&pred(&[([1.0, 2.0], 1.0)]), &[[1.0, 2.0]]).unwrap();
        assert_eq!((m.min_ade, m.min_fde, m.miss, m.brier), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_distances_and_boundary() {
        let m = compute_metrics(&pred(&[([0.0, 0.0], 0.3), ([3.0, 4.0], 0.7)]), &[[6.0, 8.0]]).unwrap();
        assert_eq!(m.min_fde, 5.0);
        assert_eq!(m.miss, 1.0);
        assert!((m.brier - 0.09).abs() < 1e-15);
        let edge = compute_metrics(&pred(&[([2.0, 0.0], 1.0)]), &[[0.0, 0.0]]).unwrap();
        assert_eq!(edge.miss, 0.0);
    }

    #[test]
    fn wrong_frame_is_rejected() {
        let mut p = pred(&[([0.0, 0.0], 1.0)]);
        p.frame = "agent_centric".into();
        assert!(matches!(compute_metrics(&p, &[[0.0, 0.0]]), Err(Error::Frame(_))));
    }

    #[test]
    fn empty_aggregate_is_an_error() {
        assert!(matches!(aggregate(&[], 3), Err(Error::EmptyDataset)));
    }

    #[test]
    fn mask_rate_of_one_is_rejected() {
        let s = generate_synthetic_scenario(0, &GeneratorConfig::default()).unwrap();
        let mut rng = seeded_rng(0);
        assert!(perturb_scenario(&s, DegradationAxis::MaskRate, 1.0, &mut rng).is_err());
        let kept = perturb_scenario(&s, DegradationAxis::MaskRate, 0.9, &mut rng).unwrap();
        assert!(kept.target().unwrap().states[9].valid);
    }
}

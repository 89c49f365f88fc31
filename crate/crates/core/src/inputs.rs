//! Fixed-capacity tensors built from a normalized scenario for one target.
//!
//! Positions, distances and speeds enter the network divided by
//! [`POS_SCALE`]; every padded or unobserved slot is written as an exact zero
//! without reading the source value, so sentinel garbage in padding can never
//! leak into the model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_coupled_map, label_future_relative_motions, REL_DIM};
use crate::nn::Tensor;
use crate::scene::*;

/// Meters per network length unit.
pub const POS_SCALE: f64 = 10.0;
/// Agent input channels: x, y, cos, sin, speed, observed flag.
pub const AGENT_DIM: usize = 6;
/// Relative-motion input channels: dist, cos, sin, valid flag.
pub const RELATIVE_INPUT_DIM: usize = REL_DIM + 1;
/// Predicted motion attributes: x, y, cos, sin, speed.
pub const MOTION_DIM: usize = 5;

/// Capacities and horizons shared by the data and the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capacity {
    pub max_segments: usize,
    pub points_per_segment: usize,
    /// Surrounding agents besides the target.
    pub max_agents: usize,
    pub history: usize,
    pub future: usize,
}

impl Capacity {
    pub fn horizon(&self) -> usize {
        self.history + self.future
    }

    pub fn agent_slots(&self) -> usize {
        self.max_agents + 1
    }
}

/// Ground truth for one target, in the target's frame.
#[derive(Clone, Debug)]
pub struct Labels {
    /// `[f, 5]`: x, y (m), cos, sin, speed (m/s).
    pub future: Tensor,
    /// `[N_m, f, 3]` with distances in network units; padded rows are zero.
    pub relative: Tensor,
}

#[derive(Clone, Debug)]
pub struct SceneInputs {
    pub capacity: Capacity,
    /// `[A, T, 6]`, target in slot 0.
    pub agents: Tensor,
    pub agent_mask: Vec<bool>,
    pub agent_ids: Vec<Option<u64>>,
    /// `[N_m, P_m, 15]`.
    pub points: Tensor,
    /// `[N_m × P_m]`, 1 for real points.
    pub point_mask: Vec<f64>,
    pub segment_mask: Vec<bool>,
    /// `[N_m, T, 4]`.
    pub relative: Tensor,
    /// Maps the target frame back to the world.
    pub frame: RigidTransform,
    pub target_id: u64,
    pub scenario_id: String,
    pub labels: Option<Labels>,
}

impl SceneInputs {
    pub fn segment_count(&self) -> usize {
        self.segment_mask.iter().filter(|&&m| m).count()
    }
}

/// Target first, then up to `max_others` agents ordered by distance to the
/// target at the last observed step (ties by lower id; agents unobserved at
/// that step come last).
pub fn select_agents<'a>(scenario: &'a Scenario, target: u64, max_others: usize) -> Vec<&'a AgentTrack> {
    let anchor = scenario.meta.history - 1;
    let Some(t) = scenario.agent(target) else {
        return vec![];
    };
    let origin = t.states[anchor].position();
    let mut others: Vec<(bool, f64, u64, &AgentTrack)> = scenario
        .agents
        .iter()
        .filter(|a| a.id != target)
        .map(|a| {
            let s = &a.states[anchor];
            let d = if s.valid {
                (s.x - origin[0]).powi(2) + (s.y - origin[1]).powi(2)
            } else {
                f64::INFINITY
            };
            (!s.valid || d.is_nan(), if d.is_nan() { f64::INFINITY } else { d }, a.id, a)
        })
        .collect();
    others.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    std::iter::once(t)
        .chain(others.into_iter().take(max_others).map(|o| o.3))
        .collect()
}

/// Normalizes `scenario` on `target` and lays it out at fixed capacity.
/// With `with_labels` the target's future must be fully observed.
pub fn prepare_inputs(
    scenario: &Scenario,
    target: u64,
    cap: &Capacity,
    with_labels: bool,
) -> Result<SceneInputs> {
    let (h, f) = (cap.history, cap.future);
    let steps = cap.horizon();
    if scenario.meta.history != h || scenario.meta.future != f {
        return Err(Error::Shape(format!(
            "scenario has h={} f={}, model expects h={h} f={f}",
            scenario.meta.history, scenario.meta.future
        )));
    }
    if scenario.map.len() > cap.max_segments {
        return Err(Error::Capacity(format!(
            "{} map segments exceed the capacity of {}",
            scenario.map.len(),
            cap.max_segments
        )));
    }
    if let Some(seg) = scenario.map.iter().find(|s| s.point_count > cap.points_per_segment) {
        return Err(Error::Capacity(format!(
            "segment {} has {} points, capacity is {}",
            seg.id, seg.point_count, cap.points_per_segment
        )));
    }
    let scene = normalize_scenario(scenario, target)?;
    let Frame::AgentCentric(frame) = scene.frame else {
        unreachable!("normalization yields an agent-centric frame")
    };

    let slots = cap.agent_slots();
    let selected = select_agents(&scene, target, cap.max_agents);
    let mut agents = Tensor::zeros(&[slots, steps, AGENT_DIM]);
    let mut agent_mask = vec![false; slots];
    let mut agent_ids = vec![None; slots];
    for (slot, track) in selected.iter().enumerate() {
        agent_ids[slot] = Some(track.id);
        for (t, s) in track.states.iter().take(h).enumerate() {
            if !s.valid {
                continue;
            }
            agent_mask[slot] = true;
            let row = [s.x / POS_SCALE, s.y / POS_SCALE, s.cos_heading, s.sin_heading, s.speed / POS_SCALE, 1.0];
            let at = (slot * steps + t) * AGENT_DIM;
            agents.data_mut()[at..at + AGENT_DIM].copy_from_slice(&row);
        }
    }

    let (nm, pm) = (cap.max_segments, cap.points_per_segment);
    let mut points = Tensor::zeros(&[nm, pm, MAP_POINT_DIM]);
    let mut point_mask = vec![0.0; nm * pm];
    let mut segment_mask = vec![false; nm];
    for (i, seg) in scene.map.iter().enumerate() {
        segment_mask[i] = seg.point_count > 0;
        for (p, pt) in seg.valid_points().iter().enumerate() {
            let mut a = pt.attributes;
            for k in [ATTR_POS, ATTR_POS + 1, ATTR_PRED, ATTR_PRED + 1, ATTR_SUCC, ATTR_SUCC + 1] {
                a[k] /= POS_SCALE;
            }
            let at = (i * pm + p) * MAP_POINT_DIM;
            points.data_mut()[at..at + MAP_POINT_DIM].copy_from_slice(&a);
            point_mask[i * pm + p] = 1.0;
        }
    }

    let target_track = scene.agent(target).expect("normalized target is present");
    let coupled = build_coupled_map(target_track, &scene.map, h, nm)?;
    let mut relative = Tensor::zeros(&[nm, steps, RELATIVE_INPUT_DIM]);
    for i in 0..scene.map.len() {
        for t in 0..h {
            if let Some(r) = coupled.relative.get(i, t) {
                let at = (i * steps + t) * RELATIVE_INPUT_DIM;
                relative.data_mut()[at..at + RELATIVE_INPUT_DIM]
                    .copy_from_slice(&[r.dist / POS_SCALE, r.cos_dir, r.sin_dir, 1.0]);
            }
        }
    }

    let labels = if with_labels {
        let fut = &target_track.states[h..];
        let rel = label_future_relative_motions(fut, &scene.map)?;
        let mut future = Tensor::zeros(&[f, MOTION_DIM]);
        for (t, s) in fut.iter().enumerate() {
            future.data_mut()[t * MOTION_DIM..(t + 1) * MOTION_DIM]
                .copy_from_slice(&[s.x, s.y, s.cos_heading, s.sin_heading, s.speed]);
        }
        let mut relative = Tensor::zeros(&[nm, f, REL_DIM]);
        for i in 0..scene.map.len() {
            for t in 0..f {
                let r = rel.get(i, t).expect("labels are fully valid");
                let at = (i * f + t) * REL_DIM;
                relative.data_mut()[at..at + REL_DIM]
                    .copy_from_slice(&[r.dist / POS_SCALE, r.cos_dir, r.sin_dir]);
            }
        }
        Some(Labels { future, relative })
    } else {
        None
    };

    Ok(SceneInputs {
        capacity: *cap,
        agents,
        agent_mask,
        agent_ids,
        points,
        point_mask,
        segment_mask,
        relative,
        frame,
        target_id: target,
        scenario_id: scenario.meta.id.clone(),
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{generate_synthetic_scenario, GeneratorConfig};

    fn cap() -> Capacity {
        Capacity {
            max_segments: 16,
            points_per_segment: 9,
            max_agents: 2,
            history: 10,
            future: 15,
        }
    }

    #[test]
    fn nearest_agents_fill_the_slots() {
        let cfg = GeneratorConfig {
            agents: 6,
            ..GeneratorConfig::default()
        };
        let s = generate_synthetic_scenario(4, &cfg).unwrap();
        let picked = select_agents(&s, 1, 2);
        assert_eq!(picked.len(), 3);
        assert_eq!(picked[0].id, 1);
        let o = s.agent(1).unwrap().states[9].position();
        let dist = |a: &AgentTrack| {
            let p = a.states[9].position();
            (p[0] - o[0]).hypot(p[1] - o[1])
        };
        let cutoff = dist(picked[2]);
        for a in s.agents.iter().filter(|a| !picked.iter().any(|p| p.id == a.id)) {
            assert!(dist(a) >= cutoff);
        }
    }

    #[test]
    fn future_and_padding_are_zero() {
        let s = generate_synthetic_scenario(2, &GeneratorConfig::default()).unwrap();
        let x = prepare_inputs(&s, 1, &cap(), true).unwrap();
        let steps = 25;
        for slot in 0..3 {
            for t in 10..steps {
                let at = (slot * steps + t) * AGENT_DIM;
                assert!(x.agents.data()[at..at + AGENT_DIM].iter().all(|&v| v == 0.0));
            }
        }
        assert!(x.agent_mask[0]);
        let n = s.map.len();
        assert!(x.segment_mask[..n].iter().all(|&m| m));
        assert!(x.segment_mask[n..].iter().all(|&m| !m));
        let labels = x.labels.unwrap();
        assert_eq!(labels.future.shape(), &[15, 5]);
        assert!(labels.relative.data()[n * 15 * 3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_horizon_is_a_shape_error() {
        let s = generate_synthetic_scenario(2, &GeneratorConfig::default()).unwrap();
        let c = Capacity { history: 12, ..cap() };
        assert!(matches!(prepare_inputs(&s, 1, &c, false), Err(Error::Shape(_))));
    }
}

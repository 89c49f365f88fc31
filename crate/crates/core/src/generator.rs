//! Synthetic lane scenarios: parallel lanes (straight, arc, or straight with a
//! diverging branch), agents driving along them with smooth speed profiles and
//! bounded lateral wander, and a random world placement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::seeded_rng;
use crate::scene::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaneGeometry {
    Straight,
    Arc,
    Fork,
    /// Pick one of the above per scenario.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub lanes: usize,
    pub geometry: LaneGeometry,
    pub agents: usize,
    pub history: usize,
    pub future: usize,
    pub dt: f64,
    /// Bound on an agent's lateral deviation from its lane centerline (m).
    pub noise_scale: f64,
    pub lane_width: f64,
    pub point_spacing: f64,
    pub points_per_segment: usize,
    pub max_segments: usize,
    /// Lane extent behind and ahead of the target's last observed position (m).
    pub extent_back: f64,
    pub extent_ahead: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub max_accel: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            lanes: 2,
            geometry: LaneGeometry::Mixed,
            agents: 4,
            history: 10,
            future: 15,
            dt: 0.1,
            noise_scale: 0.5,
            lane_width: 3.5,
            point_spacing: 2.0,
            points_per_segment: 9,
            max_segments: 16,
            extent_back: 24.0,
            extent_ahead: 40.0,
            min_speed: 4.0,
            max_speed: 10.0,
            max_accel: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.lanes == 0 || self.agents == 0 || self.history == 0 || self.future == 0 {
            return bad("lanes, agents, history and future must be positive");
        }
        if self.points_per_segment < 2 {
            return bad("segments need at least two points");
        }
        if !(self.dt > 0.0 && self.point_spacing > 0.0 && self.lane_width > 0.0) {
            return bad("dt, point spacing and lane width must be positive");
        }
        if !(self.noise_scale >= 0.0) || !(self.min_speed > 0.0) || self.max_speed < self.min_speed {
            return bad("invalid noise or speed range");
        }
        if !(self.max_accel >= 0.0) {
            return bad("max_accel must be non-negative");
        }
        if !(self.extent_back > 0.0 && self.extent_ahead > 0.0) {
            return bad("lane extents must be positive");
        }
        Ok(())
    }

    fn segment_span(&self) -> f64 {
        (self.points_per_segment - 1) as f64 * self.point_spacing
    }
}

/// A constant-curvature path parameterized by arclength, with its pose at
/// `s = 0` given explicitly.
#[derive(Clone, Copy, Debug)]
struct Arc {
    origin: [f64; 2],
    heading: f64,
    curvature: f64,
}

impl Arc {
    fn pose(&self, s: f64) -> ([f64; 2], f64) {
        let h = self.heading + self.curvature * s;
        let (dx, dy) = if self.curvature.abs() < 1e-12 {
            (s * self.heading.cos(), s * self.heading.sin())
        } else {
            let k = self.curvature;
            ((h.sin() - self.heading.sin()) / k, (self.heading.cos() - h.cos()) / k)
        };
        ([self.origin[0] + dx, self.origin[1] + dy], h)
    }
}

/// A drivable route: a lane, optionally switching to a branch past `fork_at`.
#[derive(Clone, Copy, Debug)]
struct Route {
    lane: Arc,
    branch: Option<(f64, Arc)>,
}

impl Route {
    fn pose(&self, s: f64) -> ([f64; 2], f64) {
        match self.branch {
            Some((at, b)) if s > at => b.pose(s - at),
            _ => self.lane.pose(s),
        }
    }

    fn point(&self, s: f64, lateral: f64) -> [f64; 2] {
        let (p, h) = self.pose(s);
        [p[0] - lateral * h.sin(), p[1] + lateral * h.cos()]
    }
}

struct LanePlan {
    arc: Arc,
    lane_type: LaneType,
    has_left: bool,
    has_right: bool,
}

/// Generates one scenario as a pure function of `seed` and `config`.
pub fn generate_synthetic_scenario(seed: u64, config: &GeneratorConfig) -> Result<Scenario> {
    config.validate()?;
    let mut rng = seeded_rng(seed);
    let geometry = match config.geometry {
        LaneGeometry::Mixed => match rng.random_range(0..3) {
            0 => LaneGeometry::Straight,
            1 => LaneGeometry::Arc,
            _ => LaneGeometry::Fork,
        },
        g => g,
    };

    let span = config.segment_span();
    let per_lane = ((config.extent_back + config.extent_ahead) / span).ceil() as usize;
    let s_min = -config.extent_back;
    let s_max = s_min + per_lane as f64 * span;
    // Fork at the first segment boundary ahead of the anchor.
    let fork_k = (0..=per_lane).find(|&k| s_min + k as f64 * span > 0.0).unwrap_or(per_lane);
    let fork_at = s_min + fork_k as f64 * span;
    let branch_segments = if geometry == LaneGeometry::Fork { per_lane - fork_k } else { 0 };
    let total = per_lane * config.lanes + branch_segments;
    if total > config.max_segments {
        return Err(Error::Capacity(format!(
            "scenario needs {total} map segments but capacity is {}",
            config.max_segments
        )));
    }

    let curvature = if geometry == LaneGeometry::Arc {
        let k = rng.random_range(0.005..0.02);
        if rng.random_bool(0.5) { k } else { -k }
    } else {
        0.0
    };
    let lanes: Vec<LanePlan> = (0..config.lanes)
        .map(|i| {
            let offset = (i as f64 - (config.lanes as f64 - 1.0) / 2.0) * config.lane_width;
            // Concentric lanes share the reference circle's center.
            let k = if curvature == 0.0 { 0.0 } else { curvature / (1.0 - curvature * offset) };
            let lane_type = if config.lanes == 1 {
                LaneType::Other
            } else if i == 0 {
                LaneType::Rightmost
            } else if i + 1 == config.lanes {
                LaneType::Leftmost
            } else {
                LaneType::Middle
            };
            LanePlan {
                arc: Arc {
                    origin: [0.0, offset],
                    heading: 0.0,
                    curvature: k,
                },
                lane_type,
                has_left: i + 1 < config.lanes,
                has_right: i > 0,
            }
        })
        .collect();
    let branch = (geometry == LaneGeometry::Fork).then(|| {
        let (p, h) = lanes[0].arc.pose(fork_at);
        Arc {
            origin: p,
            heading: h,
            curvature: -rng.random_range(0.03..0.05),
        }
    });

    let mut map = Vec::with_capacity(total);
    let mut lane_first_ids = Vec::new();
    for (li, lane) in lanes.iter().enumerate() {
        let first = map.len() as u64 + 1;
        lane_first_ids.push(first);
        for k in 0..per_lane {
            let id = first + k as u64;
            let mut connectivity = Vec::new();
            if k + 1 < per_lane {
                connectivity.push(id + 1);
            }
            let at_fork = li == 0 && branch.is_some() && k + 1 == fork_k;
            map.push(discretize(
                config,
                id,
                lane.lane_type,
                |s| lane.arc.pose(s),
                s_min + k as f64 * span,
                [lane.has_left, lane.has_right, k > 0, k + 1 < per_lane || at_fork],
                at_fork,
                connectivity,
            ));
        }
    }
    if let Some(b) = branch {
        let first = map.len() as u64 + 1;
        let parent = lane_first_ids[0] + fork_k as u64 - 1;
        if let Some(seg) = map.iter_mut().find(|s| s.id == parent) {
            seg.connectivity.push(first);
        }
        for k in 0..branch_segments {
            let id = first + k as u64;
            let connectivity = if k + 1 < branch_segments { vec![id + 1] } else { vec![] };
            map.push(discretize(
                config,
                id,
                LaneType::Other,
                |s| b.pose(s),
                k as f64 * span,
                [false, false, true, k + 1 < branch_segments],
                k == 0,
                connectivity,
            ));
        }
    }

    let horizon = config.history + config.future;
    let anchor = config.history - 1;
    let mut agents = Vec::with_capacity(config.agents);
    for a in 0..config.agents {
        let lane_index = rng.random_range(0..config.lanes);
        let takes_branch = branch.is_some() && lane_index == 0 && rng.random_bool(0.5);
        let route = Route {
            lane: lanes[lane_index].arc,
            branch: branch.filter(|_| takes_branch).map(|b| (fork_at, b)),
        };
        let v0 = rng.random_range(config.min_speed..=config.max_speed);
        let accel = if config.max_accel > 0.0 {
            rng.random_range(-config.max_accel..=config.max_accel)
        } else {
            0.0
        };
        let tau = |t: usize| (t as f64 - anchor as f64) * config.dt;
        let travel = |t: usize| {
            let tt = tau(t);
            v0 * tt + 0.5 * accel * tt * tt
        };
        let back = -travel(0);
        let ahead = travel(horizon - 1);
        let s0 = if a == 0 {
            0.0
        } else {
            let lo = s_min + back;
            let hi = s_max - ahead;
            if lo < hi { rng.random_range(lo..hi) } else { 0.0 }
        };
        let bias_bound = config.noise_scale / 2.0;
        let bias = if bias_bound > 0.0 { rng.random_range(-bias_bound..=bias_bound) } else { 0.0 };
        let amplitude = rng.random_range(0.0..=1.0) * config.noise_scale / 2.0;
        let omega = rng.random_range(0.5..2.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let mut states: Vec<MotionState> = (0..horizon)
            .map(|t| {
                let lateral = bias + amplitude * (omega * tau(t) + phase).sin();
                let p = route.point(s0 + travel(t), lateral);
                MotionState::new(p[0], p[1], 0.0, 0.0)
            })
            .collect();
        recompute_kinematics(&mut states, config.dt);
        agents.push(AgentTrack {
            id: a as u64 + 1,
            states,
            is_target: a == 0,
        });
    }

    let scene = Scenario {
        meta: ScenarioMeta {
            id: format!("synthetic-{seed}"),
            history: config.history,
            future: config.future,
            dt: config.dt,
        },
        agents,
        map,
        frame: Frame::World,
    };
    let placement = RigidTransform::from_angle(
        rng.random_range(0.0..std::f64::consts::TAU),
        [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)],
    );
    Ok(scene.transformed(&placement))
}

#[allow(clippy::too_many_arguments)]
fn discretize(
    config: &GeneratorConfig,
    id: u64,
    lane_type: LaneType,
    pose: impl Fn(f64) -> ([f64; 2], f64),
    start: f64,
    neighbors: [bool; 4],
    intersection: bool,
    connectivity: Vec<u64>,
) -> MapSegment {
    let n = config.points_per_segment;
    let at = |j: isize| pose(start + j as f64 * config.point_spacing).0;
    let points = (0..n as isize)
        .map(|j| {
            let p = at(j);
            let prev = at(j - 1);
            let next = at(j + 1);
            let mut a = [0.0; MAP_POINT_DIM];
            a[ATTR_POS..ATTR_POS + 2].copy_from_slice(&p);
            // Segment ends still point along the lane; on a lane's first or
            // last segment the extrapolated neighbor stands in.
            a[ATTR_PRED] = prev[0] - p[0];
            a[ATTR_PRED + 1] = prev[1] - p[1];
            a[ATTR_SUCC] = next[0] - p[0];
            a[ATTR_SUCC + 1] = next[1] - p[1];
            a[ATTR_LANE_TYPE + lane_type.one_hot_index()] = 1.0;
            for (k, &flag) in neighbors.iter().enumerate() {
                a[ATTR_NEIGHBORS + k] = if flag { 1.0 } else { 0.0 };
            }
            a[ATTR_INTERSECTION] = if intersection { 1.0 } else { 0.0 };
            MapPoint { attributes: a }
        })
        .collect();
    MapSegment {
        id,
        lane_type,
        points,
        point_count: n,
        connectivity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = GeneratorConfig::default();
        let a = serialize_scenario(&generate_synthetic_scenario(11, &cfg).unwrap());
        let b = serialize_scenario(&generate_synthetic_scenario(11, &cfg).unwrap());
        assert_eq!(a, b);
        let c = serialize_scenario(&generate_synthetic_scenario(12, &cfg).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn too_many_segments_is_a_capacity_error() {
        let cfg = GeneratorConfig {
            lanes: 6,
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate_synthetic_scenario(0, &cfg), Err(Error::Capacity(_))));
    }

    #[test]
    fn successor_references_exist() {
        for geometry in [LaneGeometry::Straight, LaneGeometry::Arc, LaneGeometry::Fork] {
            let cfg = GeneratorConfig {
                geometry,
                lanes: 3,
                ..GeneratorConfig::default()
            };
            let s = generate_synthetic_scenario(5, &cfg).unwrap();
            for seg in &s.map {
                for id in &seg.connectivity {
                    assert!(s.map.iter().any(|o| o.id == *id), "dangling successor {id}");
                }
            }
        }
    }

    #[test]
    fn round_trips_through_json() {
        let s = generate_synthetic_scenario(3, &GeneratorConfig::default()).unwrap();
        assert_eq!(parse_scenario(&serialize_scenario(&s)).unwrap(), s);
    }

    #[test]
    fn target_anchor_is_near_a_lane_start() {
        let s = generate_synthetic_scenario(9, &GeneratorConfig::default()).unwrap();
        let t = s.target().unwrap();
        assert_eq!(t.states.len(), 25);
        assert!(t.states.iter().all(|st| st.valid && st.speed > 0.0));
        for st in &t.states {
            let n = st.cos_heading.hypot(st.sin_heading);
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}

//! Scenarios, agents, vectorized maps, agent-centric normalization and the
//! scenario file format.
//!
//! A scenario holds `T = h + f` timestamped states per agent. The predicted
//! (target) agent's last observed state sits at index `h - 1`; everything the
//! model sees is expressed relative to that pose.

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Attributes carried by every map point.
///
/// Layout: position (2), vector to predecessor point (2), vector to
/// successor point (2), one-hot lane type (4), neighbor flags
/// {left, right, predecessor, successor} (4), intersection flag (1).
pub const MAP_POINT_DIM: usize = 15;
pub const ATTR_POS: usize = 0;
pub const ATTR_PRED: usize = 2;
pub const ATTR_SUCC: usize = 4;
pub const ATTR_LANE_TYPE: usize = 6;
pub const ATTR_NEIGHBORS: usize = 10;
pub const ATTR_INTERSECTION: usize = 14;

/// Values per state row in scenario files: x, y, cos, sin, speed, valid.
pub const STATE_FIELDS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionState {
    pub x: f64,
    pub y: f64,
    pub cos_heading: f64,
    pub sin_heading: f64,
    pub speed: f64,
    pub valid: bool,
}

impl MotionState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            cos_heading: heading.cos(),
            sin_heading: heading.sin(),
            speed,
            valid: true,
        }
    }

    pub fn invalid() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            cos_heading: 1.0,
            sin_heading: 0.0,
            speed: 0.0,
            valid: false,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentTrack {
    pub id: u64,
    pub states: Vec<MotionState>,
    pub is_target: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapPoint {
    pub attributes: [f64; MAP_POINT_DIM],
}

impl MapPoint {
    pub fn x(&self) -> f64 {
        self.attributes[ATTR_POS]
    }

    pub fn y(&self) -> f64 {
        self.attributes[ATTR_POS + 1]
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x(), self.y()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LaneType {
    Leftmost,
    Middle,
    Rightmost,
    Other,
}

impl LaneType {
    pub fn as_str(self) -> &'static str {
        match self {
            LaneType::Leftmost => "leftmost",
            LaneType::Middle => "middle",
            LaneType::Rightmost => "rightmost",
            LaneType::Other => "other",
        }
    }

    pub fn one_hot_index(self) -> usize {
        match self {
            LaneType::Leftmost => 0,
            LaneType::Middle => 1,
            LaneType::Rightmost => 2,
            LaneType::Other => 3,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "leftmost" => LaneType::Leftmost,
            "middle" => LaneType::Middle,
            "rightmost" => LaneType::Rightmost,
            "other" => LaneType::Other,
            _ => return None,
        })
    }
}

/// A stretch of lane centerline discretized into points. Only the first
/// `point_count` entries of `points` are meaningful; any further entries are
/// padding and must never be read.
#[derive(Clone, Debug, PartialEq)]
pub struct MapSegment {
    pub id: u64,
    pub lane_type: LaneType,
    pub points: Vec<MapPoint>,
    pub point_count: usize,
    /// Successor segment ids (directed lane graph).
    pub connectivity: Vec<u64>,
}

impl MapSegment {
    pub fn valid_points(&self) -> &[MapPoint] {
        &self.points[..self.point_count.min(self.points.len())]
    }
}

/// Rigid transform with `world = R(θ)·local + origin`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub origin: [f64; 2],
    pub cos: f64,
    pub sin: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            origin: [0.0, 0.0],
            cos: 1.0,
            sin: 0.0,
        }
    }

    pub fn from_angle(angle: f64, origin: [f64; 2]) -> Self {
        Self {
            origin,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    pub fn rotate(&self, v: [f64; 2]) -> [f64; 2] {
        [self.cos * v[0] - self.sin * v[1], self.sin * v[0] + self.cos * v[1]]
    }

    pub fn unrotate(&self, v: [f64; 2]) -> [f64; 2] {
        [self.cos * v[0] + self.sin * v[1], -self.sin * v[0] + self.cos * v[1]]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let r = self.rotate(p);
        [r[0] + self.origin[0], r[1] + self.origin[1]]
    }

    pub fn apply_inverse(&self, p: [f64; 2]) -> [f64; 2] {
        self.unrotate([p[0] - self.origin[0], p[1] - self.origin[1]])
    }

    pub fn inverse(&self) -> Self {
        let o = self.unrotate(self.origin);
        Self {
            origin: [-o[0], -o[1]],
            cos: self.cos,
            sin: -self.sin,
        }
    }

    fn map_state(&self, s: &MotionState, forward: bool) -> MotionState {
        let (p, h) = if forward {
            (self.apply(s.position()), self.rotate([s.cos_heading, s.sin_heading]))
        } else {
            (self.apply_inverse(s.position()), self.unrotate([s.cos_heading, s.sin_heading]))
        };
        MotionState {
            x: p[0],
            y: p[1],
            cos_heading: h[0],
            sin_heading: h[1],
            ..*s
        }
    }

    fn map_point(&self, p: &MapPoint, forward: bool) -> MapPoint {
        let mut a = p.attributes;
        let (pos, rot): (fn(&Self, [f64; 2]) -> [f64; 2], fn(&Self, [f64; 2]) -> [f64; 2]) = if forward {
            (Self::apply, Self::rotate)
        } else {
            (Self::apply_inverse, Self::unrotate)
        };
        let q = pos(self, [a[ATTR_POS], a[ATTR_POS + 1]]);
        a[ATTR_POS..ATTR_POS + 2].copy_from_slice(&q);
        for off in [ATTR_PRED, ATTR_SUCC] {
            let v = rot(self, [a[off], a[off + 1]]);
            a[off..off + 2].copy_from_slice(&v);
        }
        MapPoint { attributes: a }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Frame {
    World,
    /// Local coordinates; the transform maps them back to the world.
    AgentCentric(RigidTransform),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioMeta {
    pub id: String,
    pub history: usize,
    pub future: usize,
    pub dt: f64,
}

impl ScenarioMeta {
    pub fn horizon(&self) -> usize {
        self.history + self.future
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub meta: ScenarioMeta,
    pub agents: Vec<AgentTrack>,
    pub map: Vec<MapSegment>,
    pub frame: Frame,
}

impl Scenario {
    pub fn agent(&self, id: u64) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn target(&self) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.is_target)
    }

    /// Applies `transform` to every agent state and map point.
    pub fn transformed(&self, transform: &RigidTransform) -> Scenario {
        self.map_all(transform, true)
    }

    fn map_all(&self, transform: &RigidTransform, forward: bool) -> Scenario {
        let agents = self
            .agents
            .iter()
            .map(|a| AgentTrack {
                states: a.states.iter().map(|s| transform.map_state(s, forward)).collect(),
                ..a.clone()
            })
            .collect();
        let map = self
            .map
            .iter()
            .map(|seg| MapSegment {
                points: seg.points.iter().map(|p| transform.map_point(p, forward)).collect(),
                ..seg.clone()
            })
            .collect();
        Scenario {
            meta: self.meta.clone(),
            agents,
            map,
            frame: self.frame,
        }
    }

    /// Returns the scenario in world coordinates.
    pub fn to_world(&self) -> Scenario {
        match self.frame {
            Frame::World => self.clone(),
            Frame::AgentCentric(tf) => {
                let mut s = self.map_all(&tf, true);
                s.frame = Frame::World;
                s
            }
        }
    }
}

/// Re-expresses `scenario` with the target's state at `h - 1` at the origin,
/// heading along +x. The returned frame records the inverse transform.
pub fn normalize_scenario(scenario: &Scenario, target: u64) -> Result<Scenario> {
    let world = scenario.to_world();
    let anchor_index = world
        .meta
        .history
        .checked_sub(1)
        .ok_or_else(|| Error::DegenerateAnchor("history length is zero".into()))?;
    let agent = world
        .agent(target)
        .ok_or_else(|| Error::DegenerateAnchor(format!("agent {target} is not in the scenario")))?;
    let anchor = agent
        .states
        .get(anchor_index)
        .filter(|s| s.valid && s.x.is_finite() && s.y.is_finite())
        .ok_or_else(|| {
            Error::DegenerateAnchor(format!("agent {target} has no valid state at index {anchor_index}"))
        })?;
    let norm = anchor.cos_heading.hypot(anchor.sin_heading);
    if !(norm > 0.0) {
        return Err(Error::DegenerateAnchor(format!("agent {target} has a zero heading vector")));
    }
    let tf = RigidTransform {
        origin: [anchor.x, anchor.y],
        cos: anchor.cos_heading / norm,
        sin: anchor.sin_heading / norm,
    };
    let mut local = world.map_all(&tf, false);
    for a in &mut local.agents {
        a.is_target = a.id == target;
    }
    local.frame = Frame::AgentCentric(tf);
    Ok(local)
}

/// Recomputes heading and speed of valid states from their positions using
/// backward differences (forward for the first valid state). A state that
/// does not move keeps the previous heading, or +x when there is none.
pub fn recompute_kinematics(states: &mut [MotionState], dt: f64) {
    let valid: Vec<usize> = (0..states.len()).filter(|&i| states[i].valid).collect();
    let mut last_heading: Option<[f64; 2]> = None;
    for (k, &i) in valid.iter().enumerate() {
        let (from, to, steps) = if k > 0 {
            let j = valid[k - 1];
            (j, i, i - j)
        } else if let Some(&n) = valid.get(1) {
            (i, n, n - i)
        } else {
            (i, i, 0)
        };
        let d = [states[to].x - states[from].x, states[to].y - states[from].y];
        let len = d[0].hypot(d[1]);
        let heading = if len > 1e-6 {
            [d[0] / len, d[1] / len]
        } else {
            last_heading.unwrap_or([1.0, 0.0])
        };
        last_heading = Some(heading);
        let s = &mut states[i];
        s.cos_heading = heading[0];
        s.sin_heading = heading[1];
        s.speed = if steps > 0 { len / (steps as f64 * dt) } else { 0.0 };
    }
}

fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

/// Serializes a scenario as JSON text.
pub fn serialize_scenario(s: &Scenario) -> Vec<u8> {
    let agents: Vec<Value> = s
        .agents
        .iter()
        .map(|a| {
            let states: Vec<Value> = a
                .states
                .iter()
                .map(|st| {
                    json!([
                        num(st.x),
                        num(st.y),
                        num(st.cos_heading),
                        num(st.sin_heading),
                        num(st.speed),
                        if st.valid { 1 } else { 0 }
                    ])
                })
                .collect();
            json!({"id": a.id, "is_target": a.is_target, "states": states})
        })
        .collect();
    let map: Vec<Value> = s
        .map
        .iter()
        .map(|seg| {
            let points: Vec<Value> = seg
                .valid_points()
                .iter()
                .map(|p| Value::Array(p.attributes.iter().map(|&v| num(v)).collect()))
                .collect();
            json!({
                "id": seg.id,
                "type": seg.lane_type.as_str(),
                "connectivity": seg.connectivity,
                "points": points,
            })
        })
        .collect();
    let mut root = Map::new();
    root.insert(
        "meta".into(),
        json!({"id": s.meta.id, "h": s.meta.history, "f": s.meta.future, "dt": s.meta.dt}),
    );
    if let Frame::AgentCentric(tf) = s.frame {
        root.insert(
            "frame".into(),
            json!({"kind": "agent_centric", "origin": [tf.origin[0], tf.origin[1]], "heading": [tf.cos, tf.sin]}),
        );
    }
    root.insert("agents".into(), Value::Array(agents));
    root.insert("map".into(), Value::Array(map));
    let mut out = serde_json::to_vec_pretty(&Value::Object(root)).expect("scenario serializes");
    out.push(b'\n');
    out
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::parse(format!("{path}.{key}"), "missing field"))
}

fn as_obj<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| Error::parse(path, "expected an object"))
}

fn as_arr<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| Error::parse(path, "expected an array"))
}

fn as_u64(v: &Value, path: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::parse(path, "expected a non-negative integer"))
}

/// `null` encodes a non-finite value.
fn as_f64(v: &Value, path: &str) -> Result<f64> {
    match v {
        Value::Null => Ok(f64::NAN),
        _ => v.as_f64().ok_or_else(|| Error::parse(path, "expected a number")),
    }
}

fn as_flag(v: &Value, path: &str) -> Result<bool> {
    match v {
        Value::Bool(b) => Ok(*b),
        Value::Number(n) => match n.as_f64() {
            Some(x) if x == 0.0 => Ok(false),
            Some(x) if x == 1.0 => Ok(true),
            _ => Err(Error::parse(path, "validity flag must be 0 or 1")),
        },
        _ => Err(Error::parse(path, "expected a validity flag")),
    }
}

/// Parses scenario JSON. Unknown fields are ignored.
pub fn parse_scenario(bytes: &[u8]) -> Result<Scenario> {
    let root: Value =
        serde_json::from_slice(bytes).map_err(|e| Error::parse("$", e.to_string()))?;
    let root = as_obj(&root, "$")?;
    let meta = as_obj(field(root, "meta", "$")?, "meta")?;
    let history = as_u64(field(meta, "h", "meta")?, "meta.h")? as usize;
    let future = as_u64(field(meta, "f", "meta")?, "meta.f")? as usize;
    let dt = as_f64(field(meta, "dt", "meta")?, "meta.dt")?;
    if history == 0 || !(dt > 0.0) {
        return Err(Error::parse("meta", "h must be positive and dt must be a positive number"));
    }
    let id = match meta.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => String::new(),
    };
    let horizon = history + future;

    let mut agents = Vec::new();
    for (ai, av) in as_arr(field(root, "agents", "$")?, "agents")?.iter().enumerate() {
        let path = format!("agents[{ai}]");
        let a = as_obj(av, &path)?;
        let id = as_u64(field(a, "id", &path)?, &format!("{path}.id"))?;
        let is_target = match a.get("is_target") {
            None => false,
            Some(v) => v
                .as_bool()
                .ok_or_else(|| Error::parse(format!("{path}.is_target"), "expected a boolean"))?,
        };
        let spath = format!("{path}.states");
        let rows = as_arr(field(a, "states", &path)?, &spath)?;
        if rows.len() != horizon {
            return Err(Error::Shape(format!(
                "{spath}: expected {horizon} states (h + f), found {}",
                rows.len()
            )));
        }
        let mut states = Vec::with_capacity(horizon);
        for (ti, row) in rows.iter().enumerate() {
            let rpath = format!("{spath}[{ti}]");
            let vals = as_arr(row, &rpath)?;
            if vals.len() != STATE_FIELDS {
                return Err(Error::Shape(format!(
                    "{rpath}: expected {STATE_FIELDS} values, found {}",
                    vals.len()
                )));
            }
            let f = |k: usize| as_f64(&vals[k], &format!("{rpath}[{k}]"));
            states.push(MotionState {
                x: f(0)?,
                y: f(1)?,
                cos_heading: f(2)?,
                sin_heading: f(3)?,
                speed: f(4)?,
                valid: as_flag(&vals[5], &format!("{rpath}[5]"))?,
            });
        }
        agents.push(AgentTrack {
            id,
            states,
            is_target,
        });
    }

    let mut map = Vec::new();
    for (si, sv) in as_arr(field(root, "map", "$")?, "map")?.iter().enumerate() {
        let path = format!("map[{si}]");
        let s = as_obj(sv, &path)?;
        let id = as_u64(field(s, "id", &path)?, &format!("{path}.id"))?;
        let lane_type = match s.get("type") {
            None => LaneType::Other,
            Some(v) => v
                .as_str()
                .and_then(LaneType::parse)
                .ok_or_else(|| Error::parse(format!("{path}.type"), "unknown lane type"))?,
        };
        let connectivity = match s.get("connectivity") {
            None => Vec::new(),
            Some(v) => as_arr(v, &format!("{path}.connectivity"))?
                .iter()
                .enumerate()
                .map(|(k, c)| as_u64(c, &format!("{path}.connectivity[{k}]")))
                .collect::<Result<_>>()?,
        };
        let ppath = format!("{path}.points");
        let rows = as_arr(field(s, "points", &path)?, &ppath)?;
        if rows.is_empty() {
            return Err(Error::Shape(format!("{ppath}: a segment needs at least one point")));
        }
        let mut points = Vec::with_capacity(rows.len());
        for (pi, row) in rows.iter().enumerate() {
            let rpath = format!("{ppath}[{pi}]");
            let vals = as_arr(row, &rpath)?;
            if vals.len() != MAP_POINT_DIM {
                return Err(Error::Shape(format!(
                    "{rpath}: expected {MAP_POINT_DIM} attributes, found {}",
                    vals.len()
                )));
            }
            let mut attributes = [0.0; MAP_POINT_DIM];
            for (k, v) in vals.iter().enumerate() {
                attributes[k] = as_f64(v, &format!("{rpath}[{k}]"))?;
            }
            points.push(MapPoint { attributes });
        }
        map.push(MapSegment {
            id,
            lane_type,
            point_count: points.len(),
            points,
            connectivity,
        });
    }

    let frame = match root.get("frame") {
        None => Frame::World,
        Some(v) => parse_frame(v)?,
    };
    Ok(Scenario {
        meta: ScenarioMeta {
            id,
            history,
            future,
            dt,
        },
        agents,
        map,
        frame,
    })
}

fn parse_frame(v: &Value) -> Result<Frame> {
    let o = as_obj(v, "frame")?;
    match o.get("kind").and_then(Value::as_str) {
        Some("world") => Ok(Frame::World),
        Some("agent_centric") => {
            let pair = |key: &str| -> Result<[f64; 2]> {
                let p = format!("frame.{key}");
                let a = as_arr(field(o, key, "frame")?, &p)?;
                if a.len() != 2 {
                    return Err(Error::parse(p, "expected two numbers"));
                }
                Ok([as_f64(&a[0], &p)?, as_f64(&a[1], &p)?])
            };
            let origin = pair("origin")?;
            let heading = pair("heading")?;
            Ok(Frame::AgentCentric(RigidTransform {
                origin,
                cos: heading[0],
                sin: heading[1],
            }))
        }
        _ => Err(Error::parse("frame.kind", "expected `world` or `agent_centric`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Scenario {
        let mut attrs = [0.0; MAP_POINT_DIM];
        attrs[0] = 4.0;
        attrs[1] = 3.0;
        attrs[ATTR_SUCC] = 1.0;
        attrs[ATTR_LANE_TYPE + 3] = 1.0;
        let states = (0..4)
            .map(|t| MotionState::new(5.0, t as f64, std::f64::consts::FRAC_PI_2, 10.0))
            .collect();
        Scenario {
            meta: ScenarioMeta {
                id: "tiny".into(),
                history: 2,
                future: 2,
                dt: 0.1,
            },
            agents: vec![AgentTrack {
                id: 7,
                states,
                is_target: true,
            }],
            map: vec![MapSegment {
                id: 1,
                lane_type: LaneType::Other,
                points: vec![MapPoint { attributes: attrs }],
                point_count: 1,
                connectivity: vec![],
            }],
            frame: Frame::World,
        }
    }

    #[test]
    fn anchor_moves_to_origin_facing_x() {
        let mut s = tiny();
        s.agents[0].states[1] = MotionState::new(5.0, 3.0, std::f64::consts::FRAC_PI_2, 4.0);
        let n = normalize_scenario(&s, 7).unwrap();
        let a = n.agents[0].states[1];
        assert!(a.x.abs() < 1e-12 && a.y.abs() < 1e-12);
        assert!((a.cos_heading - 1.0).abs() < 1e-12 && a.sin_heading.abs() < 1e-12);
        assert_eq!(a.speed, 4.0);
    }

    #[test]
    fn missing_or_invalid_anchor_is_degenerate() {
        let s = tiny();
        assert!(matches!(normalize_scenario(&s, 99), Err(Error::DegenerateAnchor(_))));
        let mut s = tiny();
        s.agents[0].states[1].valid = false;
        assert!(matches!(normalize_scenario(&s, 7), Err(Error::DegenerateAnchor(_))));
    }

    #[test]
    fn normalize_round_trip_restores_world() {
        let s = tiny();
        let back = normalize_scenario(&s, 7).unwrap().to_world();
        for (a, b) in s.agents[0].states.iter().zip(&back.agents[0].states) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
        for (a, b) in s.map[0].points[0].attributes.iter().zip(&back.map[0].points[0].attributes) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn transform_inverse_composes_to_identity() {
        let tf = RigidTransform::from_angle(0.7, [3.0, -2.0]);
        let p = [1.5, 4.0];
        let q = tf.inverse().apply(tf.apply(p));
        assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
    }

    #[test]
    fn short_state_list_is_a_shape_error_with_path() {
        let mut s = tiny();
        s.agents[0].states.truncate(3);
        let err = parse_scenario(&serialize_scenario(&s)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("agents[0].states"), "{err}");
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let s = tiny();
        let mut v: Value = serde_json::from_slice(&serialize_scenario(&s)).unwrap();
        v["extra"] = json!({"anything": [1, 2, 3]});
        v["agents"][0]["colour"] = json!("red");
        let parsed = parse_scenario(&serde_json::to_vec(&v).unwrap()).unwrap();
        assert_eq!(parsed, s);
    }

    #[test]
    fn schema_violation_names_path() {
        let s = tiny();
        let mut v: Value = serde_json::from_slice(&serialize_scenario(&s)).unwrap();
        v["map"][0]["points"][0][3] = json!("oops");
        let err = parse_scenario(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert!(err.to_string().contains("map[0].points[0][3]"), "{err}");
    }

    #[test]
    fn kinematics_from_positions() {
        let mut states: Vec<MotionState> =
            (0..3).map(|t| MotionState::new(t as f64, 0.0, 1.0, 0.0)).collect();
        states.push(MotionState::new(2.0, 0.0, 0.0, 0.0));
        recompute_kinematics(&mut states, 0.5);
        assert!((states[0].speed - 2.0).abs() < 1e-12);
        assert!((states[2].cos_heading - 1.0).abs() < 1e-12);
        // stationary: heading carried forward, zero speed
        assert_eq!(states[3].speed, 0.0);
        assert!((states[3].cos_heading - 1.0).abs() < 1e-12);
    }
}

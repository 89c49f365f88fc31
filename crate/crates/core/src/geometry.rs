//! Relative motion between an agent and map segments, and the coupled map
//! that pairs the map topology with those motions over time.

use crate::error::{Error, Result};
use crate::scene::{AgentTrack, MapSegment, MotionState};

/// Channels of a relative motion: distance, cos and sin of its direction.
pub const REL_DIM: usize = 3;

/// Below this distance the direction is undefined and reported as +x.
pub const ZERO_DISTANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeMotion {
    pub dist: f64,
    pub cos_dir: f64,
    pub sin_dir: f64,
}

impl RelativeMotion {
    pub fn from_vector(dx: f64, dy: f64) -> Self {
        let dist = (dx * dx + dy * dy).sqrt();
        if dist < ZERO_DISTANCE {
            Self {
                dist,
                cos_dir: 1.0,
                sin_dir: 0.0,
            }
        } else {
            Self {
                dist,
                cos_dir: dx / dist,
                sin_dir: dy / dist,
            }
        }
    }

    pub fn to_array(self) -> [f64; REL_DIM] {
        [self.dist, self.cos_dir, self.sin_dir]
    }
}

/// Relative motions laid out `[segments × steps × REL_DIM]` with a
/// `[segments × steps]` validity mask. Invalid entries hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeMotions {
    pub segments: usize,
    pub steps: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl RelativeMotions {
    fn empty(segments: usize, steps: usize) -> Self {
        Self {
            segments,
            steps,
            values: vec![0.0; segments * steps * REL_DIM],
            valid: vec![false; segments * steps],
        }
    }

    pub fn get(&self, segment: usize, step: usize) -> Option<RelativeMotion> {
        let i = segment * self.steps + step;
        self.valid[i].then(|| {
            let v = &self.values[i * REL_DIM..(i + 1) * REL_DIM];
            RelativeMotion {
                dist: v[0],
                cos_dir: v[1],
                sin_dir: v[2],
            }
        })
    }

    fn set(&mut self, segment: usize, step: usize, r: RelativeMotion) {
        let i = segment * self.steps + step;
        self.valid[i] = true;
        self.values[i * REL_DIM..(i + 1) * REL_DIM].copy_from_slice(&r.to_array());
    }
}

/// Index of the valid point nearest to `position`; ties go to the lower index.
pub fn closest_point_index(segment: &MapSegment, position: [f64; 2]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in segment.valid_points().iter().enumerate() {
        let d = (p.x() - position[0]).powi(2) + (p.y() - position[1]).powi(2);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::DegenerateSegment(format!("segment {} has no valid points", segment.id)))
}

/// Vector from the closest point of `segment` toward `position`.
pub fn relative_to_segment(segment: &MapSegment, position: [f64; 2]) -> Result<RelativeMotion> {
    let p = segment.valid_points()[closest_point_index(segment, position)?];
    Ok(RelativeMotion::from_vector(position[0] - p.x(), position[1] - p.y()))
}

/// Relative motion of every valid state against every segment. Only the
/// state's position is used.
pub fn relative_motion(states: &[MotionState], map: &[MapSegment]) -> Result<RelativeMotions> {
    if states.is_empty() {
        return Err(Error::EmptyTrack("no states given".into()));
    }
    if !states.iter().any(|s| s.valid) {
        return Err(Error::EmptyTrack("every state is invalid".into()));
    }
    let mut out = RelativeMotions::empty(map.len(), states.len());
    for (i, seg) in map.iter().enumerate() {
        for (t, s) in states.iter().enumerate() {
            if s.valid {
                out.set(i, t, relative_to_segment(seg, s.position())?);
            }
        }
    }
    Ok(out)
}

/// The map plus the target's relative motions over all `T` steps. Steps at or
/// beyond `history` are flagged by `future_mask` and carry no values; rows at
/// or beyond the real segment count are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledMap {
    pub relative: RelativeMotions,
    pub future_mask: Vec<bool>,
    pub segment_count: usize,
}

pub fn build_coupled_map(
    target: &AgentTrack,
    map: &[MapSegment],
    history: usize,
    capacity: usize,
) -> Result<CoupledMap> {
    let steps = target.states.len();
    if history == 0 || history > steps {
        return Err(Error::shape(format!("history {history} does not fit a track of {steps} states")));
    }
    if map.len() > capacity {
        return Err(Error::Capacity(format!(
            "{} map segments exceed the capacity of {capacity}",
            map.len()
        )));
    }
    let past = relative_motion(&target.states[..history], map)?;
    let mut relative = RelativeMotions::empty(capacity, steps);
    for i in 0..map.len() {
        for t in 0..history {
            if let Some(r) = past.get(i, t) {
                relative.set(i, t, r);
            }
        }
    }
    Ok(CoupledMap {
        relative,
        future_mask: (0..steps).map(|t| t >= history).collect(),
        segment_count: map.len(),
    })
}

/// Relative motions of the ground-truth future, used as training labels.
pub fn label_future_relative_motions(future: &[MotionState], map: &[MapSegment]) -> Result<RelativeMotions> {
    if let Some(t) = future.iter().position(|s| !s.valid) {
        return Err(Error::Label(format!("ground-truth future step {t} is invalid")));
    }
    relative_motion(future, map).map_err(|e| match e {
        Error::EmptyTrack(m) => Error::Label(m),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{LaneType, MapPoint, MAP_POINT_DIM};

    pub(crate) fn segment(id: u64, pts: &[[f64; 2]]) -> MapSegment {
        let points: Vec<MapPoint> = pts
            .iter()
            .map(|p| {
                let mut a = [0.0; MAP_POINT_DIM];
                a[0] = p[0];
                a[1] = p[1];
                MapPoint { attributes: a }
            })
            .collect();
        MapSegment {
            id,
            lane_type: LaneType::Other,
            point_count: points.len(),
            points,
            connectivity: vec![],
        }
    }

    #[test]
    fn closest_point_examples() {
        let s = segment(0, &[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        assert_eq!(closest_point_index(&s, [0.0, 0.0]).unwrap(), 0);
        assert_eq!(closest_point_index(&s, [1.1, 0.5]).unwrap(), 1);
        let s = segment(0, &[[0.0, 0.0], [1.0, 0.0]]);
        assert_eq!(closest_point_index(&s, [0.5, 1.0]).unwrap(), 0);
    }

    #[test]
    fn padding_points_are_ignored() {
        let mut s = segment(0, &[[0.0, 0.0], [5.0, 0.0]]);
        s.point_count = 1;
        assert_eq!(closest_point_index(&s, [5.0, 0.0]).unwrap(), 0);
        s.point_count = 0;
        assert!(matches!(closest_point_index(&s, [0.0, 0.0]), Err(Error::DegenerateSegment(_))));
    }

    #[test]
    fn relative_motion_examples() {
        let seg = segment(0, &[[0.0, 0.0]]);
        let r = relative_to_segment(&seg, [3.0, 4.0]).unwrap();
        assert!((r.dist - 5.0).abs() < 1e-12);
        assert!((r.cos_dir - 0.6).abs() < 1e-12 && (r.sin_dir - 0.8).abs() < 1e-12);
        let on = relative_to_segment(&seg, [0.0, 0.0]).unwrap();
        assert_eq!(on.to_array(), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn invalid_states_are_masked_and_all_invalid_is_empty() {
        let seg = segment(0, &[[0.0, 0.0]]);
        let mut states = vec![MotionState::new(1.0, 0.0, 0.0, 1.0); 3];
        states[1].valid = false;
        let r = relative_motion(&states, &[seg.clone()]).unwrap();
        assert!(r.get(0, 1).is_none());
        assert_eq!(&r.values[3..6], &[0.0; 3]);
        for s in &mut states {
            s.valid = false;
        }
        assert!(matches!(relative_motion(&states, &[seg]), Err(Error::EmptyTrack(_))));
    }

    #[test]
    fn coupled_map_masks_future_and_padding() {
        let seg = segment(0, &[[0.0, 0.0], [1.0, 0.0]]);
        let track = AgentTrack {
            id: 1,
            states: (0..5).map(|t| MotionState::new(t as f64, 1.0, 0.0, 1.0)).collect(),
            is_target: true,
        };
        let cm = build_coupled_map(&track, &[seg.clone()], 3, 2).unwrap();
        assert_eq!(cm.relative.values.len(), 2 * 5 * REL_DIM);
        assert_eq!(cm.future_mask, vec![false, false, false, true, true]);
        assert!((0..5).all(|t| cm.relative.get(1, t).is_none()));
        assert!((3..5).all(|t| cm.relative.get(0, t).is_none()));
        let hist = relative_motion(&track.states[..3], &[seg.clone()]).unwrap();
        for t in 0..3 {
            assert_eq!(cm.relative.get(0, t), hist.get(0, t));
        }
        assert!(matches!(
            build_coupled_map(&track, &[seg.clone(), seg], 3, 1),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn invalid_label_frame_is_rejected() {
        let seg = segment(0, &[[0.0, 0.0]]);
        let mut fut = vec![MotionState::new(1.0, 0.0, 0.0, 1.0); 2];
        fut[1].valid = false;
        assert!(matches!(label_future_relative_motions(&fut, &[seg]), Err(Error::Label(_))));
    }
}

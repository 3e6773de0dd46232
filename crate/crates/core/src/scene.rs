//! Driving world state, ego-centric polar observation geometry, and the
//! discrete 10-action space shared by every other module.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_to_pi, Polygon, Vec2};

pub const N_ACTIONS: usize = 10;

/// Identifier of a lane in a [`LaneGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LaneId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrafficLight {
    Green,
    Yellow,
    Red,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Navigation {
    Straight,
    TurnLeft,
    TurnRight,
    LaneChangeLeft,
    LaneChangeRight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub lane_id: LaneId,
}

impl EgoState {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    Vehicle,
    Vru,
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: u32,
    pub kind: AgentKind,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub lane_id: Option<LaneId>,
}

impl AgentState {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticObject {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    /// Approximate footprint radius used for rendering and blocking checks.
    pub radius: f64,
    pub description: String,
}

/// Agent pose expressed in the ego frame: range, bearing from the ego heading
/// axis (counter-clockwise positive, wrapped to `[-pi, pi)`), and relative motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarObservation {
    pub range: f64,
    pub bearing: f64,
    pub relative_speed: f64,
    pub relative_heading: f64,
}

/// One lane: centerline polyline, width, per-lane speed limit, and neighbor links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    pub centerline: Vec<Vec2>,
    pub width: f64,
    pub speed_limit: f64,
    pub left_neighbor: Option<LaneId>,
    pub right_neighbor: Option<LaneId>,
}

impl Lane {
    pub fn length(&self) -> f64 {
        self.centerline.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    /// Project a point onto the centerline: returns (arc-length station,
    /// signed lateral offset, tangent heading at the projection).
    /// Lateral offset is positive to the left of travel direction.
    pub fn project(&self, p: Vec2) -> (f64, f64, f64) {
        let mut best = (0.0, f64::INFINITY, 0.0);
        let mut best_abs = f64::INFINITY;
        let mut station_base = 0.0;
        for w in self.centerline.windows(2) {
            let a = w[0];
            let b = w[1];
            let ab = b - a;
            let len = ab.norm();
            if len < 1e-12 {
                continue;
            }
            let t = ((p - a).dot(ab) / (len * len)).clamp(0.0, 1.0);
            let proj = a + ab.scale(t);
            let tangent = ab.scale(1.0 / len);
            let offset = (p - proj).dot(tangent.perp());
            let d = p.dist(proj);
            if d < best_abs {
                best_abs = d;
                best = (station_base + t * len, offset, tangent.y.atan2(tangent.x));
            }
            station_base += len;
        }
        best
    }

    /// Centerline point and tangent heading at an arc-length station (clamped).
    pub fn point_at(&self, station: f64) -> (Vec2, f64) {
        let mut remaining = station.max(0.0);
        for w in self.centerline.windows(2) {
            let a = w[0];
            let b = w[1];
            let len = a.dist(b);
            if len < 1e-12 {
                continue;
            }
            if remaining <= len {
                let t = remaining / len;
                let dir = b - a;
                return (a + dir.scale(t), dir.y.atan2(dir.x));
            }
            remaining -= len;
        }
        let n = self.centerline.len();
        let dir = self.centerline[n - 1] - self.centerline[n - 2];
        (self.centerline[n - 1], dir.y.atan2(dir.x))
    }
}

/// Polyline-with-neighbors lane model plus the goal region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneGraph {
    pub lanes: Vec<Lane>,
    pub goal_region: Polygon,
}

impl LaneGraph {
    pub fn lane(&self, id: LaneId) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.id == id)
    }

    /// Lane whose centerline is closest to the point, if the point lies within
    /// that lane's corridor (half width plus a small margin).
    pub fn locate(&self, p: Vec2) -> Option<LaneId> {
        let mut best: Option<(LaneId, f64)> = None;
        for lane in &self.lanes {
            let (_, offset, _) = lane.project(p);
            let d = offset.abs();
            if d <= lane.width / 2.0 + 0.3 {
                match best {
                    Some((_, bd)) if bd <= d => {}
                    _ => best = Some((lane.id, d)),
                }
            }
        }
        best.map(|(id, _)| id)
    }

    /// True if the point lies inside any lane corridor.
    pub fn in_drivable(&self, p: Vec2) -> bool {
        self.locate(p).is_some()
    }

    /// Check left/right neighbor links are symmetric.
    pub fn neighbors_symmetric(&self) -> bool {
        for lane in &self.lanes {
            if let Some(r) = lane.right_neighbor {
                match self.lane(r) {
                    Some(n) if n.left_neighbor == Some(lane.id) => {}
                    _ => return false,
                }
            }
            if let Some(l) = lane.left_neighbor {
                match self.lane(l) {
                    Some(n) if n.right_neighbor == Some(lane.id) => {}
                    _ => return false,
                }
            }
        }
        true
    }
}

/// Structured snapshot of the driving world handed to prompting and planning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingContext {
    pub timestamp: f64,
    pub ego: EgoState,
    pub agents: Vec<AgentState>,
    pub lanes: LaneGraph,
    pub traffic_light: TrafficLight,
    pub navigation: Navigation,
    pub static_objects: Vec<StaticObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Longitudinal {
    Accelerate,
    Decelerate,
    Cruise,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lateral {
    LaneKeep,
    LaneChangeLeft,
    LaneChangeRight,
}

/// One of the 10 discrete driving actions: the longitudinal x lateral product
/// minus the meaningless Stop-and-change-lane combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub longitudinal: Longitudinal,
    pub lateral: Lateral,
}

const ACTION_TABLE: [(Longitudinal, Lateral, &str); N_ACTIONS] = [
    (Longitudinal::Accelerate, Lateral::LaneKeep, "AC-LK"),
    (Longitudinal::Accelerate, Lateral::LaneChangeLeft, "AC-LL"),
    (Longitudinal::Accelerate, Lateral::LaneChangeRight, "AC-LR"),
    (Longitudinal::Decelerate, Lateral::LaneKeep, "DC-LK"),
    (Longitudinal::Decelerate, Lateral::LaneChangeLeft, "DC-LL"),
    (Longitudinal::Decelerate, Lateral::LaneChangeRight, "DC-LR"),
    (Longitudinal::Cruise, Lateral::LaneKeep, "CK-LK"),
    (Longitudinal::Cruise, Lateral::LaneChangeLeft, "CK-LL"),
    (Longitudinal::Cruise, Lateral::LaneChangeRight, "CK-LR"),
    (Longitudinal::Stop, Lateral::LaneKeep, "ST-LK"),
];

impl Action {
    pub fn new(longitudinal: Longitudinal, lateral: Lateral) -> Option<Action> {
        let a = Action { longitudinal, lateral };
        if a.is_valid() {
            Some(a)
        } else {
            None
        }
    }

    fn is_valid(&self) -> bool {
        !(self.longitudinal == Longitudinal::Stop && self.lateral != Lateral::LaneKeep)
    }

    /// Stable canonical index in 0..10.
    pub fn index(&self) -> usize {
        ACTION_TABLE
            .iter()
            .position(|(lo, la, _)| *lo == self.longitudinal && *la == self.lateral)
            .expect("valid action")
    }

    /// Stable two-letter code, e.g. "AC-LK".
    pub fn code(&self) -> &'static str {
        ACTION_TABLE[self.index()].2
    }

    pub fn from_index(i: usize) -> Option<Action> {
        ACTION_TABLE
            .get(i)
            .map(|(lo, la, _)| Action { longitudinal: *lo, lateral: *la })
    }

    pub fn from_code(code: &str) -> Option<Action> {
        ACTION_TABLE
            .iter()
            .find(|(_, _, c)| c.eq_ignore_ascii_case(code))
            .map(|(lo, la, _)| Action { longitudinal: *lo, lateral: *la })
    }

    /// Spelled-out form used in prompts, e.g. "accelerate and keep lane".
    pub fn spelled(&self) -> String {
        let lo = match self.longitudinal {
            Longitudinal::Accelerate => "accelerate",
            Longitudinal::Decelerate => "decelerate",
            Longitudinal::Cruise => "cruise",
            Longitudinal::Stop => "stop",
        };
        let la = match self.lateral {
            Lateral::LaneKeep => "keep lane",
            Lateral::LaneChangeLeft => "change lane left",
            Lateral::LaneChangeRight => "change lane right",
        };
        format!("{lo} and {la}")
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

/// The 10 valid actions in canonical index order. Stop pairs only with LaneKeep.
pub fn enumerate_actions() -> [Action; N_ACTIONS] {
    let mut out = [Action { longitudinal: Longitudinal::Cruise, lateral: Lateral::LaneKeep }; N_ACTIONS];
    for (i, (lo, la, _)) in ACTION_TABLE.iter().enumerate() {
        out[i] = Action { longitudinal: *lo, lateral: *la };
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DistributionError {
    #[error("cannot normalize an all-zero vector")]
    AllZero,
    #[error("distribution entries must be nonnegative")]
    NegativeEntry,
    #[error("probabilities do not sum to one")]
    NotNormalized,
}

/// Normalized probability vector over the 10-action space, indexed by
/// canonical [`Action`] index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionDistribution {
    probs: [f64; N_ACTIONS],
}

impl DecisionDistribution {
    /// Normalize a nonnegative vector into a distribution.
    pub fn normalize(raw: &[f64; N_ACTIONS]) -> Result<DecisionDistribution, DistributionError> {
        if raw.iter().any(|&v| v < 0.0) {
            return Err(DistributionError::NegativeEntry);
        }
        let z: f64 = raw.iter().sum();
        if z <= 0.0 {
            return Err(DistributionError::AllZero);
        }
        let mut probs = [0.0; N_ACTIONS];
        for (p, &r) in probs.iter_mut().zip(raw.iter()) {
            *p = r / z;
        }
        Ok(DecisionDistribution { probs })
    }

    /// Accept an already-normalized vector verbatim (no renormalization, so
    /// stored distributions round-trip bit-exactly).
    pub fn from_probs(probs: [f64; N_ACTIONS]) -> Result<DecisionDistribution, DistributionError> {
        if probs.iter().any(|&v| v < 0.0) {
            return Err(DistributionError::NegativeEntry);
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(DistributionError::NotNormalized);
        }
        Ok(DecisionDistribution { probs })
    }

    pub fn uniform() -> DecisionDistribution {
        DecisionDistribution { probs: [1.0 / N_ACTIONS as f64; N_ACTIONS] }
    }

    pub fn one_hot(action: Action) -> DecisionDistribution {
        let mut probs = [0.0; N_ACTIONS];
        probs[action.index()] = 1.0;
        DecisionDistribution { probs }
    }

    pub fn probs(&self) -> &[f64; N_ACTIONS] {
        &self.probs
    }

    pub fn prob(&self, action: Action) -> f64 {
        self.probs[action.index()]
    }

    /// Highest-probability action; ties broken by lower canonical index.
    pub fn argmax(&self) -> Action {
        let mut best = 0;
        for i in 1..N_ACTIONS {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        Action::from_index(best).unwrap()
    }

    /// Entries ≥ 0 and sum within 1e-9 of one.
    pub fn is_valid(&self) -> bool {
        self.probs.iter().all(|&p| p >= 0.0) && (self.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9
    }
}

/// Express an agent's pose in the ego-centric polar frame.
pub fn to_polar(ego: &EgoState, agent: &AgentState) -> PolarObservation {
    let dx = agent.x - ego.x;
    let dy = agent.y - ego.y;
    let range = (dx * dx + dy * dy).sqrt();
    let bearing = if range < 1e-12 { 0.0 } else { wrap_to_pi(dy.atan2(dx) - ego.heading) };
    PolarObservation {
        range,
        bearing,
        relative_speed: agent.speed - ego.speed,
        relative_heading: wrap_to_pi(agent.heading - ego.heading),
    }
}

/// Invert [`to_polar`]: recover the agent's world position from the observation.
pub fn polar_to_world(ego: &EgoState, obs: &PolarObservation) -> Vec2 {
    let angle = ego.heading + obs.bearing;
    Vec2::new(ego.x + obs.range * angle.cos(), ego.y + obs.range * angle.sin())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn ego_at(x: f64, y: f64, heading: f64) -> EgoState {
        EgoState { x, y, heading, speed: 5.0, lane_id: LaneId(0) }
    }

    fn agent_at(x: f64, y: f64) -> AgentState {
        AgentState { id: 1, kind: AgentKind::Vehicle, x, y, heading: 0.0, speed: 3.0, lane_id: None }
    }

    #[test]
    fn polar_straight_ahead() {
        let obs = to_polar(&ego_at(0.0, 0.0, 0.0), &agent_at(10.0, 0.0));
        assert!((obs.range - 10.0).abs() < 1e-12);
        assert!(obs.bearing.abs() < 1e-12);
    }

    #[test]
    fn polar_left_abeam() {
        let obs = to_polar(&ego_at(0.0, 0.0, 0.0), &agent_at(0.0, 5.0));
        assert!((obs.range - 5.0).abs() < 1e-12);
        assert!((obs.bearing - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn polar_rotated_frame() {
        // Hand oracle: ego at (2,3) heading pi/2, agent straight ahead at (2,13).
        let obs = to_polar(&ego_at(2.0, 3.0, PI / 2.0), &agent_at(2.0, 13.0));
        assert!((obs.range - 10.0).abs() < 1e-12);
        assert!(obs.bearing.abs() < 1e-12);
    }

    #[test]
    fn action_space_is_ten() {
        let actions = enumerate_actions();
        assert_eq!(actions.len(), 10);
        assert!(actions
            .iter()
            .any(|a| a.longitudinal == Longitudinal::Accelerate && a.lateral == Lateral::LaneKeep));
        assert!(!actions
            .iter()
            .any(|a| a.longitudinal == Longitudinal::Stop && a.lateral == Lateral::LaneChangeLeft));
        assert!(!actions
            .iter()
            .any(|a| a.longitudinal == Longitudinal::Stop && a.lateral == Lateral::LaneChangeRight));
    }

    #[test]
    fn action_index_code_round_trip() {
        for (i, a) in enumerate_actions().iter().enumerate() {
            assert_eq!(a.index(), i);
            assert_eq!(Action::from_index(i), Some(*a));
            assert_eq!(Action::from_code(a.code()), Some(*a));
            assert_eq!(Action::from_code(&a.code().to_lowercase()), Some(*a));
        }
        assert_eq!(Action::new(Longitudinal::Stop, Lateral::LaneChangeLeft), None);
    }

    #[test]
    fn normalize_basic() {
        let mut raw = [0.0; N_ACTIONS];
        raw[0] = 1.0;
        raw[1] = 1.0;
        let d = DecisionDistribution::normalize(&raw).unwrap();
        assert!((d.probs()[0] - 0.5).abs() < 1e-12);
        assert!((d.probs()[1] - 0.5).abs() < 1e-12);
        assert!(d.is_valid());
    }

    #[test]
    fn normalize_one_hot_identity() {
        let mut raw = [0.0; N_ACTIONS];
        raw[6] = 0.3;
        let d = DecisionDistribution::normalize(&raw).unwrap();
        assert_eq!(d.probs()[6], 1.0);
    }

    #[test]
    fn normalize_divides_by_z() {
        // Z = 0.8 + 0.6 + 0.6 = 2.0
        let mut raw = [0.0; N_ACTIONS];
        raw[0] = 0.8;
        raw[1] = 0.6;
        raw[2] = 0.6;
        let d = DecisionDistribution::normalize(&raw).unwrap();
        assert!((d.probs()[0] - 0.4).abs() < 1e-12);
        assert!((d.probs()[1] - 0.3).abs() < 1e-12);
        assert!((d.probs()[2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn normalize_all_zero_errors() {
        assert_eq!(
            DecisionDistribution::normalize(&[0.0; N_ACTIONS]),
            Err(DistributionError::AllZero)
        );
    }

    #[test]
    fn lane_projection() {
        let lane = Lane {
            id: LaneId(0),
            centerline: vec![Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)],
            width: 3.5,
            speed_limit: 12.0,
            left_neighbor: None,
            right_neighbor: None,
        };
        let (s, d, h) = lane.project(Vec2::new(30.0, 1.0));
        assert!((s - 30.0).abs() < 1e-9);
        assert!((d - 1.0).abs() < 1e-9);
        assert!(h.abs() < 1e-9);
        let (p, _) = lane.point_at(40.0);
        assert!((p.x - 40.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn polar_round_trips(
            ex in -50.0..50.0f64, ey in -50.0..50.0f64, eh in -3.1..3.1f64,
            ax in -50.0..50.0f64, ay in -50.0..50.0f64,
        ) {
            let ego = ego_at(ex, ey, eh);
            let agent = agent_at(ax, ay);
            let obs = to_polar(&ego, &agent);
            prop_assert!(obs.range >= 0.0);
            prop_assert!(obs.bearing >= -PI && obs.bearing < PI);
            let rec = polar_to_world(&ego, &obs);
            prop_assert!((rec.x - ax).abs() < 1e-9);
            prop_assert!((rec.y - ay).abs() < 1e-9);
        }

        #[test]
        fn normalize_valid_when_not_all_zero(raw in proptest::array::uniform10(0.0..10.0f64)) {
            prop_assume!(raw.iter().sum::<f64>() > 0.0);
            let d = DecisionDistribution::normalize(&raw).unwrap();
            prop_assert!(d.is_valid());
        }
    }
}

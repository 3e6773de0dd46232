//! Deterministic 2D closed-loop simulation: scripted or IDM background
//! traffic, periodic replanning through a pluggable decision source, and
//! per-episode success metrics.

use serde::{Deserialize, Serialize};

use crate::gateway::TextBackend;
use crate::geom::{wrap_to_pi, OrientedRect, Vec2};
use crate::memory::{build_augmented_query, MemoryBank};
use crate::planner::{
    self, control_comfort, ObjectiveWeights, PredictedAgent, EGO_LENGTH, EGO_WIDTH, HORIZON,
};
use crate::prompting::build_decision_prompt;
use crate::scene::{
    Action, AgentKind, AgentState, DecisionDistribution, DrivingContext, EgoState, LaneGraph,
    Navigation, TrafficLight,
};
use crate::student::{chat_wrap_query, Student};
use crate::workflow::{aggregate_confidence, Workflow};

pub const SCENARIO_VERSION: u32 = 1;

const WRONG_DIRECTION_ANGLE: f64 = 120.0 * std::f64::consts::PI / 180.0;
const WRONG_DIRECTION_HOLD: f64 = 1.0;
const OFF_DRIVABLE_HOLD: f64 = 0.5;

// Standard IDM parameters.
const IDM_T: f64 = 1.5;
const IDM_A: f64 = 1.5;
const IDM_B: f64 = 2.0;
const IDM_S0: f64 = 2.0;
const IDM_DELTA: f64 = 4.0;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("scenario is invalid: {0}")]
    BadScenario(String),
    #[error("scenario file version {got} unsupported (expected {expected})")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("configuration is invalid: {0}")]
    BadConfig(String),
    #[error("decision source failed at t={timestamp:.1}s: {message}")]
    Pipeline { timestamp: f64, message: String },
    #[error("metric evaluation needs at least one episode")]
    EmptySuite,
    #[error("malformed scenario json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Timed pose sample for a scripted agent; state is linearly interpolated
/// between consecutive samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AgentBehavior {
    /// Follows the waypoint schedule exactly.
    Scripted { waypoints: Vec<Waypoint> },
    /// Car-following along its initial lane toward `desired_speed`.
    Idm { desired_speed: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: u32,
    pub kind: AgentKind,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub behavior: AgentBehavior,
}

/// A complete closed-loop test case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_version")]
    pub version: u32,
    pub id: String,
    pub lanes: LaneGraph,
    pub ego_init: EgoState,
    pub agents: Vec<AgentSpec>,
    pub traffic_light: TrafficLight,
    pub navigation: Navigation,
    pub duration: f64,
    pub tags: Vec<String>,
}

fn default_version() -> u32 {
    SCENARIO_VERSION
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.version != SCENARIO_VERSION {
            return Err(SimError::VersionMismatch {
                expected: SCENARIO_VERSION,
                got: self.version,
            });
        }
        if !(self.duration > 0.0) {
            return Err(SimError::BadScenario("duration must be positive".into()));
        }
        if self.lanes.lane(self.ego_init.lane_id).is_none() {
            return Err(SimError::BadScenario("ego initial lane does not exist".into()));
        }
        // Goal must be reachable along some centerline.
        let reachable = self.lanes.lanes.iter().any(|lane| {
            let length = lane.length();
            let mut s = 0.0;
            while s <= length {
                let (p, _) = lane.point_at(s);
                if self.lanes.goal_region.contains(p) {
                    return true;
                }
                s += 1.0;
            }
            false
        });
        if !reachable {
            return Err(SimError::BadScenario(
                "goal region is not reachable along any lane centerline".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Scenario, SimError> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Where per-replan decisions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DecisionSourceKind {
    Workflow,
    Student,
    FixedAction { code: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub replan_period: f64,
    pub seed: u64,
    pub weights: ObjectiveWeights,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.1,
            replan_period: 0.5,
            seed: 0,
            weights: ObjectiveWeights::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) {
            return Err(SimError::BadConfig("dt must be positive".into()));
        }
        let ratio = self.replan_period / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(SimError::BadConfig(
                "replan_period must be a positive multiple of dt".into(),
            ));
        }
        self.weights.validate().map_err(SimError::BadConfig)
    }
}

/// What a decision source hands the executor each replan.
pub enum Decision {
    /// Distribution for the full candidate-gated planner.
    Planned(DecisionDistribution),
    /// Open-loop execution of one action's nominal maneuver (the naive
    /// baseline path; it never reacts to obstacles).
    DirectManeuver(Action),
}

pub trait DecisionProvider {
    fn decide(&mut self, ctx: &DrivingContext) -> Result<Decision, String>;
    fn name(&self) -> &str;
}

/// Always the same action, executed open-loop.
pub struct FixedProvider(pub Action);

impl DecisionProvider for FixedProvider {
    fn decide(&mut self, _ctx: &DrivingContext) -> Result<Decision, String> {
        Ok(Decision::DirectManeuver(self.0))
    }

    fn name(&self) -> &str {
        "fixed"
    }
}

/// Distilled-model decision source: renders the scene, optionally prepends
/// retrieved demonstrations, and reads the distribution head.
pub struct StudentProvider<'a> {
    pub student: &'a Student,
    pub backend: &'a dyn TextBackend,
    pub bank: Option<&'a MemoryBank>,
    pub k: usize,
}

impl DecisionProvider for StudentProvider<'_> {
    fn decide(&mut self, ctx: &DrivingContext) -> Result<Decision, String> {
        let q_md = build_decision_prompt(ctx).user;
        let wrapped = chat_wrap_query(&q_md);
        let text = match self.bank {
            Some(bank) if self.k > 0 && !bank.is_empty() => {
                let embedding = self.backend.embed(&q_md).map_err(|e| e.to_string())?;
                let items = bank.retrieve(&embedding, self.k).map_err(|e| e.to_string())?;
                build_augmented_query(&wrapped, &items)
            }
            _ => wrapped,
        };
        let (distribution, _) = self.student.infer(&text, 0).map_err(|e| e.to_string())?;
        Ok(Decision::Planned(distribution))
    }

    fn name(&self) -> &str {
        "student"
    }
}

/// Committee decision source: votes, assesses confidence, and aggregates at
/// every replan. Summarization is skipped; closed-loop control needs only the
/// distribution.
pub struct WorkflowProvider<'a> {
    pub workflow: Workflow<'a>,
}

impl DecisionProvider for WorkflowProvider<'_> {
    fn decide(&mut self, ctx: &DrivingContext) -> Result<Decision, String> {
        let votes = self.workflow.run_action_voting(ctx).map_err(|e| e.to_string())?;
        let confidences =
            self.workflow.run_confidence_assessment(&votes).map_err(|e| e.to_string())?;
        Ok(Decision::Planned(aggregate_confidence(&votes, &confidences)))
    }

    fn name(&self) -> &str {
        "workflow"
    }
}

/// Background-traffic reactivity: scripted replay, or IDM for moving
/// vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficMode {
    NonReactive,
    Reactive,
}

impl TrafficMode {
    pub fn label(&self) -> &'static str {
        match self {
            TrafficMode::NonReactive => "nr",
            TrafficMode::Reactive => "r",
        }
    }
}

/// Reactive mode swaps moving scripted vehicles to IDM at their scripted
/// speed; parked vehicles and VRUs keep their scripts in both modes.
pub fn scenario_in_mode(scenario: &Scenario, mode: TrafficMode) -> Scenario {
    let mut out = scenario.clone();
    if mode == TrafficMode::Reactive {
        for agent in &mut out.agents {
            let moving = agent.speed >= 0.5;
            if agent.kind == AgentKind::Vehicle
                && moving
                && matches!(agent.behavior, AgentBehavior::Scripted { .. })
            {
                agent.behavior = AgentBehavior::Idm { desired_speed: agent.speed };
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureKind {
    Collision,
    WrongDirection,
    OutOfDrivable,
    IncompleteGoal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineStep {
    pub t: f64,
    pub ego: EgoState,
    pub action: Option<Action>,
    pub accel: f64,
    pub steer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scenario_id: String,
    pub success: bool,
    pub failure_kind: Option<FailureKind>,
    pub cls_proxy: f64,
    pub progress_ratio: f64,
    pub comfort: f64,
    pub speed_compliance: f64,
    pub timeline: Vec<TimelineStep>,
}

/// Episode timeline as JSONL for replay, one step per line.
pub fn timeline_jsonl(result: &EpisodeResult) -> String {
    let mut out = String::new();
    for step in &result.timeline {
        out.push_str(&serde_json::to_string(step).expect("step serializes"));
        out.push('\n');
    }
    out
}

struct SimAgent {
    spec: AgentSpec,
    x: f64,
    y: f64,
    heading: f64,
    speed: f64,
    /// Station along the followed lane, IDM agents only.
    station: f64,
    lane_index: Option<usize>,
}

fn scripted_state(waypoints: &[Waypoint], spec: &AgentSpec, t: f64) -> (f64, f64, f64, f64) {
    if waypoints.is_empty() {
        return (spec.x, spec.y, spec.heading, spec.speed);
    }
    if t <= waypoints[0].t {
        let w = &waypoints[0];
        return (w.x, w.y, w.heading, w.speed);
    }
    for pair in waypoints.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if t <= b.t {
            let span = (b.t - a.t).max(1e-9);
            let f = ((t - a.t) / span).clamp(0.0, 1.0);
            return (
                a.x + f * (b.x - a.x),
                a.y + f * (b.y - a.y),
                wrap_to_pi(a.heading + f * wrap_to_pi(b.heading - a.heading)),
                a.speed + f * (b.speed - a.speed),
            );
        }
    }
    let w = waypoints.last().expect("nonempty");
    (w.x, w.y, w.heading, w.speed)
}

/// IDM acceleration toward `desired` given an optional (gap, leader speed).
fn idm_accel(v: f64, desired: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = (v / desired.max(0.1)).powf(IDM_DELTA);
    let interaction = match leader {
        Some((gap, v_lead)) => {
            let dv = v - v_lead;
            let s_star = IDM_S0 + (v * IDM_T + v * dv / (2.0 * (IDM_A * IDM_B).sqrt())).max(0.0);
            (s_star / gap.max(0.1)).powi(2)
        }
        None => 0.0,
    };
    IDM_A * (1.0 - free - interaction)
}

/// Advances background agents by one step at time `t` (scripted agents are
/// placed exactly; IDM agents integrate along their lane).
fn step_background(
    agents: &mut [SimAgent],
    lanes: &LaneGraph,
    ego: &EgoState,
    t_next: f64,
    dt: f64,
) {
    // IDM leader search uses the pre-step snapshot so update order is
    // irrelevant.
    let snapshot: Vec<(usize, f64, f64)> = agents
        .iter()
        .filter_map(|a| a.lane_index.map(|li| (li, a.station, a.speed)))
        .collect();
    let ego_on: Option<(usize, f64)> = lanes
        .lanes
        .iter()
        .position(|l| l.id == ego.lane_id)
        .map(|li| {
            let (s, _, _) = lanes.lanes[li].project(Vec2::new(ego.x, ego.y));
            (li, s)
        });

    for agent in agents.iter_mut() {
        match &agent.spec.behavior {
            AgentBehavior::Scripted { waypoints } => {
                let (x, y, heading, speed) = scripted_state(waypoints, &agent.spec, t_next);
                agent.x = x;
                agent.y = y;
                agent.heading = heading;
                agent.speed = speed;
            }
            AgentBehavior::Idm { desired_speed } => {
                let Some(li) = agent.lane_index else { continue };
                let mut leader: Option<(f64, f64)> = None;
                let mut consider = |station: f64, speed: f64| {
                    let gap = station - agent.station - EGO_LENGTH;
                    if station > agent.station && leader.map_or(true, |(g, _)| gap < g) {
                        leader = Some((gap, speed));
                    }
                };
                for &(oli, s, v) in &snapshot {
                    if oli == li && s > agent.station {
                        consider(s, v);
                    }
                }
                if let Some((eli, es)) = ego_on {
                    if eli == li && es > agent.station {
                        consider(es, ego.speed);
                    }
                }
                let a = idm_accel(agent.speed, *desired_speed, leader);
                agent.speed = (agent.speed + a * dt).max(0.0);
                agent.station += agent.speed * dt;
                let lane = &lanes.lanes[li];
                let (p, heading) = lane.point_at(agent.station);
                agent.x = p.x;
                agent.y = p.y;
                agent.heading = heading;
            }
        }
    }
}

fn agent_states(agents: &[SimAgent], lanes: &LaneGraph) -> Vec<AgentState> {
    agents
        .iter()
        .map(|a| AgentState {
            id: a.spec.id,
            kind: a.spec.kind,
            x: a.x,
            y: a.y,
            heading: a.heading,
            speed: a.speed,
            lane_id: lanes.locate(Vec2::new(a.x, a.y)),
        })
        .collect()
}

fn body_rect(x: f64, y: f64, heading: f64, kind: AgentKind) -> OrientedRect {
    let (length, width) = PredictedAgent::footprint(kind);
    OrientedRect { center: Vec2::new(x, y), heading, length, width }
}

/// Runs one scenario to completion under the given decision source.
pub fn run_episode(
    scenario: &Scenario,
    config: &SimConfig,
    provider: &mut dyn DecisionProvider,
) -> Result<EpisodeResult, SimError> {
    scenario.validate()?;
    config.validate()?;
    let dt = config.dt;
    let replan_every = (config.replan_period / dt).round() as usize;
    let total_steps = (scenario.duration / dt).round() as usize;

    let mut ego = scenario.ego_init.clone();
    let mut agents: Vec<SimAgent> = scenario
        .agents
        .iter()
        .map(|spec| {
            let lane_index = scenario
                .lanes
                .locate(Vec2::new(spec.x, spec.y))
                .and_then(|id| scenario.lanes.lanes.iter().position(|l| l.id == id));
            let station = lane_index
                .map(|li| scenario.lanes.lanes[li].project(Vec2::new(spec.x, spec.y)).0)
                .unwrap_or(0.0);
            SimAgent {
                spec: spec.clone(),
                x: spec.x,
                y: spec.y,
                heading: spec.heading,
                speed: spec.speed,
                station,
                lane_index,
            }
        })
        .collect();

    let mut timeline = Vec::with_capacity(total_steps);
    let mut controls: Vec<(f64, f64)> = Vec::new();
    let mut control_cursor = 0usize;
    let mut current_action: Option<Action> = None;
    let mut failure: Option<FailureKind> = None;
    let mut reached_goal = false;
    let mut wrong_dir_time = 0.0;
    let mut off_drivable_time = 0.0;
    let mut comfort_sum = 0.0;
    let mut compliant_steps = 0usize;
    let mut executed_steps = 0usize;

    let start_station = {
        let lane = scenario.lanes.lane(ego.lane_id).expect("validated");
        lane.project(Vec2::new(ego.x, ego.y)).0
    };

    for step in 0..total_steps {
        let t = step as f64 * dt;
        if step % replan_every == 0 {
            let ctx = DrivingContext {
                timestamp: t,
                ego: ego.clone(),
                agents: agent_states(&agents, &scenario.lanes),
                lanes: scenario.lanes.clone(),
                traffic_light: scenario.traffic_light,
                navigation: scenario.navigation,
                static_objects: vec![],
            };
            let decision = provider
                .decide(&ctx)
                .map_err(|message| SimError::Pipeline { timestamp: t, message })?;
            let (action, planned) = match decision {
                Decision::Planned(dist) => {
                    let obstacles = planner::predict_constant_velocity(&ctx, HORIZON);
                    let seed = config.seed.wrapping_add(step as u64);
                    let plan = planner::plan(&ctx, &dist, &obstacles, &config.weights, seed);
                    (plan.action, plan.trajectory.controls)
                }
                Decision::DirectManeuver(action) => {
                    (action, planner::nominal_controls(action, &ctx))
                }
            };
            current_action = Some(action);
            controls = planned;
            control_cursor = 0;
        }

        let (accel, steer) = controls.get(control_cursor).copied().unwrap_or((0.0, 0.0));
        control_cursor += 1;
        let next = planner::rollout(&ego, &[(accel, steer)]);
        let s = next.states[0];
        ego.x = s.x;
        ego.y = s.y;
        ego.heading = s.heading;
        ego.speed = s.speed;
        if let Some(id) = scenario.lanes.locate(Vec2::new(ego.x, ego.y)) {
            ego.lane_id = id;
        }

        step_background(&mut agents, &scenario.lanes, &ego, t + dt, dt);

        comfort_sum += control_comfort(accel, steer);
        executed_steps += 1;
        timeline.push(TimelineStep {
            t: t + dt,
            ego: ego.clone(),
            action: current_action,
            accel,
            steer,
        });

        // Failure evaluation.
        let ego_rect = OrientedRect {
            center: Vec2::new(ego.x, ego.y),
            heading: ego.heading,
            length: EGO_LENGTH,
            width: EGO_WIDTH,
        };
        let collided = agents.iter().any(|a| {
            ego_rect.overlaps(&body_rect(a.x, a.y, a.heading, a.spec.kind))
        });
        if collided {
            failure = Some(FailureKind::Collision);
            break;
        }

        let located = scenario.lanes.locate(Vec2::new(ego.x, ego.y));
        match located {
            Some(id) => {
                off_drivable_time = 0.0;
                let lane = scenario.lanes.lane(id).expect("located lane exists");
                let (_, _, lane_heading) = lane.project(Vec2::new(ego.x, ego.y));
                if wrap_to_pi(ego.heading - lane_heading).abs() > WRONG_DIRECTION_ANGLE {
                    wrong_dir_time += dt;
                    if wrong_dir_time > WRONG_DIRECTION_HOLD {
                        failure = Some(FailureKind::WrongDirection);
                        break;
                    }
                } else {
                    wrong_dir_time = 0.0;
                }
                if ego.speed <= lane.speed_limit + 0.1 {
                    compliant_steps += 1;
                }
            }
            None => {
                wrong_dir_time = 0.0;
                compliant_steps += 1;
                off_drivable_time += dt;
                if off_drivable_time > OFF_DRIVABLE_HOLD {
                    failure = Some(FailureKind::OutOfDrivable);
                    break;
                }
            }
        }

        if scenario.lanes.goal_region.contains(Vec2::new(ego.x, ego.y)) {
            reached_goal = true;
            break;
        }
    }

    if failure.is_none() && !reached_goal {
        failure = Some(FailureKind::IncompleteGoal);
    }

    let progress_ratio = {
        let lane = scenario.lanes.lane(scenario.ego_init.lane_id).expect("validated");
        let (end_station, _, _) = lane.project(Vec2::new(ego.x, ego.y));
        let goal_station = nearest_goal_station(scenario);
        let needed = (goal_station - start_station).max(1e-9);
        ((end_station - start_station) / needed).clamp(0.0, 1.0)
    };
    let comfort = if executed_steps > 0 { comfort_sum / executed_steps as f64 } else { 1.0 };
    let speed_compliance = if executed_steps > 0 {
        compliant_steps as f64 / executed_steps as f64
    } else {
        1.0
    };
    let gate = if failure.is_none() { 1.0 } else { 0.0 };
    let cls_proxy =
        100.0 * gate * (0.5 * progress_ratio + 0.3 * comfort + 0.2 * speed_compliance);

    Ok(EpisodeResult {
        scenario_id: scenario.id.clone(),
        success: failure.is_none(),
        failure_kind: failure,
        cls_proxy,
        progress_ratio,
        comfort,
        speed_compliance,
        timeline,
    })
}

/// Station of the first centerline point inside the goal region, along the
/// ego's initial lane (falls back to lane end).
fn nearest_goal_station(scenario: &Scenario) -> f64 {
    let lane = scenario.lanes.lane(scenario.ego_init.lane_id).expect("validated");
    let length = lane.length();
    let mut s = 0.0;
    while s <= length {
        let (p, _) = lane.point_at(s);
        if scenario.lanes.goal_region.contains(p) {
            return s;
        }
        s += 1.0;
    }
    length
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteMetrics {
    pub success_rate: f64,
    pub cls_proxy: f64,
    pub episodes: usize,
}

/// Suite-level success rate (percent) and mean CLS proxy.
pub fn evaluate_metrics(results: &[EpisodeResult]) -> Result<SuiteMetrics, SimError> {
    if results.is_empty() {
        return Err(SimError::EmptySuite);
    }
    let n = results.len() as f64;
    let successes = results.iter().filter(|r| r.success).count() as f64;
    let cls = results.iter().map(|r| r.cls_proxy).sum::<f64>() / n;
    Ok(SuiteMetrics {
        success_rate: 100.0 * successes / n,
        cls_proxy: cls,
        episodes: results.len(),
    })
}

/// Suite results as CSV: one row per episode plus the aggregate footer.
pub fn suite_csv(results: &[EpisodeResult]) -> Result<String, SimError> {
    let metrics = evaluate_metrics(results)?;
    let mut out = String::from("scenario_id,success,failure,cls_proxy\n");
    for r in results {
        let failure = r
            .failure_kind
            .map(|f| format!("{f:?}"))
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{},{},{},{:.4}\n",
            r.scenario_id, r.success, failure, r.cls_proxy
        ));
    }
    out.push_str(&format!(
        "TOTAL,{:.2},,{:.4}\n",
        metrics.success_rate, metrics.cls_proxy
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Polygon;
    use crate::scene::{Lane, LaneId};

    fn straight_scenario(id: &str, ego_speed: f64) -> Scenario {
        let lane = Lane {
            id: LaneId(1),
            centerline: vec![Vec2::new(-20.0, 0.0), Vec2::new(400.0, 0.0)],
            width: 3.5,
            speed_limit: 12.0,
            left_neighbor: None,
            right_neighbor: None,
        };
        Scenario {
            version: SCENARIO_VERSION,
            id: id.to_string(),
            lanes: LaneGraph {
                lanes: vec![lane],
                goal_region: Polygon::rect(140.0, -3.0, 160.0, 3.0),
            },
            ego_init: EgoState { x: 0.0, y: 0.0, heading: 0.0, speed: ego_speed, lane_id: LaneId(1) },
            agents: vec![],
            traffic_light: TrafficLight::None,
            navigation: Navigation::Straight,
            duration: 40.0,
            tags: vec!["clear_road".into()],
        }
    }

    #[test]
    fn idm_free_road_behavior() {
        assert!(idm_accel(5.0, 10.0, None) > 0.0);
        assert_eq!(idm_accel(10.0, 10.0, None), 0.0);
        // Standstill behind a stopped leader at exactly the jam distance.
        assert!(idm_accel(0.0, 10.0, Some((IDM_S0, 0.0))) <= 0.0);
    }

    #[test]
    fn idm_decelerates_when_closing_fast() {
        let a = idm_accel(12.0, 12.0, Some((8.0, 0.0)));
        assert!(a < -2.0, "accel {a}");
    }

    #[test]
    fn clear_road_cruise_succeeds() {
        let scenario = straight_scenario("clear", 8.0);
        let config = SimConfig::default();
        let mut provider = FixedProvider(Action::from_code("CK-LK").unwrap());
        let result = run_episode(&scenario, &config, &mut provider).unwrap();
        assert!(result.success, "failure: {:?}", result.failure_kind);
        assert!(result.cls_proxy > 50.0, "cls {}", result.cls_proxy);
        assert!(result.timeline.len() < 400, "ended early at goal");
    }

    #[test]
    fn episodes_are_bitwise_deterministic() {
        let scenario = straight_scenario("det", 6.0);
        let config = SimConfig::default();
        let run = || {
            let mut provider = FixedProvider(Action::from_code("CK-LK").unwrap());
            run_episode(&scenario, &config, &mut provider).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(timeline_jsonl(&a), timeline_jsonl(&b));
    }

    #[test]
    fn stopped_leader_with_blind_acceleration_collides() {
        let mut scenario = straight_scenario("rear_end", 8.0);
        scenario.agents.push(AgentSpec {
            id: 2,
            kind: AgentKind::Vehicle,
            x: 20.0,
            y: 0.0,
            heading: 0.0,
            speed: 0.0,
            behavior: AgentBehavior::Scripted { waypoints: vec![] },
        });
        let config = SimConfig::default();
        let mut provider = FixedProvider(Action::from_code("AC-LK").unwrap());
        let result = run_episode(&scenario, &config, &mut provider).unwrap();
        assert!(!result.success);
        assert_eq!(result.failure_kind, Some(FailureKind::Collision));
        assert_eq!(result.cls_proxy, 0.0);
    }

    #[test]
    fn short_episode_without_goal_is_incomplete() {
        let mut scenario = straight_scenario("short", 2.0);
        scenario.duration = 3.0;
        let config = SimConfig::default();
        let mut provider = FixedProvider(Action::from_code("ST-LK").unwrap());
        let result = run_episode(&scenario, &config, &mut provider).unwrap();
        assert!(!result.success);
        assert_eq!(result.failure_kind, Some(FailureKind::IncompleteGoal));
    }

    #[test]
    fn scripted_agent_follows_waypoints_exactly() {
        let spec = AgentSpec {
            id: 9,
            kind: AgentKind::Vru,
            x: 0.0,
            y: -6.0,
            heading: std::f64::consts::FRAC_PI_2,
            speed: 1.5,
            behavior: AgentBehavior::Scripted { waypoints: vec![] },
        };
        let waypoints = vec![
            Waypoint { t: 0.0, x: 0.0, y: -6.0, heading: 1.5, speed: 1.5 },
            Waypoint { t: 4.0, x: 0.0, y: 6.0, heading: 1.5, speed: 1.5 },
        ];
        let (x, y, _, _) = scripted_state(&waypoints, &spec, 2.0);
        assert_eq!(x, 0.0);
        assert_eq!(y, 0.0);
        let (_, y, _, _) = scripted_state(&waypoints, &spec, 10.0);
        assert_eq!(y, 6.0);
    }

    #[test]
    fn metrics_aggregate_and_gate() {
        let mk = |success: bool, cls: f64| EpisodeResult {
            scenario_id: "s".into(),
            success,
            failure_kind: if success { None } else { Some(FailureKind::Collision) },
            cls_proxy: cls,
            progress_ratio: 1.0,
            comfort: 1.0,
            speed_compliance: 1.0,
            timeline: vec![],
        };
        let mut suite: Vec<EpisodeResult> = (0..18).map(|_| mk(true, 100.0)).collect();
        suite.push(mk(false, 0.0));
        suite.push(mk(false, 0.0));
        let m = evaluate_metrics(&suite).unwrap();
        assert!((m.success_rate - 90.0).abs() < 1e-12);
        assert!((m.cls_proxy - 90.0).abs() < 1e-12);

        assert!(matches!(evaluate_metrics(&[]), Err(SimError::EmptySuite)));

        let perfect: Vec<EpisodeResult> = (0..5).map(|_| mk(true, 100.0)).collect();
        let m = evaluate_metrics(&perfect).unwrap();
        assert_eq!(m.success_rate, 100.0);
        assert_eq!(m.cls_proxy, 100.0);
    }

    #[test]
    fn scenario_json_round_trips_and_validates() {
        let scenario = straight_scenario("json", 8.0);
        let text = scenario.to_json();
        let back = Scenario::from_json(&text).unwrap();
        assert_eq!(back, scenario);

        let mut versioned = scenario.clone();
        versioned.version = 99;
        let text = versioned.to_json();
        assert!(matches!(
            Scenario::from_json(&text),
            Err(SimError::VersionMismatch { got: 99, .. })
        ));

        let mut far_goal = scenario.clone();
        far_goal.lanes.goal_region = Polygon::rect(1000.0, 0.0, 1010.0, 3.0);
        assert!(matches!(far_goal.validate(), Err(SimError::BadScenario(_))));
    }

    #[test]
    fn config_validation_checks_replan_multiple() {
        let config = SimConfig { replan_period: 0.35, ..SimConfig::default() };
        assert!(matches!(config.validate(), Err(SimError::BadConfig(_))));
        assert!(SimConfig::default().validate().is_ok());
    }
}

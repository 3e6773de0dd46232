//! Decision-guided motion planning: the predicted action distribution gates a
//! candidate set, each candidate is refined by evolutionary search over
//! kinematic-bicycle control sequences, and a confidence-aware arbitration
//! picks the final maneuver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{wrap_to_pi, OrientedRect, Vec2};
use crate::scene::{
    Action, AgentKind, DecisionDistribution, DrivingContext, EgoState, Lateral, Longitudinal,
};

pub const HORIZON: usize = 40;
pub const DT: f64 = 0.1;
pub const WHEELBASE: f64 = 2.8;
pub const ACCEL_MAX: f64 = 4.0;
pub const STEER_MAX: f64 = 0.5;
pub const EGO_LENGTH: f64 = 4.5;
pub const EGO_WIDTH: f64 = 2.0;

const POPULATION: usize = 64;
const ITERATIONS: usize = 10;
const ELITES: usize = POPULATION / 4;
const SIGMA_ACCEL: f64 = 0.6;
const SIGMA_STEER: f64 = 0.06;
const SIGMA_DECAY: f64 = 0.85;
const LANE_SIGMA: f64 = 0.5;
const BAND_FLOOR: f64 = 0.01;

/// Exponents and threshold for candidate gating, optimization, and final
/// arbitration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub omega_f: f64,
    pub omega_g: f64,
    pub omega_c: f64,
    pub omega_f_tilde: f64,
    pub omega_g_tilde: f64,
    pub gamma_c: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            omega_f: 5.0,
            omega_g: 1.0,
            omega_c: 1.0,
            omega_f_tilde: 0.1,
            omega_g_tilde: 0.3,
            gamma_c: 0.1,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            self.omega_f,
            self.omega_g,
            self.omega_c,
            self.omega_f_tilde,
            self.omega_g_tilde,
        ];
        if positive.iter().any(|&w| !(w > 0.0)) {
            return Err("objective exponents must be positive".into());
        }
        if !(self.gamma_c > 0.0 && self.gamma_c < 1.0) {
            return Err("gamma_c must lie in (0, 1)".into());
        }
        if self.omega_f_tilde >= self.omega_f {
            return Err("arbitration must de-emphasize decision following".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

/// A horizon-long rollout, always the bicycle-model image of its controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<TrajState>,
    /// (acceleration, steering angle) per step.
    pub controls: Vec<(f64, f64)>,
}

impl Trajectory {
    pub fn mean_speed(&self) -> f64 {
        self.states.iter().map(|s| s.speed).sum::<f64>() / self.states.len() as f64
    }

    pub fn end(&self) -> &TrajState {
        self.states.last().expect("nonempty trajectory")
    }
}

fn bicycle_step(state: &TrajState, accel: f64, steer: f64) -> TrajState {
    let a = accel.clamp(-ACCEL_MAX, ACCEL_MAX);
    let d = steer.clamp(-STEER_MAX, STEER_MAX);
    let x = state.x + state.speed * state.heading.cos() * DT;
    let y = state.y + state.speed * state.heading.sin() * DT;
    let heading = wrap_to_pi(state.heading + state.speed / WHEELBASE * d.tan() * DT);
    let speed = (state.speed + a * DT).max(0.0);
    TrajState { x, y, heading, speed }
}

/// Integrates a control sequence from the ego state.
pub fn rollout(ego: &EgoState, controls: &[(f64, f64)]) -> Trajectory {
    let mut state = TrajState { x: ego.x, y: ego.y, heading: ego.heading, speed: ego.speed };
    let mut states = Vec::with_capacity(controls.len());
    let clamped: Vec<(f64, f64)> = controls
        .iter()
        .map(|&(a, d)| (a.clamp(-ACCEL_MAX, ACCEL_MAX), d.clamp(-STEER_MAX, STEER_MAX)))
        .collect();
    for &(a, d) in &clamped {
        state = bicycle_step(&state, a, d);
        states.push(state);
    }
    Trajectory { states, controls: clamped }
}

/// A scripted obstacle future: one pose per planning step, last pose held if
/// the script is shorter than the horizon.
#[derive(Debug, Clone)]
pub struct PredictedAgent {
    pub id: u32,
    pub poses: Vec<(f64, f64, f64)>,
    pub length: f64,
    pub width: f64,
}

impl PredictedAgent {
    pub fn pose_at(&self, step: usize) -> (f64, f64, f64) {
        let idx = step.min(self.poses.len().saturating_sub(1));
        self.poses[idx]
    }

    pub fn footprint(kind: AgentKind) -> (f64, f64) {
        match kind {
            AgentKind::Vehicle => (EGO_LENGTH, EGO_WIDTH),
            AgentKind::Vru => (0.8, 0.8),
            AgentKind::Static => (1.0, 1.0),
        }
    }
}

/// Constant-velocity futures for every agent and static object in view.
pub fn predict_constant_velocity(ctx: &DrivingContext, steps: usize) -> Vec<PredictedAgent> {
    let mut out = Vec::new();
    for agent in &ctx.agents {
        let (vx, vy) = (
            agent.speed * agent.heading.cos(),
            agent.speed * agent.heading.sin(),
        );
        let poses = (0..steps)
            .map(|k| {
                let t = (k + 1) as f64 * DT;
                (agent.x + vx * t, agent.y + vy * t, agent.heading)
            })
            .collect();
        let (length, width) = PredictedAgent::footprint(agent.kind);
        out.push(PredictedAgent { id: agent.id, poses, length, width });
    }
    for obj in &ctx.static_objects {
        out.push(PredictedAgent {
            id: obj.id,
            poses: vec![(obj.x, obj.y, 0.0)],
            length: 2.0 * obj.radius,
            width: 2.0 * obj.radius,
        });
    }
    out
}

/// All scoring terms for one trajectory, with the combined optimization
/// objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub j_f: f64,
    pub j_g: f64,
    pub combined: f64,
    pub collision: f64,
    pub drivable: f64,
    pub comfort: f64,
    pub progress: f64,
    pub speed_compliance: f64,
    pub lane_dev: f64,
    pub speed_band: f64,
    pub missing_target_lane: bool,
}

/// Actions gated by the confidence threshold, with their probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub actions: Vec<(Action, f64)>,
}

/// {a : p̂(a) ≥ γ_c}, falling back to the argmax action when nothing clears
/// the threshold.
pub fn candidate_set(dist: &DecisionDistribution, gamma_c: f64) -> CandidateSet {
    assert!(gamma_c > 0.0 && gamma_c < 1.0, "gamma_c must lie in (0, 1)");
    let mut actions: Vec<(Action, f64)> = dist
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= gamma_c)
        .map(|(i, &p)| (Action::from_index(i).expect("index in range"), p))
        .collect();
    if actions.is_empty() {
        let a = dist.argmax();
        actions.push((a, dist.prob(a)));
    }
    CandidateSet { actions }
}

/// Target speed interval for a longitudinal command at current speed `v`,
/// capped by the lane speed limit.
pub fn speed_band(longitudinal: Longitudinal, v: f64, limit: f64) -> (f64, f64) {
    let (lo, hi) = match longitudinal {
        Longitudinal::Accelerate => (v + 1.5, v + 4.0),
        Longitudinal::Decelerate => ((v - 4.0).max(0.0), (v - 1.5).max(0.0)),
        Longitudinal::Cruise => ((v - 0.75).max(0.0), v + 0.75),
        Longitudinal::Stop => (0.0, 0.3),
    };
    let hi = hi.min(limit);
    let lo = lo.min(hi);
    (lo, hi)
}

fn target_lane_id(action: Action, ctx: &DrivingContext) -> Option<crate::scene::LaneId> {
    let current = ctx.lanes.lane(ctx.ego.lane_id)?;
    match action.lateral {
        Lateral::LaneKeep => Some(current.id),
        Lateral::LaneChangeLeft => current.left_neighbor,
        Lateral::LaneChangeRight => current.right_neighbor,
    }
}

/// How well the trajectory follows the commanded lane and speed interval:
/// exp(−mean deviation / σ) times the in-band step fraction (floored).
/// A missing neighbor lane scores zero and is flagged.
pub fn decision_following_score(
    traj: &Trajectory,
    action: Action,
    ctx: &DrivingContext,
) -> (f64, f64, f64, bool) {
    let Some(target_id) = target_lane_id(action, ctx) else {
        return (0.0, 0.0, 0.0, true);
    };
    let lane = ctx.lanes.lane(target_id).expect("target lane exists");
    let (lo, hi) = speed_band(action.longitudinal, ctx.ego.speed, lane.speed_limit);

    let mut dev_sum = 0.0;
    let mut in_band = 0usize;
    for s in &traj.states {
        let (_, offset, _) = lane.project(Vec2::new(s.x, s.y));
        dev_sum += offset.abs();
        if s.speed >= lo - 1e-9 && s.speed <= hi + 1e-9 {
            in_band += 1;
        }
    }
    let mean_dev = dev_sum / traj.states.len() as f64;
    let lane_term = (-mean_dev / LANE_SIGMA).exp();
    let band_term = (in_band as f64 / traj.states.len() as f64).max(BAND_FLOOR);
    (lane_term * band_term, lane_term, band_term, false)
}

/// Per-step ride-quality factor: 1 at rest inputs, quadratic falloff in both
/// acceleration and steering.
pub fn control_comfort(accel: f64, steer: f64) -> f64 {
    let fa = (1.0 - (accel / 3.0).powi(2)).max(0.0);
    let fd = (1.0 - (steer / 0.3).powi(2)).max(0.0);
    fa * fd
}

fn ego_rect(s: &TrajState) -> OrientedRect {
    OrientedRect {
        center: Vec2::new(s.x, s.y),
        heading: s.heading,
        length: EGO_LENGTH,
        width: EGO_WIDTH,
    }
}

/// Decision-agnostic quality: hard collision and drivable-area gates times a
/// weighted blend of progress, comfort, and speed compliance.
pub fn general_quality_score(
    traj: &Trajectory,
    ctx: &DrivingContext,
    obstacles: &[PredictedAgent],
) -> ScoreBreakdown {
    let mut collision = 1.0;
    'outer: for (step, s) in traj.states.iter().enumerate() {
        let ego = ego_rect(s);
        for ob in obstacles {
            let (x, y, heading) = ob.pose_at(step);
            let rect = OrientedRect {
                center: Vec2::new(x, y),
                heading,
                length: ob.length,
                width: ob.width,
            };
            if ego.overlaps(&rect) {
                collision = 0.0;
                break 'outer;
            }
        }
    }

    let drivable = if traj
        .states
        .iter()
        .all(|s| ctx.lanes.in_drivable(Vec2::new(s.x, s.y)))
    {
        1.0
    } else {
        0.0
    };

    let comfort = traj.controls.iter().map(|&(a, d)| control_comfort(a, d)).sum::<f64>()
        / traj.controls.len() as f64;

    let end = traj.end();
    let ref_lane = ctx
        .lanes
        .locate(Vec2::new(end.x, end.y))
        .or(Some(ctx.ego.lane_id))
        .and_then(|id| ctx.lanes.lane(id));
    let progress = match ref_lane {
        Some(lane) => {
            let (s_end, _, _) = lane.project(Vec2::new(end.x, end.y));
            let (s_start, _, _) = lane.project(Vec2::new(ctx.ego.x, ctx.ego.y));
            let span = lane.speed_limit * (HORIZON as f64 * DT);
            ((s_end - s_start) / span).clamp(0.0, 1.0)
        }
        None => 0.0,
    };

    let compliant = traj
        .states
        .iter()
        .filter(|s| {
            match ctx.lanes.locate(Vec2::new(s.x, s.y)).and_then(|id| ctx.lanes.lane(id)) {
                Some(lane) => s.speed <= lane.speed_limit + 0.1,
                None => true,
            }
        })
        .count();
    let speed_compliance = compliant as f64 / traj.states.len() as f64;

    let j_g = collision * drivable * (0.4 * progress + 0.3 * comfort + 0.3 * speed_compliance);
    ScoreBreakdown {
        j_f: 0.0,
        j_g,
        combined: 0.0,
        collision,
        drivable,
        comfort,
        progress,
        speed_compliance,
        lane_dev: 0.0,
        speed_band: 0.0,
        missing_target_lane: false,
    }
}

fn score_trajectory(
    traj: &Trajectory,
    action: Action,
    ctx: &DrivingContext,
    obstacles: &[PredictedAgent],
    weights: &ObjectiveWeights,
) -> ScoreBreakdown {
    let (j_f, lane_dev, band, missing) = decision_following_score(traj, action, ctx);
    let mut breakdown = general_quality_score(traj, ctx, obstacles);
    breakdown.j_f = j_f;
    breakdown.lane_dev = lane_dev;
    breakdown.speed_band = band;
    breakdown.missing_target_lane = missing;
    breakdown.combined = j_f.powf(weights.omega_f) * breakdown.j_g.powf(weights.omega_g);
    breakdown
}

/// Closed-loop nominal controller toward the action's target lane and band
/// midpoint, recorded as an open-loop control sequence. Also serves as the
/// naive maneuver-execution baseline: it never reacts to obstacles.
pub fn nominal_controls(action: Action, ctx: &DrivingContext) -> Vec<(f64, f64)> {
    let lane = target_lane_id(action, ctx)
        .or(Some(ctx.ego.lane_id))
        .and_then(|id| ctx.lanes.lane(id));
    let mut state = TrajState {
        x: ctx.ego.x,
        y: ctx.ego.y,
        heading: ctx.ego.heading,
        speed: ctx.ego.speed,
    };
    let mut controls = Vec::with_capacity(HORIZON);
    for _ in 0..HORIZON {
        let (accel, steer) = match lane {
            Some(lane) => {
                let (lo, hi) = speed_band(action.longitudinal, ctx.ego.speed, lane.speed_limit);
                let v_target = match action.longitudinal {
                    Longitudinal::Stop => 0.0,
                    _ => 0.5 * (lo + hi),
                };
                let accel = (1.2 * (v_target - state.speed)).clamp(-ACCEL_MAX, ACCEL_MAX);
                let (_, offset, lane_heading) = lane.project(Vec2::new(state.x, state.y));
                let heading_err = wrap_to_pi(lane_heading - state.heading);
                let cross = (1.0 * offset / (state.speed + 1.0)).atan();
                let steer = (heading_err - cross).clamp(-STEER_MAX, STEER_MAX);
                (accel, steer)
            }
            None => (0.0, 0.0),
        };
        state = bicycle_step(&state, accel, steer);
        controls.push((accel, steer));
    }
    controls
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn perturb(rng: &mut ChaCha8Rng, base: &[(f64, f64)], sa: f64, sd: f64) -> Vec<(f64, f64)> {
    base.iter()
        .map(|&(a, d)| {
            (
                (a + gauss(rng) * sa).clamp(-ACCEL_MAX, ACCEL_MAX),
                (d + gauss(rng) * sd).clamp(-STEER_MAX, STEER_MAX),
            )
        })
        .collect()
}

/// Evolutionary refinement of one candidate action: Gaussian perturbations of
/// a nominal maneuver with elite resampling, all scored under
/// (J^f)^ω_f · (J_g)^ω_g. Returns the final population, plus the best
/// trajectory and its breakdown.
pub fn optimize_trajectory(
    action: Action,
    ctx: &DrivingContext,
    obstacles: &[PredictedAgent],
    weights: &ObjectiveWeights,
    seed: u64,
) -> (Vec<Trajectory>, Trajectory, ScoreBreakdown) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nominal = nominal_controls(action, ctx);
    let mut population: Vec<Vec<(f64, f64)>> = Vec::with_capacity(POPULATION);
    population.push(nominal.clone());
    for _ in 1..POPULATION {
        population.push(perturb(&mut rng, &nominal, SIGMA_ACCEL, SIGMA_STEER));
    }

    let score_all = |pop: &[Vec<(f64, f64)>]| -> Vec<(Trajectory, ScoreBreakdown)> {
        pop.iter()
            .map(|controls| {
                let traj = rollout(&ctx.ego, controls);
                let breakdown = score_trajectory(&traj, action, ctx, obstacles, weights);
                (traj, breakdown)
            })
            .collect()
    };

    let mut scored = score_all(&population);
    for iter in 0..ITERATIONS {
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.sort_by(|&a, &b| {
            scored[b].1.combined.partial_cmp(&scored[a].1.combined).expect("finite scores")
                .then(a.cmp(&b))
        });
        let elites: Vec<Vec<(f64, f64)>> =
            order[..ELITES].iter().map(|&i| population[i].clone()).collect();
        let sa = SIGMA_ACCEL * SIGMA_DECAY.powi(iter as i32 + 1);
        let sd = SIGMA_STEER * SIGMA_DECAY.powi(iter as i32 + 1);
        let mut next = Vec::with_capacity(POPULATION);
        next.extend(elites.iter().cloned());
        for i in ELITES..POPULATION {
            next.push(perturb(&mut rng, &elites[i % ELITES], sa, sd));
        }
        population = next;
        scored = score_all(&population);
    }

    let mut best = 0usize;
    for i in 1..scored.len() {
        if scored[i].1.combined > scored[best].1.combined {
            best = i;
        }
    }
    let (best_traj, best_breakdown) = scored[best].clone();
    let proposals = scored.into_iter().map(|(t, _)| t).collect();
    (proposals, best_traj, best_breakdown)
}

/// One optimized candidate ready for arbitration.
#[derive(Debug, Clone)]
pub struct OptimizedCandidate {
    pub action: Action,
    pub p_hat: f64,
    pub trajectory: Trajectory,
    pub breakdown: ScoreBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditEntry {
    pub action: Action,
    pub p_hat: f64,
    pub j_f: f64,
    pub j_g: f64,
    pub j_tilde: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub end_x: f64,
    pub end_y: f64,
    pub mean_speed: f64,
    pub final_speed: f64,
}

/// Per-cycle record of every candidate's arbitration arithmetic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanAudit {
    pub entries: Vec<AuditEntry>,
    pub chosen: Action,
    pub trajectory: TrajectorySummary,
}

/// a* = argmax p̂^ω_c · (J^f)^ω̃_f · (J_g)^ω̃_g; ties broken by higher p̂,
/// then lower action index.
pub fn arbitrate(
    candidates: &[OptimizedCandidate],
    weights: &ObjectiveWeights,
) -> (usize, PlanAudit) {
    assert!(!candidates.is_empty(), "arbitration needs at least one candidate");
    let entries: Vec<AuditEntry> = candidates
        .iter()
        .map(|c| {
            let j_tilde = c.breakdown.j_f.powf(weights.omega_f_tilde)
                * c.breakdown.j_g.powf(weights.omega_g_tilde);
            AuditEntry {
                action: c.action,
                p_hat: c.p_hat,
                j_f: c.breakdown.j_f,
                j_g: c.breakdown.j_g,
                j_tilde,
                score: c.p_hat.powf(weights.omega_c) * j_tilde,
            }
        })
        .collect();
    let mut best = 0usize;
    for i in 1..entries.len() {
        let (a, b) = (&entries[i], &entries[best]);
        let better = a.score > b.score
            || (a.score == b.score
                && (a.p_hat > b.p_hat
                    || (a.p_hat == b.p_hat && a.action.index() < b.action.index())));
        if better {
            best = i;
        }
    }
    let traj = &candidates[best].trajectory;
    let audit = PlanAudit {
        entries,
        chosen: candidates[best].action,
        trajectory: TrajectorySummary {
            end_x: traj.end().x,
            end_y: traj.end().y,
            mean_speed: traj.mean_speed(),
            final_speed: traj.end().speed,
        },
    };
    (best, audit)
}

/// Full planning cycle: gate candidates, optimize each with its own seeded
/// stream, arbitrate.
pub struct PlanResult {
    pub action: Action,
    pub trajectory: Trajectory,
    pub audit: PlanAudit,
}

pub fn plan(
    ctx: &DrivingContext,
    dist: &DecisionDistribution,
    obstacles: &[PredictedAgent],
    weights: &ObjectiveWeights,
    base_seed: u64,
) -> PlanResult {
    let candidates = candidate_set(dist, weights.gamma_c);
    let optimized: Vec<OptimizedCandidate> = candidates
        .actions
        .iter()
        .map(|&(action, p_hat)| {
            let seed = base_seed.wrapping_add(action.index() as u64);
            let (_, trajectory, breakdown) =
                optimize_trajectory(action, ctx, obstacles, weights, seed);
            OptimizedCandidate { action, p_hat, trajectory, breakdown }
        })
        .collect();
    let (best, audit) = arbitrate(&optimized, weights);
    PlanResult {
        action: optimized[best].action,
        trajectory: optimized[best].trajectory.clone(),
        audit,
    }
}

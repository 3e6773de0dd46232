//! Self-contained desk-scale fixtures: eight archetypal driving scenes with
//! fixed teacher decision distributions, a scripted committee backend that
//! reproduces those distributions through the full voting pipeline, and a
//! bundled closed-loop scenario suite.
//!
//! Everything here is deterministic. Archetype variants draw layout from
//! small quantized palettes so renderings differ while every printed number
//! recurs across variants; the committee rules classify a prompt back to its
//! archetype from the rendered text alone. The variant generators also cover
//! the states a closed-loop episode passes through after braking or a lane
//! change (stopped ego, walkers done crossing, passed obstacles) so a policy
//! distilled from the bank recovers from them the same way the rules do.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gateway::{fnv1a64, GenerationParams, ScriptedBackend, TextBackend};
use crate::geom::{Polygon, Vec2};
use crate::memory::MemoryBank;
use crate::prompting::{build_decision_prompt, ChatMessage};
use crate::scene::{
    Action, AgentKind, AgentState, DecisionDistribution, DrivingContext, EgoState, Lane,
    LaneGraph, LaneId, Navigation, TrafficLight,
};
use crate::simulator::{AgentBehavior, AgentSpec, Scenario, Waypoint, SCENARIO_VERSION};
use crate::workflow::{MemoryItem, Workflow, WorkflowConfig, WorkflowError, WorkflowTranscript};

pub const ARCHETYPE_COUNT: usize = 8;

const NAMES: [&str; ARCHETYPE_COUNT] = [
    "clear_cruise",
    "clear_accelerate",
    "vru_near",
    "vru_far",
    "slow_leader",
    "blocked_left_free",
    "red_light",
    "blocked_right_free",
];

/// Per-archetype committee ballots, one action code per agent index. Each row
/// is a fixed multiset; with equal confidences the aggregate is exact tenths.
const BALLOTS: [[&str; 10]; ARCHETYPE_COUNT] = [
    ["CK-LK", "CK-LK", "AC-LK", "CK-LK", "DC-LK", "CK-LK", "CK-LK", "AC-LK", "CK-LK", "CK-LK"],
    ["AC-LK", "CK-LK", "AC-LK", "AC-LK", "CK-LK", "AC-LK", "DC-LK", "AC-LK", "CK-LK", "AC-LK"],
    ["DC-LK", "ST-LK", "DC-LK", "DC-LK", "ST-LK", "DC-LK", "DC-LK", "DC-LK", "ST-LK", "DC-LK"],
    ["CK-LK", "DC-LK", "CK-LK", "CK-LK", "DC-LK", "CK-LK", "DC-LK", "CK-LK", "DC-LK", "CK-LK"],
    ["CK-LL", "DC-LK", "CK-LL", "CK-LL", "DC-LK", "CK-LL", "CK-LK", "CK-LL", "DC-LK", "CK-LL"],
    ["CK-LL", "DC-LK", "CK-LL", "CK-LL", "DC-LK", "CK-LL", "DC-LK", "CK-LL", "DC-LK", "CK-LL"],
    ["DC-LK", "ST-LK", "DC-LK", "DC-LK", "ST-LK", "DC-LK", "ST-LK", "DC-LK", "ST-LK", "DC-LK"],
    ["CK-LR", "DC-LK", "CK-LR", "CK-LR", "DC-LK", "CK-LR", "DC-LK", "CK-LR", "DC-LK", "CK-LR"],
];

const RATIONALES: [&str; ARCHETYPE_COUNT] = [
    "Decision: CK-LK. The road ahead is clear and I am already near the limit, so I hold my \
lane and speed.",
    "Decision: AC-LK. My lane ahead is free and I am below the limit, so I accelerate while \
keeping my lane.",
    "Decision: DC-LK. A pedestrian is crossing close ahead, so I slow down in my lane and \
prepare to stop.",
    "Decision: CK-LK. A pedestrian is crossing far ahead; I keep my lane and speed while \
watching the crossing.",
    "Decision: CK-LL. The car ahead in my lane is much slower, so I change to the left lane \
to pass it.",
    "Decision: CK-LL. A stopped vehicle blocks my lane, so I move to the free left lane to \
pass it.",
    "Decision: DC-LK. The light ahead is red, so I slow down in my lane and prepare to stop \
at it.",
    "Decision: CK-LR. A stopped vehicle blocks my lane, so I move to the free right lane to \
pass it.",
];

const STEP_1_REPLIES: [&str; ARCHETYPE_COUNT] = [
    "Step 1: a straight two-lane road, my lane ahead is free, and I am near the limit.",
    "Step 1: a straight two-lane road, my lane ahead is free, and I am well below the limit.",
    "Step 1: a straight two-lane road with a pedestrian crossing close ahead of my lane.",
    "Step 1: a straight two-lane road with a pedestrian crossing well ahead of my lane.",
    "Step 1: a straight two-lane road with a much slower car ahead in my lane; the left lane \
is open.",
    "Step 1: a straight two-lane road with a stopped vehicle in my lane; the left lane is \
open.",
    "Step 1: a straight two-lane road with a red light ahead and nothing else around me.",
    "Step 1: a straight two-lane road with a stopped vehicle in my lane; the right lane is \
open.",
];

const STEP_2_REPLIES: [&str; ARCHETYPE_COUNT] = [
    "Step 2: no critical objects; the lane ahead is free.",
    "Step 2: no critical objects in my path; the lane ahead is free.",
    "Step 2: the crossing pedestrian is critical; its path cuts through mine within seconds.",
    "Step 2: the crossing pedestrian matters but is distant; no immediate conflict.",
    "Step 2: the slow car ahead is critical; staying behind it blocks my progress.",
    "Step 2: the stopped vehicle ahead is critical; it obstructs my lane completely.",
    "Step 2: the red light is critical; I must be able to stop at it.",
    "Step 2: the stopped vehicle ahead is critical; it obstructs my lane completely.",
];

pub fn archetype_name(archetype: usize) -> &'static str {
    NAMES[archetype]
}

/// Fixed teacher distribution for one archetype (exact tenths).
pub fn teacher_distribution(archetype: usize) -> DecisionDistribution {
    let mut probs = [0.0f64; 10];
    for code in BALLOTS[archetype] {
        let action = Action::from_code(code).expect("ballot codes are valid");
        probs[action.index()] += 0.1;
    }
    DecisionDistribution::from_probs(probs).expect("ballot tally normalizes")
}

pub fn teacher_rationale(archetype: usize) -> &'static str {
    RATIONALES[archetype]
}

/// The modal action of one archetype's teacher distribution.
pub fn teacher_action(archetype: usize) -> Action {
    teacher_distribution(archetype).argmax()
}

/// Straight two-lane road whose free lane is to the LEFT of the base lane.
fn road(length: f64, goal_from: f64, limit: f64) -> LaneGraph {
    LaneGraph {
        lanes: vec![
            Lane {
                id: LaneId(0),
                centerline: vec![Vec2::new(0.0, 0.0), Vec2::new(length, 0.0)],
                width: 3.5,
                speed_limit: limit,
                left_neighbor: Some(LaneId(1)),
                right_neighbor: None,
            },
            Lane {
                id: LaneId(1),
                centerline: vec![Vec2::new(0.0, 3.5), Vec2::new(length, 3.5)],
                width: 3.5,
                speed_limit: limit,
                left_neighbor: None,
                right_neighbor: Some(LaneId(0)),
            },
        ],
        goal_region: Polygon::rect(goal_from, -2.0, length, 5.5),
    }
}

/// Mirrored map region: the free lane is to the RIGHT of the base lane and
/// the lanes carry their own ids so renders name them distinctly.
fn road_right(length: f64, goal_from: f64, limit: f64) -> LaneGraph {
    LaneGraph {
        lanes: vec![
            Lane {
                id: LaneId(2),
                centerline: vec![Vec2::new(0.0, 0.0), Vec2::new(length, 0.0)],
                width: 3.5,
                speed_limit: limit,
                left_neighbor: None,
                right_neighbor: Some(LaneId(3)),
            },
            Lane {
                id: LaneId(3),
                centerline: vec![Vec2::new(0.0, -3.5), Vec2::new(length, -3.5)],
                width: 3.5,
                speed_limit: limit,
                left_neighbor: Some(LaneId(2)),
                right_neighbor: None,
            },
        ],
        goal_region: Polygon::rect(goal_from, -5.5, length, 2.0),
    }
}

struct SceneRoad {
    lanes: LaneGraph,
    base: LaneId,
    escape: LaneId,
    escape_y: f64,
    /// +1 toward the side of the base lane with no other lane.
    off_side: f64,
}

fn scene_road(escape_right: bool, limit: f64) -> SceneRoad {
    if escape_right {
        SceneRoad {
            lanes: road_right(200.0, 180.0, limit),
            base: LaneId(2),
            escape: LaneId(3),
            escape_y: -3.5,
            off_side: 1.0,
        }
    } else {
        SceneRoad {
            lanes: road(200.0, 180.0, limit),
            base: LaneId(0),
            escape: LaneId(1),
            escape_y: 3.5,
            off_side: -1.0,
        }
    }
}

fn variant_rng(archetype: usize, variant: u64) -> ChaCha8Rng {
    let key = fnv1a64(format!("desk/{archetype}/{variant}").as_bytes());
    ChaCha8Rng::seed_from_u64(key)
}

fn choose<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.gen_range(0..items.len())]
}

fn vehicle(x: f64, y: f64, speed: f64) -> AgentState {
    AgentState { id: 1, kind: AgentKind::Vehicle, x, y, heading: 0.0, speed, lane_id: None }
}

fn walker(x: f64, y: f64, heading: f64, speed: f64) -> AgentState {
    AgentState { id: 1, kind: AgentKind::Vru, x, y, heading, speed, lane_id: None }
}

/// Speed limit shared by every desk scene and bundled scenario; one limit
/// keeps the road description block constant per layout.
const LIMIT: f64 = 10.0;

/// Ego speed phrase classes. The render buckets ego speed into fixed phrases;
/// each archetype stripes over the classes its situation can reach so every
/// phrase the loop can produce has teaching examples.
#[derive(Clone, Copy, PartialEq)]
enum SpeedClass {
    Stopped,
    WellBelow,
    Below,
    Near,
}

fn class_speed(class: SpeedClass, rng: &mut ChaCha8Rng) -> f64 {
    match class {
        SpeedClass::Stopped => 0.0,
        SpeedClass::WellBelow => choose(rng, &[2.0, 3.0, 4.0]),
        SpeedClass::Below => choose(rng, &[6.0, 7.0, 8.0]),
        SpeedClass::Near => choose(rng, &[9.0, 9.5, 10.0]),
    }
}

/// One jittered scene for an archetype. Identical (archetype, variant) pairs
/// produce identical contexts.
///
/// Sub-mode and speed class are striped deterministically over the variant
/// index (coprime moduli), so any 20-variant window covers every cell; the rng
/// only fills in quantized positions within a cell. The sub-modes mirror the
/// phases of a closed-loop episode: launch, approach, the pass itself, and the
/// calmed-down scene after it.
pub fn archetype_context(archetype: usize, variant: u64) -> DrivingContext {
    let mut rng = variant_rng(archetype, variant);
    let v = variant as usize;
    let mut light = TrafficLight::None;
    // Escape side: blocked-right scenes mirror the road; the clear-road
    // archetypes stripe over both layouts so either side reads as routine.
    let escape_right = match archetype {
        7 => true,
        0 => (v / 3) % 2 == 1,
        1 => (v / 4) % 2 == 1,
        6 => v % 2 == 1,
        _ => false,
    };
    let sr = scene_road(escape_right, LIMIT);
    let ego_x = choose(&mut rng, &[5.0, 8.0, 11.0, 14.0]);
    let mut ego = EgoState { x: ego_x, y: 0.0, heading: 0.0, speed: 7.0, lane_id: sr.base };
    let mut agents: Vec<AgentState> = Vec::new();

    let into_escape = |ego: &mut EgoState| {
        ego.y = sr.escape_y;
        ego.lane_id = sr.escape;
    };

    // Every clear-road scene keeps exactly one benign agent in view. The empty
    // road is reserved for the red-light archetype, so the sentinel line stays
    // an unambiguous cue.
    match archetype {
        0 => {
            ego.speed = class_speed(SpeedClass::Near, &mut rng);
            match v % 3 {
                0 => {
                    // A parked car already passed, well behind in the old lane.
                    into_escape(&mut ego);
                    let dx = choose(&mut rng, &[-55.0, -38.0, -30.0, -24.0]);
                    agents.push(vehicle(ego_x + dx, 0.0, 0.0));
                }
                1 => {
                    // A walker that finished crossing, stopped off the road,
                    // anywhere from well behind to a stretch ahead.
                    let dx =
                        choose(&mut rng, &[-60.0, -45.0, -20.0, -10.0, 6.0, 14.0, 22.0]);
                    let dy = sr.off_side * choose(&mut rng, &[2.5, 3.0, 4.0]);
                    agents.push(walker(ego_x + dx, dy, sr.off_side * FRAC_PI_2, 0.0));
                }
                _ => {
                    // Passing view at speed: the obstruction, parked or crawling,
                    // is a lane over.
                    into_escape(&mut ego);
                    let dx = choose(&mut rng, &[-50.0, -25.0, -15.0, -5.0, 5.0, 12.0]);
                    let speed = choose(&mut rng, &[0.0, 2.0]);
                    agents.push(vehicle(ego_x + dx, 0.0, speed));
                }
            }
        }
        1 => {
            let class =
                [SpeedClass::Stopped, SpeedClass::WellBelow, SpeedClass::Below][v % 3];
            ego.speed = class_speed(class, &mut rng);
            match v % 4 {
                0 => {
                    // Overtaking view: the blocker sits parked in the old lane.
                    into_escape(&mut ego);
                    let dx = choose(&mut rng, &[-20.0, -10.0, 2.0, 10.0, 18.0]);
                    agents.push(vehicle(ego_x + dx, 0.0, 0.0));
                }
                1 => {
                    // A walker done crossing, stopped clear of the roadway.
                    let dx = choose(&mut rng, &[-8.0, 2.0, 10.0, 18.0, 25.0]);
                    let dy = sr.off_side * choose(&mut rng, &[2.5, 3.0, 4.0]);
                    agents.push(walker(ego_x + dx, dy, sr.off_side * FRAC_PI_2, 0.0));
                }
                2 => {
                    // A walker waiting beyond the far edge of the road.
                    let dx = choose(&mut rng, &[6.0, 12.0, 18.0, 25.0]);
                    let dy = sr.escape_y - sr.off_side * choose(&mut rng, &[2.0, 2.5, 3.0]);
                    agents.push(walker(ego_x + dx, dy, -sr.off_side * FRAC_PI_2, 0.0));
                }
                _ => {
                    let speed = choose(&mut rng, &[1.5, 2.0, 2.5]);
                    if class == SpeedClass::Stopped {
                        // The crawling car ahead is pulling away; the lane is
                        // effectively opening up.
                        let dx = choose(&mut rng, &[10.0, 15.0, 20.0]);
                        agents.push(vehicle(ego_x + dx, 0.0, speed));
                    } else {
                        // Mid-overtake: the crawling car is a lane over.
                        into_escape(&mut ego);
                        let dx = choose(&mut rng, &[-12.0, -4.0, 4.0, 12.0]);
                        agents.push(vehicle(ego_x + dx, 0.0, speed));
                    }
                }
            }
        }
        2 | 3 => {
            let (class, range) = if archetype == 2 {
                let classes = [
                    SpeedClass::Stopped,
                    SpeedClass::WellBelow,
                    SpeedClass::Below,
                    SpeedClass::Near,
                ];
                (classes[v % 4], [6.0, 9.0, 12.0, 15.0, 18.0][v % 5])
            } else {
                let classes = [SpeedClass::WellBelow, SpeedClass::Below, SpeedClass::Near];
                (classes[v % 3], [22.0, 26.0, 30.0, 34.0][v % 4])
            };
            ego.speed = class_speed(class, &mut rng);
            let mags: &[f64] =
                if archetype == 3 { &[0.5, 1.5, 2.5, 3.5, 5.0] } else { &[0.5, 1.5, 2.5, 3.5] };
            let usable: Vec<f64> = mags.iter().copied().filter(|m| *m <= 0.6 * range).collect();
            let mag = choose(&mut rng, &usable);
            let from_above = rng.gen_bool(0.5);
            let (dy, heading) = if from_above { (mag, -FRAC_PI_2) } else { (-mag, FRAC_PI_2) };
            let dx = (range * range - dy * dy).sqrt();
            let speed = choose(&mut rng, &[1.0, 1.2, 1.4, 1.6]);
            agents.push(walker(ego_x + dx, dy, heading, speed));
        }
        4 => {
            let class = [SpeedClass::Below, SpeedClass::Near][v % 2];
            ego.speed = class_speed(class, &mut rng);
            let dx = [10.0, 14.0, 18.0, 22.0, 26.0, 30.0][v % 6];
            let dy = choose(&mut rng, &[-0.5, 0.0, 0.5]);
            let speed = choose(&mut rng, &[1.5, 2.0, 2.5]);
            agents.push(vehicle(ego_x + dx, dy, speed));
        }
        5 | 7 => {
            let classes = [
                SpeedClass::Stopped,
                SpeedClass::WellBelow,
                SpeedClass::Below,
                SpeedClass::Near,
            ];
            ego.speed = class_speed(classes[v % 4], &mut rng);
            let dx = [8.0, 12.0, 16.0, 20.0, 24.0, 28.0, 32.0][v % 7];
            let dy = choose(&mut rng, &[-0.5, 0.0, 0.5]);
            agents.push(vehicle(ego_x + dx, dy, 0.0));
        }
        6 => {
            let classes = [
                SpeedClass::Stopped,
                SpeedClass::WellBelow,
                SpeedClass::Below,
                SpeedClass::Near,
            ];
            ego.speed = class_speed(classes[v % 4], &mut rng);
            light = TrafficLight::Red;
        }
        other => panic!("unknown archetype {other}"),
    }

    for agent in &mut agents {
        agent.lane_id = sr.lanes.locate(Vec2::new(agent.x, agent.y));
    }

    DrivingContext {
        timestamp: 0.0,
        ego,
        agents,
        lanes: sr.lanes,
        traffic_light: light,
        navigation: Navigation::Straight,
        static_objects: vec![],
    }
}

/// First number after `key` in `line`.
fn field_number(line: &str, key: &str) -> Option<f64> {
    let rest = &line[line.find(key)? + key.len()..];
    let end = rest.find(' ').unwrap_or(rest.len());
    rest[..end].parse().ok()
}

/// Picks the blocked-lane escape archetype from the ego lane's neighbor
/// description.
fn escape_side(text: &str) -> usize {
    let lane = text
        .lines()
        .find_map(|l| l.strip_prefix("Ego vehicle: in lane "))
        .and_then(|rest| rest.split(',').next().and_then(|n| n.parse::<u32>().ok()));
    if let Some(n) = lane {
        let prefix = format!("Lane {n}:");
        if let Some(desc) = text.lines().find(|l| l.starts_with(&prefix)) {
            if desc.contains("right neighbor") {
                return 7;
            }
        }
    }
    5
}

/// Map a prompt (any stage) back to its archetype from the rendered scene
/// text. Returns None for scenes outside the desk families.
///
/// Rules fire in severity order. A crossing walker only counts while it still
/// converges on the ego's path: laterally inside the roadway strip ahead, or
/// bearing and walking direction on opposite sides. An obstacle vehicle only
/// counts inside the ego lane in
/// a forward cone; everything else falls through to the ego-speed rules, so
/// a scene that has calmed down (walker past, obstacle passed, ego stopped)
/// resolves to cruise or accelerate.
pub fn classify(text: &str) -> Option<usize> {
    if text.contains("The traffic light ahead is red.") {
        return Some(6);
    }
    let mut walker_close = false;
    let mut walker_medium = false;
    let mut lane_blocked = false;
    let mut slow_leader = false;
    for line in text.lines() {
        let is_walker = line.starts_with("- VRU ");
        let is_vehicle = line.starts_with("- Vehicle ");
        if !is_walker && !is_vehicle {
            continue;
        }
        let Some(bearing) = field_number(line, "bearing ") else { continue };
        if is_walker && line.contains(", moving across the road") {
            let Some(heading) = field_number(line, "relative heading ") else { continue };
            let Some(range) = field_number(line, "range ") else { continue };
            // Still converging, or laterally inside the roadway strip ahead.
            let lateral = range * bearing.to_radians().sin().abs();
            let toward = lateral <= 2.0 || (bearing >= 0.0) != (heading >= 0.0);
            if toward {
                if line.contains(", very close") || line.contains(", close") {
                    walker_close = true;
                } else if line.contains(", at medium distance") {
                    walker_medium = true;
                }
            }
        }
        if is_vehicle && line.contains(", in the ego lane") && bearing.abs() < 60.0 {
            if line.contains(", stationary") {
                lane_blocked = true;
            } else if line.contains(", moving slower than the ego") {
                slow_leader = true;
            }
        }
    }
    if walker_close {
        return Some(2);
    }
    if walker_medium {
        return Some(3);
    }
    if lane_blocked {
        return Some(escape_side(text));
    }
    if slow_leader {
        return Some(4);
    }
    if text.contains("currently stopped")
        || text.contains("well below the lane speed limit")
        || text.contains("below the lane speed limit")
    {
        return Some(1);
    }
    if text.contains("near the lane speed limit") || text.contains("above the lane speed limit")
    {
        return Some(0);
    }
    None
}

/// Scripted backend that plays the whole teacher committee: per-agent step
/// replies and ballots, constant 0.8 confidence, and a fixed first-person
/// rationale per archetype. `base_seed` must match the workflow seed so the
/// ballot index can be recovered from the request seed.
pub fn committee_backend(embed_dim: usize, base_seed: u64) -> ScriptedBackend {
    let mut backend = ScriptedBackend::new(embed_dim)
        .with_default_reply("Decision: CK-LK. Confidence: 0.5.");
    backend.add_rule(move |messages: &[ChatMessage], params: &GenerationParams| {
        let mut joined = String::new();
        for m in messages {
            joined.push_str(&m.content);
            joined.push('\n');
        }
        let archetype = classify(&joined)?;
        let system = &messages.first()?.content;
        if system.starts_with("You audit") {
            return Some(
                "The reasoning tracks the scene and the choice is consistent.\nConfidence: 0.8"
                    .to_string(),
            );
        }
        if system.starts_with("You write the final") {
            return Some(RATIONALES[archetype].to_string());
        }
        let last = &messages.last()?.content;
        if last.starts_with("Analyze the driving context") {
            return Some(STEP_1_REPLIES[archetype].to_string());
        }
        if last.starts_with("Identify the most important objects") {
            return Some(STEP_2_REPLIES[archetype].to_string());
        }
        if last.starts_with("Based on the step 1 & 2 analysis") {
            let agent = params.seed.unwrap_or(base_seed).wrapping_sub(base_seed) as usize % 10;
            let ballot = BALLOTS[archetype][agent];
            return Some(format!("Step 3: the hazards above settle it.\nDecision: {ballot}"));
        }
        None
    });
    backend
}

/// A held-out query with its teacher label.
#[derive(Debug, Clone)]
pub struct LabeledQuery {
    pub q_md: String,
    pub target: DecisionDistribution,
    pub archetype: usize,
    pub variant: u64,
}

/// Labeled decision prompts for the listed variant range, all archetypes.
pub fn labeled_queries(variants: std::ops::Range<u64>) -> Vec<LabeledQuery> {
    let mut out = Vec::new();
    for archetype in 0..ARCHETYPE_COUNT {
        for variant in variants.clone() {
            let ctx = archetype_context(archetype, variant);
            out.push(LabeledQuery {
                q_md: build_decision_prompt(&ctx).user,
                target: teacher_distribution(archetype),
                archetype,
                variant,
            });
        }
    }
    out
}

/// Run the full committee pipeline over every (archetype, variant) pair and
/// insert the resulting items into a fresh bank. `backend` must be the
/// matching [`committee_backend`].
pub fn collect_archetype_bank(
    backend: &dyn TextBackend,
    variants: std::ops::Range<u64>,
    seed: u64,
) -> Result<(MemoryBank, Vec<WorkflowTranscript>), WorkflowError> {
    let config = WorkflowConfig { seed, ..WorkflowConfig::default() };
    let workflow = Workflow::new(backend, config);
    let mut bank = MemoryBank::new(backend.embed_dimension());
    let mut transcripts = Vec::new();
    for archetype in 0..ARCHETYPE_COUNT {
        for variant in variants.clone() {
            let mut ctx = archetype_context(archetype, variant);
            ctx.timestamp = variant as f64;
            let scenario_id = format!("desk/{}", archetype_name(archetype));
            let (transcript, item) = workflow.collect_memory_item(&ctx, &scenario_id)?;
            bank.insert(item).expect("dimension fixed by backend");
            transcripts.push(transcript);
        }
    }
    Ok((bank, transcripts))
}

/// Direct bank construction without the committee: exact teacher tenths and
/// canonical rationales. Used where the committee detour adds nothing.
pub fn exact_teacher_bank(
    backend: &dyn TextBackend,
    variants: std::ops::Range<u64>,
) -> Result<MemoryBank, crate::gateway::GatewayError> {
    let mut bank = MemoryBank::new(backend.embed_dimension());
    for archetype in 0..ARCHETYPE_COUNT {
        for variant in variants.clone() {
            let ctx = archetype_context(archetype, variant);
            let q_md = build_decision_prompt(&ctx).user;
            let embedding = backend.embed(&q_md)?;
            bank.insert(MemoryItem {
                q_md,
                embedding,
                distribution: teacher_distribution(archetype),
                rationale: teacher_rationale(archetype).to_string(),
                meta: crate::workflow::MemoryMeta {
                    scenario_id: format!("desk/{}", archetype_name(archetype)),
                    timestamp: variant as f64,
                },
            })
            .expect("dimension fixed by backend");
        }
    }
    Ok(bank)
}

fn scenario(
    id: String,
    tag: &str,
    lanes: LaneGraph,
    ego: EgoState,
    agents: Vec<AgentSpec>,
    light: TrafficLight,
    duration: f64,
) -> Scenario {
    Scenario {
        version: SCENARIO_VERSION,
        id,
        lanes,
        ego_init: ego,
        agents,
        traffic_light: light,
        navigation: Navigation::Straight,
        duration,
        tags: vec![tag.to_string()],
    }
}

fn ego_at(lane: u32, y: f64, x: f64, speed: f64) -> EgoState {
    EgoState { x, y, heading: 0.0, speed, lane_id: LaneId(lane) }
}

fn parked_vehicle(id: u32, x: f64, y: f64) -> AgentSpec {
    AgentSpec {
        id,
        kind: AgentKind::Vehicle,
        x,
        y,
        heading: 0.0,
        speed: 0.0,
        behavior: AgentBehavior::Scripted { waypoints: vec![] },
    }
}

/// The committed 20-scenario closed-loop suite: 5 clear-road, 5 VRU-crossing,
/// 5 slow-leader, and 5 lane-blocked (3 left-free, 2 right-free) episodes.
pub fn bundled_suite() -> Vec<Scenario> {
    let mut out = Vec::new();

    for i in 0..5u32 {
        let fi = i as f64;
        // A walker stands clear of the roadway; the road itself is free.
        let bystander = AgentSpec {
            id: 1,
            kind: AgentKind::Vru,
            x: 25.0 + 3.0 * fi,
            y: -3.0,
            heading: -FRAC_PI_2,
            speed: 0.0,
            behavior: AgentBehavior::Scripted { waypoints: vec![] },
        };
        out.push(scenario(
            format!("clear_road_{i}"),
            "clear_road",
            road(160.0, 100.0 + 4.0 * fi, 10.0),
            ego_at(0, 0.0, 5.0 + 2.0 * fi, 7.0 + 0.4 * fi),
            vec![bystander],
            TrafficLight::None,
            22.0,
        ));
    }

    for i in 0..5u32 {
        let fi = i as f64;
        let v = 7.5 + 0.25 * fi;
        // Crossing from the left, timed so an unbraked cruise meets it in the
        // ego lane; the walker clears the roadway and stops just past it.
        let xv = 5.0 + v * 4.4;
        let y0 = 6.2;
        let speed = 1.4;
        out.push(scenario(
            format!("vru_crossing_{i}"),
            "vru_crossing",
            road(160.0, 100.0, 10.0),
            ego_at(0, 0.0, 5.0, v),
            vec![AgentSpec {
                id: 1,
                kind: AgentKind::Vru,
                x: xv,
                y: y0,
                heading: -FRAC_PI_2,
                speed,
                behavior: AgentBehavior::Scripted {
                    waypoints: vec![
                        Waypoint { t: 0.0, x: xv, y: y0, heading: -FRAC_PI_2, speed },
                        Waypoint { t: 7.0, x: xv, y: y0 - 9.8, heading: -FRAC_PI_2, speed },
                        Waypoint {
                            t: 7.4,
                            x: xv,
                            y: y0 - 10.0,
                            heading: -FRAC_PI_2,
                            speed: 0.0,
                        },
                    ],
                },
            }],
            TrafficLight::None,
            26.0,
        ));
    }

    for i in 0..5u32 {
        let fi = i as f64;
        let x0 = 25.0 + 2.0 * fi;
        let speed = 2.0;
        out.push(scenario(
            format!("slow_leader_{i}"),
            "slow_leader",
            road(160.0, 108.0, 10.0),
            ego_at(0, 0.0, 5.0, 7.0 + 0.3 * fi),
            vec![AgentSpec {
                id: 1,
                kind: AgentKind::Vehicle,
                x: x0,
                y: 0.0,
                heading: 0.0,
                speed,
                behavior: AgentBehavior::Scripted {
                    waypoints: vec![
                        Waypoint { t: 0.0, x: x0, y: 0.0, heading: 0.0, speed },
                        Waypoint { t: 40.0, x: x0 + 40.0 * speed, y: 0.0, heading: 0.0, speed },
                    ],
                },
            }],
            TrafficLight::None,
            30.0,
        ));
    }

    for i in 0..3u32 {
        let fi = i as f64;
        out.push(scenario(
            format!("lane_blocked_left_{i}"),
            "lane_blocked",
            road(160.0, 105.0, 10.0),
            ego_at(0, 0.0, 5.0, 6.5 + 0.3 * fi),
            vec![parked_vehicle(1, 28.0 + 2.0 * fi, 0.0)],
            TrafficLight::None,
            30.0,
        ));
    }
    for i in 0..2u32 {
        let fi = i as f64;
        out.push(scenario(
            format!("lane_blocked_right_{i}"),
            "lane_blocked",
            road_right(160.0, 105.0, 10.0),
            ego_at(2, 0.0, 5.0, 6.5 + 0.3 * fi),
            vec![parked_vehicle(1, 30.0 + 2.0 * fi, 0.0)],
            TrafficLight::None,
            30.0,
        ));
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::parse_action;
    use crate::workflow::{aggregate_confidence, Workflow};

    #[test]
    fn teacher_distributions_are_valid_and_concentrated() {
        for archetype in 0..ARCHETYPE_COUNT {
            let dist = teacher_distribution(archetype);
            assert!(dist.is_valid());
            let probs = dist.probs();
            let modal = probs.iter().cloned().fold(0.0, f64::max);
            assert!((0.5..=0.8).contains(&modal), "archetype {archetype} modal {modal}");
            let support = probs.iter().filter(|&&p| p > 0.0).count();
            assert!(support <= 3, "archetype {archetype} support {support}");
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rationales_declare_the_modal_action() {
        for archetype in 0..ARCHETYPE_COUNT {
            let action = parse_action(teacher_rationale(archetype)).unwrap();
            assert_eq!(action, teacher_action(archetype), "archetype {archetype}");
            let lower = teacher_rationale(archetype).to_lowercase();
            for word in ["agent", "vote", "workflow"] {
                assert!(!lower.contains(word), "archetype {archetype} leaks {word}");
            }
        }
    }

    #[test]
    fn rendered_contexts_classify_back_to_their_archetype() {
        for archetype in 0..ARCHETYPE_COUNT {
            for variant in 0u64..30 {
                let ctx = archetype_context(archetype, variant);
                let text = build_decision_prompt(&ctx).user;
                assert_eq!(
                    classify(&text),
                    Some(archetype),
                    "archetype {archetype} variant {variant}:\n{text}"
                );
            }
        }
    }

    #[test]
    fn classify_resolves_calmed_scenes_to_clear_road_archetypes() {
        // A stopped ego with no threat left accelerates rather than idling.
        let mut ctx = archetype_context(1, 0);
        ctx.agents.clear();
        ctx.ego.speed = 0.0;
        assert_eq!(classify(&build_decision_prompt(&ctx).user), Some(1));

        // A walker now moving away from the ego's path, same side as its
        // bearing, is no longer a braking trigger.
        let mut ctx = archetype_context(2, 1);
        ctx.ego.speed = 0.0;
        let w = &mut ctx.agents[0];
        w.heading = if w.y >= 0.0 { FRAC_PI_2 } else { -FRAC_PI_2 };
        assert_eq!(classify(&build_decision_prompt(&ctx).user), Some(1));

        // After the lane change the old obstacle sits in a neighbor lane and
        // stops mattering.
        let mut ctx = archetype_context(5, 2);
        ctx.ego.y = 3.5;
        ctx.ego.lane_id = LaneId(1);
        assert_eq!(classify(&build_decision_prompt(&ctx).user), Some(1));
        let mut ctx = archetype_context(7, 2);
        ctx.ego.y = -3.5;
        ctx.ego.lane_id = LaneId(3);
        assert_eq!(classify(&build_decision_prompt(&ctx).user), Some(1));
    }

    #[test]
    fn classify_separates_escape_sides() {
        let left = build_decision_prompt(&archetype_context(5, 4)).user;
        let right = build_decision_prompt(&archetype_context(7, 4)).user;
        assert_eq!(classify(&left), Some(5));
        assert_eq!(classify(&right), Some(7));
        assert!(left.contains("left neighbor lane 1"));
        assert!(right.contains("right neighbor lane 3"));
    }

    #[test]
    fn contexts_are_deterministic_per_variant_and_vary_across_variants() {
        for archetype in 0..ARCHETYPE_COUNT {
            let a = build_decision_prompt(&archetype_context(archetype, 3)).user;
            let b = build_decision_prompt(&archetype_context(archetype, 3)).user;
            assert_eq!(a, b);
            let distinct: std::collections::BTreeSet<String> = (0..12)
                .map(|v| build_decision_prompt(&archetype_context(archetype, v)).user)
                .collect();
            assert!(
                distinct.len() >= 6,
                "archetype {archetype}: only {} distinct renders in 12 variants",
                distinct.len()
            );
        }
    }

    #[test]
    fn committee_reproduces_exact_tenths() {
        let backend = committee_backend(32, 11);
        let workflow = Workflow::new(&backend, WorkflowConfig { seed: 11, ..Default::default() });
        for archetype in 0..ARCHETYPE_COUNT {
            let ctx = archetype_context(archetype, 0);
            let votes = workflow.run_action_voting(&ctx).unwrap();
            assert_eq!(votes.len(), 10, "archetype {archetype} dropped votes");
            let confidences = workflow.run_confidence_assessment(&votes).unwrap();
            assert!(confidences.iter().all(|c| !c.fallback && c.confidence == 0.8));
            let dist = aggregate_confidence(&votes, &confidences);
            let expected = teacher_distribution(archetype);
            for (p, q) in dist.probs().iter().zip(expected.probs()) {
                assert!((p - q).abs() < 1e-12, "archetype {archetype}: {p} vs {q}");
            }
            let summary = workflow.run_summarization(&votes, &confidences).unwrap();
            assert_eq!(summary, teacher_rationale(archetype));
        }
    }

    #[test]
    fn collected_bank_covers_all_archetypes() {
        let backend = committee_backend(32, 5);
        let (bank, transcripts) = collect_archetype_bank(&backend, 0..2, 5).unwrap();
        assert_eq!(bank.len(), 16);
        assert_eq!(transcripts.len(), 16);
        for archetype in 0..ARCHETYPE_COUNT {
            let id = format!("desk/{}", archetype_name(archetype));
            assert_eq!(bank.items().iter().filter(|it| it.meta.scenario_id == id).count(), 2);
        }
        for item in bank.items() {
            assert!(item.distribution.is_valid());
            assert!(!item.rationale.is_empty());
        }
    }

    #[test]
    fn exact_bank_matches_teacher_labels() {
        let backend = ScriptedBackend::new(16);
        let bank = exact_teacher_bank(&backend, 0..3).unwrap();
        assert_eq!(bank.len(), 24);
        for (i, item) in bank.items().iter().enumerate() {
            let archetype = i / 3;
            assert_eq!(item.distribution.probs(), teacher_distribution(archetype).probs());
        }
    }

    #[test]
    fn retrieval_prefers_same_archetype_variants() {
        let backend = ScriptedBackend::new(256);
        let bank = exact_teacher_bank(&backend, 0..20).unwrap();
        let mut hits = vec![0usize; ARCHETYPE_COUNT];
        let mut totals = vec![0usize; ARCHETYPE_COUNT];
        for archetype in 0..ARCHETYPE_COUNT {
            for variant in 50..60u64 {
                let query_ctx = archetype_context(archetype, variant);
                let q_md = build_decision_prompt(&query_ctx).user;
                let emb = backend.embed(&q_md).unwrap();
                let result = bank.top_k(&emb, 3).unwrap();
                for &idx in &result.indices {
                    totals[archetype] += 1;
                    if idx / 20 == archetype {
                        hits[archetype] += 1;
                    }
                }
            }
        }
        // Single-template families cluster tightly under bag-of-words
        // embeddings; the clear-road and walker families spread over their
        // scene variations, so only an aggregate majority is promised there.
        for archetype in 4..ARCHETYPE_COUNT {
            assert!(
                hits[archetype] * 10 >= totals[archetype] * 8,
                "archetype {archetype}: {}/{} in-archetype",
                hits[archetype],
                totals[archetype]
            );
        }
        let sum: usize = hits.iter().sum();
        let total: usize = totals.iter().sum();
        assert!(sum * 20 >= total * 13, "only {sum}/{total} retrievals stayed in-archetype");
    }

    #[test]
    fn bundled_suite_shape_and_validity() {
        let suite = bundled_suite();
        assert_eq!(suite.len(), 20);
        let mut ids = std::collections::BTreeSet::new();
        let mut by_tag = std::collections::BTreeMap::new();
        for s in &suite {
            s.validate().unwrap();
            assert!(ids.insert(s.id.clone()), "duplicate id {}", s.id);
            *by_tag.entry(s.tags[0].clone()).or_insert(0usize) += 1;
        }
        assert_eq!(by_tag["clear_road"], 5);
        assert_eq!(by_tag["vru_crossing"], 5);
        assert_eq!(by_tag["slow_leader"], 5);
        assert_eq!(by_tag["lane_blocked"], 5);
    }

    #[test]
    fn suite_scenarios_round_trip_through_json() {
        for s in bundled_suite() {
            let json = s.to_json();
            let back = Scenario::from_json(&json).unwrap();
            assert_eq!(back, s);
        }
    }

    fn repo_root() -> std::path::PathBuf {
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
    }

    #[test]
    #[ignore = "rewrites the committed scenario files; run after editing the suite"]
    fn regenerate_committed_suite() {
        let dir = repo_root().join("scenarios");
        std::fs::create_dir_all(&dir).unwrap();
        for s in bundled_suite() {
            std::fs::write(dir.join(format!("{}.json", s.id)), s.to_json()).unwrap();
        }
        let ctx = archetype_context(5, 0);
        std::fs::write(
            repo_root().join("example_context.json"),
            serde_json::to_string_pretty(&ctx).unwrap(),
        )
        .unwrap();
    }

    #[test]
    fn committed_suite_matches_generator() {
        let dir = repo_root().join("scenarios");
        for s in bundled_suite() {
            let path = dir.join(format!("{}.json", s.id));
            let text = std::fs::read_to_string(&path)
                .unwrap_or_else(|_| panic!("missing {}", path.display()));
            assert_eq!(text, s.to_json(), "{} drifted from the generator", s.id);
        }
        let ctx_text =
            std::fs::read_to_string(repo_root().join("example_context.json")).unwrap();
        let ctx: DrivingContext = serde_json::from_str(&ctx_text).unwrap();
        assert_eq!(classify(&build_decision_prompt(&ctx).user), Some(5));
    }
}

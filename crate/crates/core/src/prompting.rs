//! Deterministic text layer: renders a [`DrivingContext`] into prompt text,
//! builds the per-stage chat messages, and parses actions and confidence
//! values back out of model replies.
//!
//! Every build_* function is pure: identical inputs give byte-identical text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{
    enumerate_actions, to_polar, Action, AgentKind, DrivingContext, Lane, Navigation,
    TrafficLight,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> ChatMessage {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> ChatMessage {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> ChatMessage {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    ActionVoting,
    ConfidenceAssessment,
    Summarization,
    MultimodalDecision,
}

/// A system/user prompt pair for one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    pub kind: PromptKind,
}

/// One committee member's reply: the chosen action plus the three raw
/// reasoning-step texts it was parsed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedVote {
    pub action: Action,
    pub raw_step_texts: [String; 3],
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("reasoning step must be 1, 2, or 3, got {0}")]
    InvalidStep(u8),
    #[error("step {step} expects {expected} prior replies, got {got}")]
    ArityMismatch { step: u8, expected: usize, got: usize },
    #[error("no action token found in reply")]
    NoActionFound,
    #[error("no confidence value found in reply")]
    NoConfidenceFound,
    #[error("summarization needs at least one record")]
    EmptyRecords,
}

pub const STEP_NAMES: [&str; 3] =
    ["Holistic Scene Understanding", "Key Object Identification", "Action Selection"];

const STEP_1_INSTRUCTION: &str = "Analyze the driving context, including the road structure, \
traffic light, navigation for the ego vehicle (if applicable), and the movement of surrounding \
vehicles, describe their implications on the ego vehicle's behavior.";

const STEP_2_INSTRUCTION: &str = "Identify the most important objects affecting the ego \
vehicle's behavior (vehicles, VRUs, or static objects). Focus only on critical ones, such as: \
vehicles with lane conflicts, e.g., vehicles in the same lane, vehicles intending to switch \
into the ego lane, vehicles in the lane the ego vehicle will switch to; vehicles at junctions \
and close ahead of the ego vehicle; VRUs within 15 m, with a speed and heading angle suggesting \
potential collision; static objects directly obstructing the ego vehicle's path.";

const STEP_3_TEMPLATE: &str = "Based on the step 1 & 2 analysis and common-sense knowledge, \
predict the best decision from the {action_set}.";

const STEP_3_FORMAT_HINT: &str =
    "State your final choice on its own line as \"Decision: <action code>\".";

pub const CONFIDENCE_INSTRUCTION: &str = "How likely is the above decision-making process to \
be correct? Analyze the response, provide your reasoning concisely, and give your confidence \
(between 0.0 and 1.0) in this response.";

fn action_set_text() -> String {
    let codes: Vec<&str> = enumerate_actions().iter().map(|a| a.code()).collect();
    format!("action set ({})", codes.join(", "))
}

/// Instruction text for one reasoning step (1-based).
pub fn step_instruction(step: u8) -> Result<String, PromptError> {
    match step {
        1 => Ok(STEP_1_INSTRUCTION.to_string()),
        2 => Ok(STEP_2_INSTRUCTION.to_string()),
        3 => Ok(format!(
            "{} {}",
            STEP_3_TEMPLATE.replace("{action_set}", &action_set_text()),
            STEP_3_FORMAT_HINT
        )),
        other => Err(PromptError::InvalidStep(other)),
    }
}

const COORDINATE_DEFINITION: &str = "Coordinate system: every object is described in \
ego-centric polar coordinates. Range is the straight-line distance from the ego vehicle in \
meters. Bearing is the angle from the ego heading in degrees, measured counter-clockwise, so \
positive bearings are to the left and negative bearings are to the right.";

fn action_space_definition() -> String {
    let mut s = String::from(
        "Action space: exactly one action must be chosen. An action combines one longitudinal \
command (accelerate, decelerate, cruise, stop) with one lateral command (keep lane, change \
lane left, change lane right); stopping always keeps the lane. The 10 valid actions are: ",
    );
    let items: Vec<String> =
        enumerate_actions().iter().map(|a| format!("{} ({})", a.code(), a.spelled())).collect();
    s.push_str(&items.join(", "));
    s.push('.');
    s
}

fn guideline_text() -> String {
    format!(
        "Reasoning guideline, to be followed in exactly three steps:\nStep 1 - {}: {}\nStep 2 - \
{}: {}\nStep 3 - {}: {}",
        STEP_NAMES[0],
        STEP_1_INSTRUCTION,
        STEP_NAMES[1],
        STEP_2_INSTRUCTION,
        STEP_NAMES[2],
        STEP_3_TEMPLATE.replace("{action_set}", &action_set_text()),
    )
}

fn round_deg(rad: f64) -> i64 {
    let d = rad.to_degrees().round();
    if d == 0.0 {
        0
    } else {
        d as i64
    }
}

fn ego_speed_descriptor(speed: f64, limit: f64) -> &'static str {
    if speed < 0.3 {
        "currently stopped"
    } else if speed < 0.5 * limit {
        "well below the lane speed limit"
    } else if speed < 0.85 * limit {
        "below the lane speed limit"
    } else if speed <= 1.02 * limit {
        "near the lane speed limit"
    } else {
        "above the lane speed limit"
    }
}

fn proximity_descriptor(range: f64) -> &'static str {
    if range < 8.0 {
        "very close"
    } else if range < 20.0 {
        "close"
    } else if range < 40.0 {
        "at medium distance"
    } else {
        "far away"
    }
}

fn lane_relation(ctx: &DrivingContext, lane: Option<crate::scene::LaneId>) -> String {
    let ego_lane: Option<&Lane> = ctx.lanes.lane(ctx.ego.lane_id);
    match lane {
        None => String::new(),
        Some(id) if id == ctx.ego.lane_id => ", in the ego lane".to_string(),
        Some(id) => {
            if let Some(el) = ego_lane {
                if el.left_neighbor == Some(id) {
                    return ", in the left neighbor lane".to_string();
                }
                if el.right_neighbor == Some(id) {
                    return ", in the right neighbor lane".to_string();
                }
            }
            format!(", in lane {}", id.0)
        }
    }
}

/// Render the scene into deterministic prose. Ranges are printed to 0.1 m,
/// bearings to whole degrees, speeds to 0.1 m/s; agents are listed nearest
/// first. The clock is deliberately left out so equal scenes render equally.
pub fn render_context(ctx: &DrivingContext) -> String {
    let mut out = String::new();

    out.push_str(&format!("Road structure: {} parallel lane(s).\n", ctx.lanes.lanes.len()));
    for lane in &ctx.lanes.lanes {
        out.push_str(&format!("Lane {}: speed limit {:.1} m/s", lane.id.0, lane.speed_limit));
        if let Some(l) = lane.left_neighbor {
            out.push_str(&format!(", left neighbor lane {}", l.0));
        }
        if let Some(r) = lane.right_neighbor {
            out.push_str(&format!(", right neighbor lane {}", r.0));
        }
        out.push_str(".\n");
    }

    let limit = ctx.lanes.lane(ctx.ego.lane_id).map(|l| l.speed_limit).unwrap_or(13.9);
    out.push_str(&format!(
        "Ego vehicle: in lane {}, speed {:.1} m/s, {}.\n",
        ctx.ego.lane_id.0,
        ctx.ego.speed,
        ego_speed_descriptor(ctx.ego.speed, limit)
    ));

    out.push_str(match ctx.traffic_light {
        TrafficLight::Green => "The traffic light ahead is green.\n",
        TrafficLight::Yellow => "The traffic light ahead is yellow.\n",
        TrafficLight::Red => "The traffic light ahead is red.\n",
        TrafficLight::None => "No traffic light governs this road.\n",
    });

    out.push_str(match ctx.navigation {
        Navigation::Straight => "Navigation: follow the current road straight ahead.\n",
        Navigation::TurnLeft => "Navigation: prepare to turn left at the junction ahead.\n",
        Navigation::TurnRight => "Navigation: prepare to turn right at the junction ahead.\n",
        Navigation::LaneChangeLeft => "Navigation: a lane change to the left is requested.\n",
        Navigation::LaneChangeRight => "Navigation: a lane change to the right is requested.\n",
    });

    if ctx.agents.is_empty() {
        out.push_str("There are no surrounding vehicles or VRUs.\n");
    } else {
        let mut order: Vec<usize> = (0..ctx.agents.len()).collect();
        order.sort_by(|&i, &j| {
            let a = &ctx.agents[i];
            let b = &ctx.agents[j];
            let ra = to_polar(&ctx.ego, a).range;
            let rb = to_polar(&ctx.ego, b).range;
            ra.partial_cmp(&rb).unwrap().then(a.id.cmp(&b.id))
        });
        out.push_str("Surrounding agents:\n");
        for i in order {
            let agent = &ctx.agents[i];
            let obs = to_polar(&ctx.ego, agent);
            let kind = match agent.kind {
                AgentKind::Vehicle => "Vehicle",
                AgentKind::Vru => "VRU",
                AgentKind::Static => "Object",
            };
            let mut line = format!(
                "- {} {}: range {:.1} m, bearing {} deg, speed {:.1} m/s, relative heading {} \
deg, {}",
                kind,
                agent.id,
                obs.range,
                round_deg(obs.bearing),
                agent.speed,
                round_deg(obs.relative_heading),
                proximity_descriptor(obs.range)
            );
            if agent.speed < 0.1 {
                line.push_str(", stationary");
            } else if obs.relative_speed <= -0.5 {
                line.push_str(", moving slower than the ego");
            } else if obs.relative_speed >= 0.5 {
                line.push_str(", moving faster than the ego");
            }
            if agent.kind == AgentKind::Vru
                && agent.speed >= 0.1
                && (45.0..135.0).contains(&obs.relative_heading.to_degrees().abs())
            {
                line.push_str(", moving across the road");
            }
            line.push_str(&lane_relation(ctx, agent.lane_id));
            line.push_str(".\n");
            out.push_str(&line);
        }
    }

    if !ctx.static_objects.is_empty() {
        out.push_str("Static objects:\n");
        let ego_lane = ctx.lanes.lane(ctx.ego.lane_id);
        for obj in &ctx.static_objects {
            let dx = obj.x - ctx.ego.x;
            let dy = obj.y - ctx.ego.y;
            let range = (dx * dx + dy * dy).sqrt();
            let bearing = crate::geom::wrap_to_pi(dy.atan2(dx) - ctx.ego.heading);
            let mut line = format!(
                "- {} {}: range {:.1} m, bearing {} deg",
                obj.description,
                obj.id,
                range,
                round_deg(bearing)
            );
            let pos = crate::geom::Vec2::new(obj.x, obj.y);
            let located = ctx.lanes.locate(pos);
            if located == Some(ctx.ego.lane_id) && bearing.to_degrees().abs() < 60.0 {
                line.push_str(", directly obstructing the ego lane");
            } else if let (Some(el), Some(id)) = (ego_lane, located) {
                if el.left_neighbor == Some(id) {
                    line.push_str(", in the left neighbor lane");
                } else if el.right_neighbor == Some(id) {
                    line.push_str(", in the right neighbor lane");
                }
            }
            line.push_str(".\n");
            out.push_str(&line);
        }
    }

    out
}

/// Committee-voting prompt: scene rendering plus coordinate-system, action
/// space, and stepwise reasoning guideline.
pub fn build_action_voting_prompt(ctx: &DrivingContext) -> PromptBundle {
    let system = format!(
        "You are the decision-making module of an autonomous vehicle.\n\n{}\n\n{}\n\n{}",
        COORDINATE_DEFINITION,
        action_space_definition(),
        guideline_text()
    );
    PromptBundle { system, user: render_context(ctx), kind: PromptKind::ActionVoting }
}

/// Plain decision prompt: same rendering, no reasoning guideline. Used to
/// query the distilled model and to key the retrieval memory.
pub fn build_decision_prompt(ctx: &DrivingContext) -> PromptBundle {
    let system = format!(
        "You are the decision-making module of an autonomous vehicle. Choose one driving action \
and explain it briefly in the first person.\n\n{}\n\n{}",
        COORDINATE_DEFINITION,
        action_space_definition()
    );
    PromptBundle { system, user: render_context(ctx), kind: PromptKind::MultimodalDecision }
}

/// Chat messages for one reasoning step: system, scene, then instruction and
/// prior replies interleaved. Steps are 1-based; `prior_steps` carries the
/// step-1..step-(k-1) replies.
pub fn build_step_messages(
    bundle: &PromptBundle,
    step: u8,
    prior_steps: &[String],
) -> Result<Vec<ChatMessage>, PromptError> {
    if !(1..=3).contains(&step) {
        return Err(PromptError::InvalidStep(step));
    }
    let expected = (step - 1) as usize;
    if prior_steps.len() != expected {
        return Err(PromptError::ArityMismatch { step, expected, got: prior_steps.len() });
    }
    let mut messages = vec![
        ChatMessage::system(bundle.system.clone()),
        ChatMessage::user(bundle.user.clone()),
    ];
    for k in 1..=step {
        messages.push(ChatMessage::user(step_instruction(k)?));
        if (k as usize) <= prior_steps.len() {
            messages.push(ChatMessage::assistant(prior_steps[(k - 1) as usize].clone()));
        }
    }
    Ok(messages)
}

/// Confidence-assessment prompt over a finished voting exchange.
pub fn build_confidence_prompt(voting: &PromptBundle, answer: &str) -> PromptBundle {
    let user = format!(
        "[Question]\n{}\n\n[Response]\n{}\n\n{} End with a line \"Confidence: <value>\".",
        voting.user, answer, CONFIDENCE_INSTRUCTION
    );
    PromptBundle {
        system: "You audit the reasoning of a driving decision-maker.".to_string(),
        user,
        kind: PromptKind::ConfidenceAssessment,
    }
}

/// Summarization prompt over the confidence-assessment records, in committee
/// index order. The instruction forbids any mention of the committee itself so
/// the written rationale reads as a single reasoner's voice.
pub fn build_summarization_prompt(
    records: &[(String, String)],
) -> Result<PromptBundle, PromptError> {
    if records.is_empty() {
        return Err(PromptError::EmptyRecords);
    }
    let mut user = String::new();
    for (i, (q, a)) in records.iter().enumerate() {
        user.push_str(&format!("[Record {} question]\n{}\n[Record {} answer]\n{}\n\n", i + 1, q, i + 1, a));
    }
    user.push_str(
        "Considering all records above, state the recommended driving decision and write a \
concise first-person rationale, as if you reasoned about the scene entirely on your own. Do \
not mention other agents, votes, records, assessments, or any multi-step process. Begin with \
the line \"Decision: <action code>\".",
    );
    Ok(PromptBundle {
        system: "You write the final driving decision with its rationale.".to_string(),
        user,
        kind: PromptKind::Summarization,
    })
}

/// Extract the chosen action from a reply; the last mention of any action
/// code or spelled-out form wins, case-insensitively.
pub fn parse_action(text: &str) -> Result<Action, PromptError> {
    let lower = text.to_lowercase();
    let mut best: Option<(usize, Action)> = None;
    for action in enumerate_actions() {
        for pattern in [action.code().to_lowercase(), action.spelled()] {
            if let Some(pos) = lower.rfind(&pattern) {
                if best.map_or(true, |(p, _)| pos > p) {
                    best = Some((pos, action));
                }
            }
        }
    }
    best.map(|(_, a)| a).ok_or(PromptError::NoActionFound)
}

fn extract_numbers(text: &str) -> Vec<(usize, f64)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'.' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit()
            {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if let Ok(v) = text[start..i].parse::<f64>() {
                out.push((start, v));
            }
        } else {
            i += 1;
        }
    }
    out
}

/// Extract a confidence in [0, 1] from a reply: the last number after the
/// last "confidence" cue, or the last number anywhere if the cue is absent.
/// Out-of-range values are clamped.
pub fn parse_confidence(text: &str) -> Result<f64, PromptError> {
    let numbers = extract_numbers(text);
    if numbers.is_empty() {
        return Err(PromptError::NoConfidenceFound);
    }
    let cue_pos = text.to_lowercase().rfind("confidence");
    let pick = match cue_pos {
        Some(cue) => numbers.iter().filter(|(pos, _)| *pos > cue).next_back(),
        None => None,
    }
    .or_else(|| numbers.last());
    pick.map(|(_, v)| v.clamp(0.0, 1.0)).ok_or(PromptError::NoConfidenceFound)
}

//! Three-stage teacher pipeline: a committee votes on the action with
//! stepwise reasoning, every vote gets an independent confidence assessment,
//! and a summarizer writes the final rationale. Vote confidences are
//! aggregated into a normalized decision distribution and packed, together
//! with the query embedding, into a memory item.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{generate_batch, Embedding, GatewayError, GenerationParams, TextBackend};
use crate::prompting::{
    build_action_voting_prompt, build_confidence_prompt, build_decision_prompt,
    build_summarization_prompt, build_step_messages, parse_action, parse_confidence,
    ChatMessage, ParsedVote, PromptBundle,
};
use crate::scene::{Action, DecisionDistribution, DrivingContext, N_ACTIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub agent_index: usize,
    pub vote: ParsedVote,
    pub q_av: PromptBundle,
    /// The three step replies joined with stage separators.
    pub a_av: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub agent_index: usize,
    pub q_ca: PromptBundle,
    pub a_ca: String,
    pub confidence: f64,
    /// True when the confidence came from the fallback rule instead of a
    /// parsed number.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowTranscript {
    pub context: DrivingContext,
    pub votes: Vec<VoteRecord>,
    pub confidences: Vec<ConfidenceRecord>,
    pub summary: String,
    pub distribution: DecisionDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryMeta {
    pub scenario_id: String,
    pub timestamp: f64,
}

/// One distilled demonstration: plain decision query, its embedding, the
/// aggregated action distribution, and the written rationale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub q_md: String,
    pub embedding: Embedding,
    pub distribution: DecisionDistribution,
    pub rationale: String,
    pub meta: MemoryMeta,
}

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("every voting agent failed to produce a parseable action")]
    AllVotesFailed,
    #[error("vote list must be nonempty")]
    EmptyVotes,
    #[error("summary still leaks committee internals after one rewrite")]
    LeakDetected,
    #[error("voting requires temperature > 0 and at least one agent")]
    InvalidParams,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowConfig {
    pub n_agents: usize,
    pub vote_temperature: f64,
    pub max_tokens: u32,
    pub max_concurrency: usize,
    pub seed: u64,
}

impl Default for WorkflowConfig {
    fn default() -> WorkflowConfig {
        WorkflowConfig {
            n_agents: 10,
            vote_temperature: 0.7,
            max_tokens: 1024,
            max_concurrency: 4,
            seed: 0,
        }
    }
}

/// Core of the confidence aggregation: p(a) = sum of confidences of the votes
/// for a, normalized by the total confidence. When every confidence is zero
/// the distribution falls back to uniform over the voted actions.
pub fn aggregate_votes(pairs: &[(Action, f64)]) -> DecisionDistribution {
    assert!(!pairs.is_empty(), "aggregate_votes needs at least one vote");
    let mut raw = [0.0f64; N_ACTIONS];
    let mut z = 0.0;
    for &(action, confidence) in pairs {
        raw[action.index()] += confidence;
        z += confidence;
    }
    if z <= 0.0 {
        let mut voted = [0.0f64; N_ACTIONS];
        for &(action, _) in pairs {
            voted[action.index()] = 1.0;
        }
        return DecisionDistribution::normalize(&voted).expect("nonempty vote set");
    }
    DecisionDistribution::normalize(&raw).expect("positive total confidence")
}

/// Record-level wrapper over [`aggregate_votes`]; lists must be aligned by
/// agent index.
pub fn aggregate_confidence(
    votes: &[VoteRecord],
    confidences: &[ConfidenceRecord],
) -> DecisionDistribution {
    assert_eq!(votes.len(), confidences.len(), "vote/confidence lists must align");
    let pairs: Vec<(Action, f64)> = votes
        .iter()
        .zip(confidences)
        .map(|(v, c)| {
            assert_eq!(v.agent_index, c.agent_index, "agent indices must align");
            (v.vote.action, c.confidence)
        })
        .collect();
    aggregate_votes(&pairs)
}

const FORBIDDEN_SUMMARY_TOKENS: [&str; 3] = ["agent", "vote", "workflow"];

fn summary_leaks(text: &str) -> bool {
    let lower = text.to_lowercase();
    FORBIDDEN_SUMMARY_TOKENS.iter().any(|t| lower.contains(t))
}

fn join_steps(steps: &[String; 3]) -> String {
    format!("[Step 1]\n{}\n\n[Step 2]\n{}\n\n[Step 3]\n{}", steps[0], steps[1], steps[2])
}

pub struct Workflow<'a> {
    backend: &'a dyn TextBackend,
    pub config: WorkflowConfig,
}

impl<'a> Workflow<'a> {
    pub fn new(backend: &'a dyn TextBackend, config: WorkflowConfig) -> Workflow<'a> {
        Workflow { backend, config }
    }

    fn vote_params(&self, agent_index: usize, retry: bool) -> GenerationParams {
        let offset = if retry { self.config.n_agents } else { 0 };
        GenerationParams {
            temperature: self.config.vote_temperature,
            top_k: None,
            max_tokens: self.config.max_tokens,
            seed: Some(self.config.seed + (offset + agent_index) as u64),
        }
    }

    /// Run one three-step voting conversation for every listed agent; agents
    /// advance through the steps in lockstep waves so each wave can use the
    /// batch path. Returns per-agent step texts, None where generation failed.
    fn run_vote_wave(
        &self,
        bundle: &PromptBundle,
        agents: &[usize],
        retry: bool,
    ) -> Vec<Option<[String; 3]>> {
        let mut steps: Vec<Option<Vec<String>>> = agents.iter().map(|_| Some(Vec::new())).collect();
        for step in 1..=3u8 {
            let mut wave: Vec<(usize, Vec<ChatMessage>)> = Vec::new();
            for slot in 0..agents.len() {
                if let Some(prior) = &steps[slot] {
                    let messages = build_step_messages(bundle, step, prior)
                        .expect("step arity maintained by construction");
                    wave.push((slot, messages));
                }
            }
            let requests: Vec<(Vec<ChatMessage>, GenerationParams)> = wave
                .iter()
                .map(|(slot, messages)| {
                    (messages.clone(), self.vote_params(agents[*slot], retry))
                })
                .collect();
            let replies = generate_batch(self.backend, &requests, self.config.max_concurrency);
            for ((slot, _), reply) in wave.into_iter().zip(replies) {
                match reply {
                    Ok(text) => steps[slot].as_mut().unwrap().push(text),
                    Err(_) => steps[slot] = None,
                }
            }
        }
        steps
            .into_iter()
            .map(|s| s.map(|v| <[String; 3]>::try_from(v).expect("three steps")))
            .collect()
    }

    /// Stage 1: the committee votes. Agents whose reply fails to parse (or
    /// whose generation fails) are retried once with a fresh seed, then
    /// dropped.
    pub fn run_action_voting(
        &self,
        ctx: &DrivingContext,
    ) -> Result<Vec<VoteRecord>, WorkflowError> {
        if self.config.n_agents == 0 || self.config.vote_temperature <= 0.0 {
            return Err(WorkflowError::InvalidParams);
        }
        let bundle = build_action_voting_prompt(ctx);
        let agents: Vec<usize> = (0..self.config.n_agents).collect();

        let mut outcomes: Vec<Option<[String; 3]>> = self.run_vote_wave(&bundle, &agents, false);
        let failed: Vec<usize> = agents
            .iter()
            .copied()
            .filter(|&i| match &outcomes[i] {
                Some(steps) => parse_action(&steps[2]).is_err(),
                None => true,
            })
            .collect();
        if !failed.is_empty() {
            let retried = self.run_vote_wave(&bundle, &failed, true);
            for (&agent, outcome) in failed.iter().zip(retried) {
                outcomes[agent] = outcome;
            }
        }

        let mut records = Vec::new();
        for (agent_index, outcome) in outcomes.into_iter().enumerate() {
            let Some(steps) = outcome else { continue };
            let Ok(action) = parse_action(&steps[2]) else { continue };
            records.push(VoteRecord {
                agent_index,
                a_av: join_steps(&steps),
                vote: ParsedVote { action, raw_step_texts: steps },
                q_av: bundle.clone(),
            });
        }
        if records.is_empty() {
            return Err(WorkflowError::AllVotesFailed);
        }
        Ok(records)
    }

    /// Stage 2: one independent assessment per vote, at temperature zero.
    /// Each prompt sees only its own vote. Unparseable replies fall back to
    /// confidence 0.5 and are flagged.
    pub fn run_confidence_assessment(
        &self,
        votes: &[VoteRecord],
    ) -> Result<Vec<ConfidenceRecord>, WorkflowError> {
        if votes.is_empty() {
            return Err(WorkflowError::EmptyVotes);
        }
        let bundles: Vec<PromptBundle> =
            votes.iter().map(|v| build_confidence_prompt(&v.q_av, &v.a_av)).collect();
        let requests: Vec<(Vec<ChatMessage>, GenerationParams)> = bundles
            .iter()
            .map(|b| {
                let messages =
                    vec![ChatMessage::system(b.system.clone()), ChatMessage::user(b.user.clone())];
                let mut params = GenerationParams::deterministic();
                params.max_tokens = self.config.max_tokens;
                (messages, params)
            })
            .collect();
        let replies = generate_batch(self.backend, &requests, self.config.max_concurrency);

        let mut records = Vec::new();
        for ((vote, bundle), reply) in votes.iter().zip(bundles).zip(replies) {
            let (a_ca, confidence, fallback) = match reply {
                Ok(text) => match parse_confidence(&text) {
                    Ok(c) => (text, c, false),
                    Err(_) => (text, 0.5, true),
                },
                Err(_) => (String::new(), 0.5, true),
            };
            records.push(ConfidenceRecord {
                agent_index: vote.agent_index,
                q_ca: bundle,
                a_ca,
                confidence,
                fallback,
            });
        }
        Ok(records)
    }

    /// Stage 3: summarize the assessment records into one first-person
    /// rationale at temperature zero. A reply that mentions the committee is
    /// rejected and rewritten once; a second leak is an error.
    pub fn run_summarization(
        &self,
        votes: &[VoteRecord],
        confidences: &[ConfidenceRecord],
    ) -> Result<String, WorkflowError> {
        if votes.is_empty() || confidences.is_empty() {
            return Err(WorkflowError::EmptyVotes);
        }
        let records: Vec<(String, String)> =
            confidences.iter().map(|c| (c.q_ca.user.clone(), c.a_ca.clone())).collect();
        let bundle = build_summarization_prompt(&records).expect("nonempty records");
        let mut params = GenerationParams::deterministic();
        params.max_tokens = self.config.max_tokens;
        let mut messages =
            vec![ChatMessage::system(bundle.system), ChatMessage::user(bundle.user)];
        let first = self.backend.generate(&messages, &params)?;
        if !summary_leaks(&first) {
            return Ok(first);
        }
        messages.push(ChatMessage::assistant(first));
        messages.push(ChatMessage::user(
            "Rewrite the answer strictly in the first person, without referring to agents, \
votes, records, assessments, or any multi-step process."
                .to_string(),
        ));
        let second = self.backend.generate(&messages, &params)?;
        if summary_leaks(&second) {
            return Err(WorkflowError::LeakDetected);
        }
        Ok(second)
    }

    /// Full pass over one context: vote, assess, aggregate, summarize, embed.
    pub fn collect_memory_item(
        &self,
        ctx: &DrivingContext,
        scenario_id: &str,
    ) -> Result<(WorkflowTranscript, MemoryItem), WorkflowError> {
        let votes = self.run_action_voting(ctx)?;
        let confidences = self.run_confidence_assessment(&votes)?;
        let distribution = aggregate_confidence(&votes, &confidences);
        let summary = self.run_summarization(&votes, &confidences)?;
        let q_md = build_decision_prompt(ctx).user;
        let embedding = self.backend.embed(&q_md)?;
        let item = MemoryItem {
            q_md,
            embedding,
            distribution: distribution.clone(),
            rationale: summary.clone(),
            meta: MemoryMeta { scenario_id: scenario_id.to_string(), timestamp: ctx.timestamp },
        };
        let transcript =
            WorkflowTranscript { context: ctx.clone(), votes, confidences, summary, distribution };
        Ok((transcript, item))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;
    use crate::geom::{Polygon, Vec2};
    use crate::scene::{EgoState, Lane, LaneGraph, LaneId, Navigation, TrafficLight};
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn test_ctx() -> DrivingContext {
        DrivingContext {
            timestamp: 4.5,
            ego: EgoState { x: 10.0, y: 0.0, heading: 0.0, speed: 6.0, lane_id: LaneId(0) },
            agents: vec![],
            lanes: LaneGraph {
                lanes: vec![Lane {
                    id: LaneId(0),
                    centerline: vec![Vec2::new(0.0, 0.0), Vec2::new(200.0, 0.0)],
                    width: 3.5,
                    speed_limit: 12.0,
                    left_neighbor: None,
                    right_neighbor: None,
                }],
                goal_region: Polygon::rect(190.0, -2.0, 200.0, 2.0),
            },
            traffic_light: TrafficLight::Green,
            navigation: Navigation::Straight,
            static_objects: vec![],
        }
    }

    fn action(code: &str) -> Action {
        Action::from_code(code).unwrap()
    }

    /// Backend that answers reasoning steps with stubs and step 3 with a
    /// seed-indexed vote from `ballots`.
    fn committee_backend(ballots: &'static [&'static str], base_seed: u64) -> ScriptedBackend {
        let mut backend = ScriptedBackend::new(16);
        backend.add_rule(move |messages, params| {
            let last = &messages.last().unwrap().content;
            if last.contains("best decision") {
                let agent = (params.seed.unwrap_or(0) - base_seed) as usize;
                let idx = agent % ballots.len();
                return Some(format!("Decision: {}. (ballot {agent})", ballots[idx]));
            }
            if last.contains("Analyze the driving context") {
                return Some("The road is clear.".to_string());
            }
            if last.contains("Identify the most important") {
                return Some("No critical objects.".to_string());
            }
            None
        });
        backend
    }

    fn config(n: usize, seed: u64) -> WorkflowConfig {
        WorkflowConfig { n_agents: n, seed, ..WorkflowConfig::default() }
    }

    #[test]
    fn voting_unanimous() {
        let backend = committee_backend(&["CK-LK"], 0);
        let wf = Workflow::new(&backend, config(10, 0));
        let votes = wf.run_action_voting(&test_ctx()).unwrap();
        assert_eq!(votes.len(), 10);
        assert!(votes.iter().all(|v| v.vote.action == action("CK-LK")));
        assert!(votes[0].a_av.contains("[Step 1]"));
        assert!(votes[0].a_av.contains("[Step 3]"));
    }

    #[test]
    fn voting_preserves_agent_action_mapping() {
        let ballots: &[&str] = &[
            "AC-LK", "AC-LK", "AC-LK", "AC-LK", "AC-LK", "AC-LK", "CK-LK", "CK-LK", "CK-LK",
            "CK-LK",
        ];
        let backend = committee_backend(ballots, 0);
        let wf = Workflow::new(&backend, config(10, 0));
        let votes = wf.run_action_voting(&test_ctx()).unwrap();
        for v in &votes {
            assert_eq!(v.vote.action, action(ballots[v.agent_index]));
        }
    }

    #[test]
    fn voting_all_unparseable_fails() {
        let backend = ScriptedBackend::new(16).with_default_reply("I cannot decide.");
        let wf = Workflow::new(&backend, config(4, 0));
        assert!(matches!(
            wf.run_action_voting(&test_ctx()),
            Err(WorkflowError::AllVotesFailed)
        ));
    }

    #[test]
    fn voting_retry_uses_fresh_seed_then_drops() {
        // Seeds 0..4 fail to vote; retry seeds 4..8 succeed only for agent 0.
        let mut backend = ScriptedBackend::new(16);
        backend.add_rule(|messages, params| {
            let last = &messages.last().unwrap().content;
            if last.contains("best decision") {
                let seed = params.seed.unwrap_or(0);
                return Some(if seed == 4 {
                    "Decision: DC-LK.".to_string()
                } else {
                    "no comment".to_string()
                });
            }
            Some("step text".to_string())
        });
        let wf = Workflow::new(&backend, config(4, 0));
        let votes = wf.run_action_voting(&test_ctx()).unwrap();
        assert_eq!(votes.len(), 1);
        assert_eq!(votes[0].agent_index, 0);
        assert_eq!(votes[0].vote.action, action("DC-LK"));
    }

    #[test]
    fn voting_rejects_bad_params() {
        let backend = ScriptedBackend::new(16);
        let mut cfg = config(4, 0);
        cfg.vote_temperature = 0.0;
        let wf = Workflow::new(&backend, cfg);
        assert!(matches!(wf.run_action_voting(&test_ctx()), Err(WorkflowError::InvalidParams)));
    }

    fn assessed_backend() -> ScriptedBackend {
        let mut backend = committee_backend(&["CK-LK"], 0);
        backend.add_rule(|messages, _| {
            // The summarization prompt quotes the assessment question, so key
            // on the last turn alone.
            let last = &messages.last().unwrap().content;
            (last.contains("How likely") && !last.contains("Considering all records"))
                .then(|| "Sound reasoning. Confidence: 0.8".to_string())
        });
        backend
    }

    #[test]
    fn confidence_assessment_parses_and_isolates() {
        let backend = assessed_backend();
        let wf = Workflow::new(&backend, config(3, 0));
        let votes = wf.run_action_voting(&test_ctx()).unwrap();
        let confs = wf.run_confidence_assessment(&votes).unwrap();
        assert_eq!(confs.len(), 3);
        for (v, c) in votes.iter().zip(&confs) {
            assert_eq!(c.confidence, 0.8);
            assert!(!c.fallback);
            // Prompt carries its own vote and no other ballot.
            assert!(c.q_ca.user.contains(&format!("(ballot {})", v.agent_index)));
            for other in votes.iter().filter(|o| o.agent_index != v.agent_index) {
                assert!(!c.q_ca.user.contains(&format!("(ballot {})", other.agent_index)));
            }
        }
        assert!(matches!(
            wf.run_confidence_assessment(&[]),
            Err(WorkflowError::EmptyVotes)
        ));
    }

    #[test]
    fn confidence_fallback_flags_record() {
        let ballots: &[&str] = &["AC-LK", "CK-LK", "DC-LK"];
        let mut backend = committee_backend(ballots, 0);
        backend.add_rule(|messages, _| {
            let text = messages.iter().map(|m| m.content.as_str()).collect::<String>();
            if !text.contains("How likely") {
                return None;
            }
            Some(if text.contains("(ballot 0)") {
                "Confidence: 0.9".to_string()
            } else if text.contains("(ballot 1)") {
                "Confidence: 0.5".to_string()
            } else {
                "hard to say".to_string()
            })
        });
        let wf = Workflow::new(&backend, config(3, 0));
        let votes = wf.run_action_voting(&test_ctx()).unwrap();
        let confs = wf.run_confidence_assessment(&votes).unwrap();
        assert_eq!(confs[0].confidence, 0.9);
        assert_eq!(confs[1].confidence, 0.5);
        assert_eq!(confs[2].confidence, 0.5);
        assert!(!confs[0].fallback && !confs[1].fallback);
        assert!(confs[2].fallback);
    }

    #[test]
    fn aggregate_single_mode() {
        let pairs = vec![(action("AC-LK"), 0.9), (action("AC-LK"), 0.8), (action("AC-LK"), 0.7)];
        let d = aggregate_votes(&pairs);
        assert_eq!(d.prob(action("AC-LK")), 1.0);
    }

    #[test]
    fn aggregate_weighted_split() {
        let pairs = vec![(action("CK-LK"), 0.8), (action("CK-LK"), 0.6), (action("AC-LK"), 0.6)];
        let d = aggregate_votes(&pairs);
        assert!((d.prob(action("CK-LK")) - 0.7).abs() < 1e-12);
        assert!((d.prob(action("AC-LK")) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn aggregate_zero_total_falls_back_to_voted_uniform() {
        let pairs = vec![(action("AC-LK"), 0.0), (action("CK-LK"), 0.0)];
        let d = aggregate_votes(&pairs);
        assert_eq!(d.prob(action("AC-LK")), 0.5);
        assert_eq!(d.prob(action("CK-LK")), 0.5);
    }

    #[test]
    fn summarization_clean_and_leaky_paths() {
        let attempts = Arc::new(AtomicUsize::new(0));
        let a2 = attempts.clone();
        let mut backend = assessed_backend();
        backend.add_rule(move |messages, _| {
            let last = &messages.last().unwrap().content;
            if last.contains("Considering all records") {
                a2.fetch_add(1, Ordering::SeqCst);
                return Some("The agents voted for lane keeping.".to_string());
            }
            if last.contains("Rewrite the answer") {
                a2.fetch_add(1, Ordering::SeqCst);
                return Some("Decision: CK-LK. I keep my lane; the road ahead is clear.".to_string());
            }
            None
        });
        let wf = Workflow::new(&backend, config(2, 0));
        let votes = wf.run_action_voting(&test_ctx()).unwrap();
        let confs = wf.run_confidence_assessment(&votes).unwrap();
        let summary = wf.run_summarization(&votes, &confs).unwrap();
        assert!(summary.contains("I keep my lane"));
        assert_eq!(attempts.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn summarization_double_leak_errors() {
        let mut backend = assessed_backend();
        backend.add_rule(|messages, _| {
            let last = &messages.last().unwrap().content;
            (last.contains("Considering all records") || last.contains("Rewrite the answer"))
                .then(|| "The workflow chose CK-LK.".to_string())
        });
        let wf = Workflow::new(&backend, config(2, 0));
        let votes = wf.run_action_voting(&test_ctx()).unwrap();
        let confs = wf.run_confidence_assessment(&votes).unwrap();
        assert!(matches!(
            wf.run_summarization(&votes, &confs),
            Err(WorkflowError::LeakDetected)
        ));
    }

    fn summarizing_backend() -> ScriptedBackend {
        let mut backend = assessed_backend();
        backend.add_rule(|messages, _| {
            messages
                .last()
                .unwrap()
                .content
                .contains("Considering all records")
                .then(|| "Decision: CK-LK. I hold my lane and speed.".to_string())
        });
        backend
    }

    #[test]
    fn collect_memory_item_end_to_end() {
        let backend = summarizing_backend();
        let wf = Workflow::new(&backend, config(5, 0));
        let ctx = test_ctx();
        let (transcript, item) = wf.collect_memory_item(&ctx, "desk-000").unwrap();
        assert_eq!(transcript.votes.len(), 5);
        assert_eq!(transcript.confidences.len(), 5);
        assert_eq!(item.distribution.prob(action("CK-LK")), 1.0);
        assert_eq!(item.rationale, "Decision: CK-LK. I hold my lane and speed.");
        assert_eq!(item.embedding.dimension(), 16);
        assert_eq!(item.meta.scenario_id, "desk-000");
        assert_eq!(item.meta.timestamp, 4.5);
        assert!(item.q_md.contains("no surrounding vehicles"));

        let (_, again) = wf.collect_memory_item(&ctx, "desk-000").unwrap();
        assert_eq!(item, again);
    }

    fn arb_pairs() -> impl Strategy<Value = Vec<(usize, f64)>> {
        proptest::collection::vec((0..N_ACTIONS, 0.0f64..1.0), 1..12)
    }

    proptest! {
        #[test]
        fn aggregate_matches_double_loop(pairs in arb_pairs()) {
            let typed: Vec<(Action, f64)> =
                pairs.iter().map(|&(i, c)| (Action::from_index(i).unwrap(), c)).collect();
            let got = aggregate_votes(&typed);

            let z: f64 = typed.iter().map(|&(_, c)| c).sum();
            prop_assume!(z > 0.0);
            for a in crate::scene::enumerate_actions() {
                let mut num = 0.0;
                for &(va, c) in &typed {
                    if va == a {
                        num += c;
                    }
                }
                prop_assert!((got.prob(a) - num / z).abs() <= 1e-12);
            }
        }

        #[test]
        fn aggregate_permutation_invariant(pairs in arb_pairs(), seed in 0u64..1000) {
            let typed: Vec<(Action, f64)> =
                pairs.iter().map(|&(i, c)| (Action::from_index(i).unwrap(), c)).collect();
            let base = aggregate_votes(&typed);
            let mut shuffled = typed.clone();
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted = aggregate_votes(&shuffled);
            for a in crate::scene::enumerate_actions() {
                prop_assert!((base.prob(a) - permuted.prob(a)).abs() <= 1e-12);
            }
        }

        #[test]
        fn aggregate_scale_invariant(pairs in arb_pairs(), k in 0.01f64..100.0) {
            let typed: Vec<(Action, f64)> =
                pairs.iter().map(|&(i, c)| (Action::from_index(i).unwrap(), c)).collect();
            prop_assume!(typed.iter().map(|&(_, c)| c).sum::<f64>() > 0.0);
            let scaled: Vec<(Action, f64)> =
                typed.iter().map(|&(a, c)| (a, c * k)).collect();
            let base = aggregate_votes(&typed);
            let got = aggregate_votes(&scaled);
            for a in crate::scene::enumerate_actions() {
                prop_assert!((base.prob(a) - got.prob(a)).abs() <= 1e-9);
            }
        }

        #[test]
        fn aggregate_support_equals_distinct_votes(pairs in arb_pairs()) {
            let typed: Vec<(Action, f64)> = pairs
                .iter()
                .map(|&(i, c)| (Action::from_index(i).unwrap(), c + 0.01))
                .collect();
            let got = aggregate_votes(&typed);
            let distinct: std::collections::BTreeSet<usize> =
                typed.iter().map(|&(a, _)| a.index()).collect();
            let nonzero = got.probs().iter().filter(|&&p| p > 0.0).count();
            prop_assert_eq!(nonzero, distinct.len());
        }
    }
}

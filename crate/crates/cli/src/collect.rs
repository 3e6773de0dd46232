//! Committee collection over a scenario suite. Each replan tick yields one
//! memory item; reruns skip ticks already present in the bank, so an
//! interrupted collection resumes where it stopped.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context as _;
use clap::Args;

use confdrive::desk;
use confdrive::memory::MemoryBank;
use confdrive::scene::{DecisionDistribution, DrivingContext};
use confdrive::simulator::{run_episode, Decision, DecisionProvider, Scenario};
use confdrive::workflow::{MemoryItem, Workflow, WorkflowTranscript};

use crate::config::Config;
use crate::manifest::{write_atomic, RunManifest};
use crate::{build_backend, Cli, CmdError, CmdResult};

#[derive(Debug, Args)]
pub struct CollectArgs {
    /// Directory of scenario JSON files; the bundled suite when omitted.
    #[arg(long, value_name = "DIR")]
    pub scenarios: Option<PathBuf>,

    /// Memory bank path; grows across reruns.  [default: <out>/bank.jsonl]
    #[arg(long, value_name = "PATH")]
    pub bank: Option<PathBuf>,

    /// Committee size override.
    #[arg(long)]
    pub n_agents: Option<usize>,

    /// Vote sampling temperature override.
    #[arg(long)]
    pub temperature: Option<f64>,
}

/// Scenario files sorted by name, or the bundled suite.
pub fn load_suite(dir: Option<&Path>) -> anyhow::Result<Vec<Scenario>> {
    let Some(dir) = dir else {
        return Ok(desk::bundled_suite());
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading scenario directory {}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    anyhow::ensure!(!paths.is_empty(), "no scenario .json files in {}", dir.display());
    paths
        .iter()
        .map(|path| {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            Scenario::from_json(&text)
                .with_context(|| format!("parsing scenario {}", path.display()))
        })
        .collect()
}

/// Decision source that runs the committee per replan tick, reusing stored
/// decisions for ticks the bank already covers.
struct CollectProvider<'a> {
    workflow: Workflow<'a>,
    scenario_id: String,
    cached: &'a HashMap<(String, u64), DecisionDistribution>,
    fresh: Vec<(WorkflowTranscript, MemoryItem)>,
}

impl DecisionProvider for CollectProvider<'_> {
    fn decide(&mut self, ctx: &DrivingContext) -> Result<Decision, String> {
        let key = (self.scenario_id.clone(), ctx.timestamp.to_bits());
        if let Some(dist) = self.cached.get(&key) {
            return Ok(Decision::Planned(dist.clone()));
        }
        let (transcript, item) = self
            .workflow
            .collect_memory_item(ctx, &self.scenario_id)
            .map_err(|e| e.to_string())?;
        let dist = item.distribution.clone();
        self.fresh.push((transcript, item));
        Ok(Decision::Planned(dist))
    }

    fn name(&self) -> &str {
        "collect"
    }
}

pub fn run(cli: &Cli, config: &Config, args: &CollectArgs) -> CmdResult {
    let started = Instant::now();
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))?;
    let bank_path = args.bank.clone().unwrap_or_else(|| cli.out.join("bank.jsonl"));
    let transcripts_path = cli.out.join("transcripts.jsonl");

    let scenarios = load_suite(args.scenarios.as_deref())?;
    let backend = build_backend(config, cli.seed)?;

    let mut wf_config = config.workflow.clone();
    wf_config.seed = cli.seed;
    if let Some(n) = args.n_agents {
        if n == 0 {
            return Err(CmdError::Usage("--n-agents must be at least 1".into()));
        }
        wf_config.n_agents = n;
    }
    if let Some(t) = args.temperature {
        if !(t > 0.0) {
            return Err(CmdError::Usage("--temperature must be positive".into()));
        }
        wf_config.vote_temperature = t;
    }

    let mut sim = config.sim.clone();
    sim.seed = cli.seed;

    let mut bank = if bank_path.exists() {
        MemoryBank::load(&bank_path)
            .map_err(|e| anyhow::anyhow!("loading bank {}: {e}", bank_path.display()))?
    } else {
        MemoryBank::new(backend.embed_dimension())
    };
    let mut cached: HashMap<(String, u64), DecisionDistribution> = bank
        .items()
        .iter()
        .map(|it| {
            ((it.meta.scenario_id.clone(), it.meta.timestamp.to_bits()), it.distribution.clone())
        })
        .collect();

    let mut transcript_lines = String::new();
    let mut failure: Option<String> = None;

    for scenario in &scenarios {
        let mut provider = CollectProvider {
            workflow: Workflow::new(backend.as_ref(), wf_config.clone()),
            scenario_id: scenario.id.clone(),
            cached: &cached,
            fresh: Vec::new(),
        };
        let episode = run_episode(scenario, &sim, &mut provider);
        let fresh = provider.fresh;

        let mut new_items = 0usize;
        for (transcript, item) in fresh {
            cached.insert(
                (item.meta.scenario_id.clone(), item.meta.timestamp.to_bits()),
                item.distribution.clone(),
            );
            transcript_lines
                .push_str(&serde_json::to_string(&transcript).expect("transcript serializes"));
            transcript_lines.push('\n');
            bank.insert(item).map_err(|e| anyhow::anyhow!("bank insert: {e}"))?;
            new_items += 1;
        }
        // Progress survives interrupts: the bank is durable after every
        // episode, even a failed one.
        bank.save(&bank_path)
            .map_err(|e| anyhow::anyhow!("saving bank {}: {e}", bank_path.display()))?;

        match episode {
            Ok(result) => {
                println!(
                    "collect {}: {} new items, bank size {}, episode {}",
                    scenario.id,
                    new_items,
                    bank.len(),
                    if result.success { "succeeded" } else { "failed" }
                );
            }
            Err(e) => {
                failure = Some(format!("scenario {}: {e}", scenario.id));
                break;
            }
        }
    }

    if !transcript_lines.is_empty() {
        let mut all = match std::fs::read_to_string(&transcripts_path) {
            Ok(existing) => existing,
            Err(_) => String::new(),
        };
        all.push_str(&transcript_lines);
        write_atomic(&transcripts_path, all.as_bytes())?;
    }

    let status = match &failure {
        None => "ok".to_string(),
        Some(f) => format!("failed: {f}"),
    };
    RunManifest::write(
        &cli.out,
        "collect",
        config,
        cli.seed,
        started,
        &[bank_path.clone(), transcripts_path],
        &status,
    )?;

    match failure {
        None => {
            println!("collect: bank {} holds {} items", bank_path.display(), bank.len());
            Ok(())
        }
        Some(f) => Err(CmdError::Runtime(anyhow::anyhow!(f))),
    }
}

//! Closed-loop suite evaluation in non-reactive and reactive traffic.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context as _;
use clap::Args;

use confdrive::memory::MemoryBank;
use confdrive::scene::Action;
use confdrive::simulator::{
    evaluate_metrics, run_episode, scenario_in_mode, suite_csv, DecisionProvider,
    DecisionSourceKind, EpisodeResult, FixedProvider, StudentProvider, TrafficMode,
    WorkflowProvider,
};
use confdrive::student::Student;
use confdrive::workflow::Workflow;

use crate::collect::load_suite;
use crate::config::Config;
use crate::manifest::{write_atomic, RunManifest};
use crate::{build_backend, Cli, CmdError, CmdResult};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of scenario JSON files; the bundled suite when omitted.
    #[arg(long, value_name = "DIR")]
    pub suite: Option<PathBuf>,

    /// Decision source: student, workflow, or fixed:<ACTION> (e.g. fixed:CK-LK).
    #[arg(long, default_value = "student")]
    pub source: String,

    /// Student checkpoint.  [default: <out>/student.ckpt]
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Few-shot bank for the student source; omit to decide retrieval-free.
    #[arg(long, value_name = "PATH")]
    pub bank: Option<PathBuf>,

    /// Retrieved examples per decision when a bank is given.
    #[arg(long, default_value_t = 1)]
    pub k: usize,

    /// Comma-separated traffic modes: nr, r.
    #[arg(long, default_value = "nr,r")]
    pub modes: String,

    /// Exit 3 when any requested mode's success rate (percent) falls below.
    #[arg(long, value_name = "PCT")]
    pub min_sr: Option<f64>,
}

fn parse_source(text: &str) -> Result<DecisionSourceKind, CmdError> {
    match text {
        "student" => Ok(DecisionSourceKind::Student),
        "workflow" => Ok(DecisionSourceKind::Workflow),
        other => match other.strip_prefix("fixed:") {
            Some(code) if Action::from_code(code).is_some() => {
                Ok(DecisionSourceKind::FixedAction { code: code.to_string() })
            }
            Some(code) => Err(CmdError::Usage(format!("unknown action code {code:?}"))),
            None => Err(CmdError::Usage(format!(
                "unknown source {other:?}; expected student, workflow, or fixed:<ACTION>"
            ))),
        },
    }
}

fn parse_modes(text: &str) -> Result<Vec<TrafficMode>, CmdError> {
    let mut modes = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "nr" => modes.push(TrafficMode::NonReactive),
            "r" => modes.push(TrafficMode::Reactive),
            other => {
                return Err(CmdError::Usage(format!("unknown mode {other:?}; expected nr or r")))
            }
        }
    }
    if modes.is_empty() {
        return Err(CmdError::Usage("--modes lists no modes".into()));
    }
    Ok(modes)
}

/// Episode row recorded when the pipeline itself errors mid-scenario; the
/// suite keeps going and the row counts as a failure.
fn error_result(scenario_id: &str) -> EpisodeResult {
    EpisodeResult {
        scenario_id: scenario_id.to_string(),
        success: false,
        failure_kind: None,
        cls_proxy: 0.0,
        progress_ratio: 0.0,
        comfort: 0.0,
        speed_compliance: 0.0,
        timeline: vec![],
    }
}

pub fn run(cli: &Cli, config: &Config, args: &EvalArgs) -> CmdResult {
    let started = Instant::now();
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))?;
    let source = parse_source(&args.source)?;
    let modes = parse_modes(&args.modes)?;
    let scenarios = load_suite(args.suite.as_deref())?;
    let backend = build_backend(config, cli.seed)?;

    let mut sim = config.sim.clone();
    sim.seed = cli.seed;
    let mut wf_config = config.workflow.clone();
    wf_config.seed = cli.seed;

    // Source-specific artifacts load once, before any episode runs.
    let student: Option<Student> = match &source {
        DecisionSourceKind::Student => {
            let path = args.checkpoint.clone().unwrap_or_else(|| cli.out.join("student.ckpt"));
            Some(Student::load_checkpoint(&path).map_err(|e| {
                anyhow::anyhow!("loading checkpoint {}: {e}", path.display())
            })?)
        }
        _ => None,
    };
    let bank: Option<MemoryBank> = match (&source, &args.bank) {
        (DecisionSourceKind::Student, Some(path)) => Some(
            MemoryBank::load(path)
                .map_err(|e| anyhow::anyhow!("loading bank {}: {e}", path.display()))?,
        ),
        _ => None,
    };
    let fixed_action: Option<Action> = match &source {
        DecisionSourceKind::FixedAction { code } => Action::from_code(code),
        _ => None,
    };

    let mut outputs = Vec::new();
    let mut below_threshold = Vec::new();

    for mode in &modes {
        let mut results = Vec::with_capacity(scenarios.len());
        for scenario in &scenarios {
            let adapted = scenario_in_mode(scenario, *mode);
            let mut provider: Box<dyn DecisionProvider> = match &source {
                DecisionSourceKind::Student => Box::new(StudentProvider {
                    student: student.as_ref().expect("loaded above"),
                    backend: backend.as_ref(),
                    bank: bank.as_ref(),
                    k: args.k,
                }),
                DecisionSourceKind::Workflow => Box::new(WorkflowProvider {
                    workflow: Workflow::new(backend.as_ref(), wf_config.clone()),
                }),
                DecisionSourceKind::FixedAction { .. } => {
                    Box::new(FixedProvider(fixed_action.expect("validated by parse_source")))
                }
            };
            match run_episode(&adapted, &sim, provider.as_mut()) {
                Ok(result) => results.push(result),
                Err(e) => {
                    eprintln!("eval {} [{}]: {e}", scenario.id, mode.label());
                    results.push(error_result(&scenario.id));
                }
            }
        }

        let csv = suite_csv(&results).map_err(|e| anyhow::anyhow!("suite csv: {e}"))?;
        let csv_path = cli.out.join(format!("eval_{}.csv", mode.label()));
        write_atomic(&csv_path, csv.as_bytes())?;

        let mut audit = String::new();
        for result in &results {
            audit.push_str(&serde_json::to_string(result).expect("result serializes"));
            audit.push('\n');
        }
        let audit_path = cli.out.join(format!("audit_{}.jsonl", mode.label()));
        write_atomic(&audit_path, audit.as_bytes())?;

        let metrics = evaluate_metrics(&results).map_err(|e| anyhow::anyhow!("metrics: {e}"))?;
        println!(
            "eval [{}] source {}: SR {:.2}% over {} episodes, mean CLS proxy {:.4}",
            mode.label(),
            args.source,
            metrics.success_rate,
            metrics.episodes,
            metrics.cls_proxy
        );
        if let Some(min) = args.min_sr {
            if metrics.success_rate < min {
                below_threshold
                    .push(format!("{} SR {:.2}% < {min:.2}%", mode.label(), metrics.success_rate));
            }
        }
        outputs.push(csv_path);
        outputs.push(audit_path);
    }

    RunManifest::write(&cli.out, "eval", config, cli.seed, started, &outputs, "ok")?;

    if below_threshold.is_empty() {
        Ok(())
    } else {
        Err(CmdError::Threshold(below_threshold.join("; ")))
    }
}

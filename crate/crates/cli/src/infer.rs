//! One-shot inference: read a scene context, run the student, and show the
//! full decision pipeline from distribution to planned maneuver.

use std::path::PathBuf;

use anyhow::Context as _;
use clap::Args;

use confdrive::memory::{build_augmented_query, MemoryBank};
use confdrive::planner::{candidate_set, plan, predict_constant_velocity, HORIZON};
use confdrive::prompting::build_decision_prompt;
use confdrive::scene::{Action, DrivingContext};
use confdrive::student::{chat_wrap_query, Student};

use crate::config::Config;
use crate::{build_backend, Cli, CmdError, CmdResult};

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Scene context JSON.
    #[arg(long, value_name = "PATH")]
    pub context: PathBuf,

    /// Student checkpoint.  [default: <out>/student.ckpt]
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Memory bank for few-shot retrieval; inference runs bare without it.
    #[arg(long, value_name = "PATH")]
    pub bank: Option<PathBuf>,

    /// Retrieved examples to prepend (needs --bank).
    #[arg(long, default_value_t = 1)]
    pub k: usize,

    /// Rationale length cap in tokens.
    #[arg(long, default_value_t = 48)]
    pub max_rationale_tokens: usize,
}

fn load_context(path: &PathBuf) -> Result<DrivingContext, CmdError> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading context {}", path.display()))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let ctx: DrivingContext = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        CmdError::Runtime(anyhow::anyhow!(
            "context {} does not match the scene schema at {}: {}",
            path.display(),
            e.path(),
            e.inner()
        ))
    })?;
    Ok(ctx)
}

pub fn run(cli: &Cli, config: &Config, args: &InferArgs) -> CmdResult {
    let ctx = load_context(&args.context)?;
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| cli.out.join("student.ckpt"));
    let student = Student::load_checkpoint(&ckpt_path)
        .map_err(|e| anyhow::anyhow!("loading checkpoint {}: {e}", ckpt_path.display()))?;

    let q_md = build_decision_prompt(&ctx).user;
    let wrapped = chat_wrap_query(&q_md);
    let text = match &args.bank {
        Some(bank_path) if args.k > 0 => {
            let bank = MemoryBank::load(bank_path)
                .map_err(|e| anyhow::anyhow!("loading bank {}: {e}", bank_path.display()))?;
            let backend = build_backend(config, cli.seed)?;
            let embedding =
                backend.embed(&q_md).map_err(|e| anyhow::anyhow!("embedding query: {e}"))?;
            let items = bank
                .retrieve(&embedding, args.k)
                .map_err(|e| anyhow::anyhow!("retrieving {} examples: {e}", args.k))?;
            build_augmented_query(&wrapped, &items)
        }
        _ => wrapped,
    };

    let (dist, rationale) = student
        .infer(&text, args.max_rationale_tokens)
        .map_err(|e| anyhow::anyhow!("student inference: {e}"))?;

    println!("context: {} (t = {:.1} s)", args.context.display(), ctx.timestamp);
    println!("decision distribution:");
    let mut order: Vec<usize> = (0..dist.probs().len()).collect();
    order.sort_by(|&a, &b| {
        dist.probs()[b].partial_cmp(&dist.probs()[a]).expect("finite probs").then(a.cmp(&b))
    });
    for i in order {
        let action = Action::from_index(i).expect("index in range");
        println!("  {:6}  {:.4}  {}", action.code(), dist.probs()[i], action.spelled());
    }

    let gamma_c = config.sim.weights.gamma_c;
    let candidates = candidate_set(&dist, gamma_c);
    let listed: Vec<String> =
        candidates.actions.iter().map(|(a, p)| format!("{} ({:.2})", a.code(), p)).collect();
    println!("candidate set (p >= {gamma_c}): {}", listed.join(", "));

    let obstacles = predict_constant_velocity(&ctx, HORIZON);
    let result = plan(&ctx, &dist, &obstacles, &config.sim.weights, cli.seed);
    println!("arbitration:");
    println!("  {:6}  {:>6}  {:>8}  {:>8}  {:>8}", "action", "p_hat", "progress", "comfort", "score");
    for entry in &result.audit.entries {
        let marker = if entry.action == result.action { "  <- chosen" } else { "" };
        println!(
            "  {:6}  {:.4}  {:8.4}  {:8.4}  {:8.4}{marker}",
            entry.action.code(),
            entry.p_hat,
            entry.j_f,
            entry.j_g,
            entry.score
        );
    }
    let t = &result.audit.trajectory;
    println!(
        "trajectory: ends at ({:.1}, {:.1}) m, mean speed {:.1} m/s, final speed {:.1} m/s",
        t.end_x, t.end_y, t.mean_speed, t.final_speed
    );
    if rationale.trim().is_empty() {
        println!("rationale: (none)");
    } else {
        println!("rationale: {}", rationale.trim());
    }
    Ok(())
}

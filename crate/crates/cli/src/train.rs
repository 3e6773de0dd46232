//! Bank-to-checkpoint distillation.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context as _;
use clap::Args;

use confdrive::memory::MemoryBank;
use confdrive::student::{distillation_texts, loss_log_csv, Student};

use crate::config::Config;
use crate::manifest::{write_atomic, RunManifest};
use crate::{Cli, CmdError, CmdResult};

/// Few-shot range for training-time retrieval augmentation; the count is
/// drawn uniformly per example.
const K_MIN: usize = 0;
const K_MAX: usize = 3;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Memory bank to distill.  [default: <out>/bank.jsonl]
    #[arg(long, value_name = "PATH")]
    pub bank: Option<PathBuf>,

    /// Checkpoint output path.  [default: <out>/student.ckpt]
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

pub fn run(cli: &Cli, config: &Config, args: &TrainArgs) -> CmdResult {
    let started = Instant::now();
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))?;
    let bank_path = args.bank.clone().unwrap_or_else(|| cli.out.join("bank.jsonl"));
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| cli.out.join("student.ckpt"));
    let loss_path = cli.out.join("train_loss.csv");

    let bank = MemoryBank::load(&bank_path)
        .map_err(|e| anyhow::anyhow!("loading bank {}: {e}", bank_path.display()))?;
    if bank.is_empty() {
        return Err(CmdError::Runtime(anyhow::anyhow!(
            "bank {} holds no items; run collect first",
            bank_path.display()
        )));
    }

    let mut student_config = config.student.clone();
    student_config.seed = cli.seed;

    let texts = distillation_texts(&bank, K_MIN, K_MAX, cli.seed)
        .map_err(|e| anyhow::anyhow!("building training texts: {e}"))?;
    let corpus: Vec<&str> = texts.iter().map(|(text, _)| text.as_str()).collect();
    let mut student = Student::new(student_config, &corpus)
        .map_err(|e| anyhow::anyhow!("initializing student: {e}"))?;

    let mut examples = Vec::with_capacity(texts.len());
    for (text, target) in &texts {
        let mut example = student
            .build_training_example(text, target.clone(), None)
            .map_err(|e| anyhow::anyhow!("building training example: {e}"))?;
        // The LM head learns to write the rationale, not to echo the scene.
        example.lm_mask = example.response_mask();
        examples.push(example);
    }

    let log = student
        .train(&examples)
        .map_err(|e| anyhow::anyhow!("training: {e}"))?;
    write_atomic(&loss_path, loss_log_csv(&log).as_bytes())?;
    student
        .save_checkpoint(&ckpt_path)
        .map_err(|e| anyhow::anyhow!("saving checkpoint {}: {e}", ckpt_path.display()))?;

    let last = log.last().expect("training ran at least one epoch");
    println!(
        "train: {} examples, {} epochs, final loss {:.4} (lm {:.4}, kl {:.4})",
        examples.len(),
        log.len(),
        last.total,
        last.lm,
        last.dpp
    );
    RunManifest::write(
        &cli.out,
        "train",
        config,
        cli.seed,
        started,
        &[ckpt_path, loss_path],
        "ok",
    )?;
    Ok(())
}

//! Few-shot sweep: accuracy against the teacher, KL divergence, and
//! wall-clock inference latency as the retrieved-example count varies.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context as _;
use clap::Args;
use serde::Deserialize;

use confdrive::desk;
use confdrive::memory::{build_augmented_query, MemoryBank};
use confdrive::scene::{DecisionDistribution, N_ACTIONS};
use confdrive::student::{chat_wrap_query, dpp_loss, Student};

use crate::config::Config;
use crate::manifest::{write_atomic, RunManifest};
use crate::{build_backend, Cli, CmdError, CmdResult};

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Student checkpoint.  [default: <out>/student.ckpt]
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Memory bank supplying the few-shot examples.  [default: <out>/bank.jsonl]
    #[arg(long, value_name = "PATH")]
    pub bank: Option<PathBuf>,

    /// Held-out queries as JSONL {"q_md", "probs"}; the built-in held-out
    /// set when omitted.
    #[arg(long, value_name = "PATH")]
    pub queries: Option<PathBuf>,

    /// Comma-separated few-shot counts.
    #[arg(long, default_value = "0,1,2,3")]
    pub ks: String,
}

#[derive(Debug, Deserialize)]
struct QueryRecord {
    q_md: String,
    probs: Vec<f64>,
}

struct SweepRow {
    k: usize,
    n: usize,
    accuracy: f64,
    mean_kl: f64,
    mean_latency_s: f64,
}

fn parse_ks(text: &str) -> Result<Vec<usize>, CmdError> {
    let mut ks = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        ks.push(
            part.parse::<usize>()
                .map_err(|_| CmdError::Usage(format!("bad few-shot count {part:?}")))?,
        );
    }
    if ks.is_empty() {
        return Err(CmdError::Usage("--ks lists no counts".into()));
    }
    Ok(ks)
}

fn load_queries(path: Option<&PathBuf>) -> anyhow::Result<Vec<(String, DecisionDistribution)>> {
    let Some(path) = path else {
        // Held-out variants, disjoint from the bundled collection range.
        return Ok(desk::labeled_queries(20..30)
            .into_iter()
            .map(|q| (q.q_md, q.target))
            .collect());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading queries {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: QueryRecord = serde_json::from_str(line)
            .with_context(|| format!("queries {} line {}", path.display(), i + 1))?;
        let probs: [f64; N_ACTIONS] = record.probs.as_slice().try_into().map_err(|_| {
            anyhow::anyhow!(
                "queries {} line {}: expected {N_ACTIONS} probabilities",
                path.display(),
                i + 1
            )
        })?;
        let target = DecisionDistribution::from_probs(probs)
            .map_err(|e| anyhow::anyhow!("queries {} line {}: {e}", path.display(), i + 1))?;
        out.push((record.q_md, target));
    }
    anyhow::ensure!(!out.is_empty(), "queries {} holds no records", path.display());
    Ok(out)
}

fn cpu_model() -> String {
    if let Ok(text) = std::fs::read_to_string("/proc/cpuinfo") {
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("model name") {
                if let Some((_, name)) = rest.split_once(':') {
                    return name.trim().to_string();
                }
            }
        }
    }
    "unknown".to_string()
}

fn build_profile() -> &'static str {
    if cfg!(debug_assertions) {
        "debug"
    } else {
        "release"
    }
}

pub fn run(cli: &Cli, config: &Config, args: &SweepArgs) -> CmdResult {
    let started = Instant::now();
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating {}", cli.out.display()))?;
    let ks = parse_ks(&args.ks)?;
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| cli.out.join("student.ckpt"));
    let bank_path = args.bank.clone().unwrap_or_else(|| cli.out.join("bank.jsonl"));

    let student = Student::load_checkpoint(&ckpt_path)
        .map_err(|e| anyhow::anyhow!("loading checkpoint {}: {e}", ckpt_path.display()))?;
    let bank = MemoryBank::load(&bank_path)
        .map_err(|e| anyhow::anyhow!("loading bank {}: {e}", bank_path.display()))?;
    let queries = load_queries(args.queries.as_ref())?;
    let backend = build_backend(config, cli.seed)?;

    let mut rows = Vec::with_capacity(ks.len());
    for &k in &ks {
        let mut hits = 0usize;
        let mut kl_sum = 0.0f64;
        let mut latency_sum = 0.0f64;
        for (q_md, target) in &queries {
            let t0 = Instant::now();
            let wrapped = chat_wrap_query(q_md);
            let text = if k > 0 && !bank.is_empty() {
                let embedding =
                    backend.embed(q_md).map_err(|e| anyhow::anyhow!("embedding query: {e}"))?;
                let items = bank
                    .retrieve(&embedding, k)
                    .map_err(|e| anyhow::anyhow!("retrieving {k} examples: {e}"))?;
                build_augmented_query(&wrapped, &items)
            } else {
                wrapped
            };
            let (predicted, _) = student
                .infer(&text, 0)
                .map_err(|e| anyhow::anyhow!("student inference: {e}"))?;
            latency_sum += t0.elapsed().as_secs_f64();
            if predicted.argmax() == target.argmax() {
                hits += 1;
            }
            kl_sum += dpp_loss(&predicted, target);
        }
        let n = queries.len();
        let row = SweepRow {
            k,
            n,
            accuracy: hits as f64 / n as f64,
            mean_kl: kl_sum / n as f64,
            mean_latency_s: latency_sum / n as f64,
        };
        println!(
            "sweep k={}: accuracy {:.4}, mean KL {:.4}, mean latency {:.1} ms",
            row.k,
            row.accuracy,
            row.mean_kl,
            1e3 * row.mean_latency_s
        );
        rows.push(row);
    }

    let cpu = cpu_model();
    let profile = build_profile();
    let mut csv = String::new();
    csv.push_str(&format!("# cpu: {cpu}\n"));
    csv.push_str(&format!("# build: {profile}\n"));
    csv.push_str(&format!("# bank: {} items\n", bank.len()));
    csv.push_str("k,n,accuracy,mean_kl,mean_latency_s\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{:.4},{:.4},{:.6}\n",
            row.k, row.n, row.accuracy, row.mean_kl, row.mean_latency_s
        ));
    }
    let csv_path = cli.out.join("sweep_fewshot.csv");
    write_atomic(&csv_path, csv.as_bytes())?;

    let svg_path = cli.out.join("sweep_fewshot.svg");
    write_atomic(&svg_path, render_svg(&rows, &cpu, profile).as_bytes())?;

    RunManifest::write(
        &cli.out,
        "sweep-fewshot",
        config,
        cli.seed,
        started,
        &[csv_path, svg_path],
        "ok",
    )?;
    Ok(())
}

const PANEL_W: f64 = 260.0;
const PANEL_H: f64 = 190.0;
const PANEL_TOP: f64 = 46.0;

fn panel(svg: &mut String, x0: f64, title: &str, ks: &[usize], ys: &[f64]) {
    let bottom = PANEL_TOP + PANEL_H;
    let (mut lo, mut hi) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.10 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let k_lo = *ks.first().expect("at least one k") as f64;
    let k_hi = *ks.last().expect("at least one k") as f64;
    let span = if k_hi > k_lo { k_hi - k_lo } else { 1.0 };
    let sx = |k: f64| x0 + (k - k_lo) / span * PANEL_W;
    let sy = |y: f64| bottom - (y - lo) / (hi - lo) * PANEL_H;

    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\" \
font-weight=\"bold\">{title}</text>\n",
        x0 + PANEL_W / 2.0,
        PANEL_TOP - 16.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{PANEL_TOP}\" x2=\"{x0}\" y2=\"{bottom}\" \
stroke=\"#444\" stroke-width=\"1\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{bottom}\" x2=\"{:.1}\" y2=\"{bottom}\" \
stroke=\"#444\" stroke-width=\"1\"/>\n",
        x0 + PANEL_W
    ));
    for (label, y) in [(lo, sy(lo)), (hi, sy(hi))].map(|(v, y)| (format!("{v:.3}"), y)) {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\" \
fill=\"#444\">{label}</text>\n",
            x0 - 6.0,
            y + 3.0
        ));
    }
    for &k in ks {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\" \
fill=\"#444\">{k}</text>\n",
            sx(k as f64),
            bottom + 16.0
        ));
    }

    let points: Vec<String> = ks
        .iter()
        .zip(ys)
        .map(|(&k, &y)| format!("{:.1},{:.1}", sx(k as f64), sy(y)))
        .collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#2266cc\" stroke-width=\"2\"/>\n",
        points.join(" ")
    ));
    for (&k, &y) in ks.iter().zip(ys) {
        svg.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#2266cc\"/>\n",
            sx(k as f64),
            sy(y)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\" \
fill=\"#222\">{:.3}</text>\n",
            sx(k as f64),
            sy(y) - 8.0,
            y
        ));
    }
}

fn render_svg(rows: &[SweepRow], cpu: &str, profile: &str) -> String {
    let ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    let acc: Vec<f64> = rows.iter().map(|r| 100.0 * r.accuracy).collect();
    let kl: Vec<f64> = rows.iter().map(|r| r.mean_kl).collect();
    let lat: Vec<f64> = rows.iter().map(|r| 1e3 * r.mean_latency_s).collect();
    let n = rows.first().map_or(0, |r| r.n);

    let mut svg = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"1000\" height=\"340\" \
viewBox=\"0 0 1000 340\" font-family=\"sans-serif\">\n\
<rect width=\"1000\" height=\"340\" fill=\"white\"/>\n",
    );
    panel(&mut svg, 60.0, "accuracy (%)", &ks, &acc);
    panel(&mut svg, 395.0, "mean KL divergence", &ks, &kl);
    panel(&mut svg, 730.0, "mean latency (ms)", &ks, &lat);
    svg.push_str(&format!(
        "<text x=\"500\" y=\"296\" text-anchor=\"middle\" font-size=\"11\" fill=\"#555\">\
Full-scale reference endpoints: accuracy 88.40%, KL 0.1819. Not reproducible at \
this scale; shown for orientation only.</text>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"500\" y=\"314\" text-anchor=\"middle\" font-size=\"11\" fill=\"#555\">\
CPU: {}; build profile: {profile}; {n} held-out queries per point.</text>\n",
        xml_escape(cpu)
    ));
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

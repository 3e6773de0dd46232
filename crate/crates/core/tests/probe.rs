//! Offline diagnosis harness: prints retrieval quality, distillation
//! accuracy, few-shot sweeps, and closed-loop outcomes for the bundled desk
//! fixtures. All tests are ignored by default; run with
//! `cargo test --release --test probe -- --ignored --nocapture`.

use confdrive::desk::{
    archetype_context, archetype_name, bundled_suite, collect_archetype_bank, committee_backend,
    exact_teacher_bank, labeled_queries, teacher_distribution, ARCHETYPE_COUNT,
};
use confdrive::gateway::TextBackend;
use confdrive::memory::build_augmented_query;
use confdrive::prompting::build_decision_prompt;
use confdrive::scene::{Action, DecisionDistribution};
use confdrive::simulator::{
    run_episode, suite_csv, Decision, DecisionProvider, FixedProvider, SimConfig,
    StudentProvider,
};
use confdrive::student::{chat_wrap_query, distillation_texts, dpp_loss, Student, StudentConfig};

const EMBED_DIM: usize = 256;

#[test]
#[ignore = "diagnostic output only"]
fn probe_retrieval() {
    let backend = committee_backend(EMBED_DIM, 0);
    let bank = exact_teacher_bank(&backend, 0..20).unwrap();
    let mut in_arch = vec![0usize; ARCHETYPE_COUNT];
    let mut modal_ok = vec![0usize; ARCHETYPE_COUNT];
    let mut totals = vec![0usize; ARCHETYPE_COUNT];
    let mut rank1 = vec![[0usize; 2]; ARCHETYPE_COUNT];
    for archetype in 0..ARCHETYPE_COUNT {
        for variant in 50..70u64 {
            let ctx = archetype_context(archetype, variant);
            let q_md = build_decision_prompt(&ctx).user;
            let emb = backend.embed(&q_md).unwrap();
            let got = bank.top_k(&emb, 3).unwrap();
            for (rank, &idx) in got.indices.iter().enumerate() {
                totals[archetype] += 1;
                let item_arch = idx / 20;
                if item_arch == archetype {
                    in_arch[archetype] += 1;
                    if rank == 0 {
                        rank1[archetype][0] += 1;
                    }
                }
                if rank == 0 {
                    rank1[archetype][1] += 1;
                }
                if teacher_distribution(item_arch).argmax()
                    == teacher_distribution(archetype).argmax()
                {
                    modal_ok[archetype] += 1;
                }
            }
        }
    }
    let mut sum_in = 0;
    let mut sum_modal = 0;
    let mut sum_total = 0;
    for archetype in 0..ARCHETYPE_COUNT {
        println!(
            "retrieval {:<18} in-archetype {:>3}/{:<3} modal-compatible {:>3}/{:<3} rank1 \
{:>2}/{:<2}",
            archetype_name(archetype),
            in_arch[archetype],
            totals[archetype],
            modal_ok[archetype],
            totals[archetype],
            rank1[archetype][0],
            rank1[archetype][1]
        );
        sum_in += in_arch[archetype];
        sum_modal += modal_ok[archetype];
        sum_total += totals[archetype];
    }
    println!(
        "retrieval TOTAL in-archetype {sum_in}/{sum_total} modal-compatible \
{sum_modal}/{sum_total}"
    );
}

struct TeacherProvider;

impl DecisionProvider for TeacherProvider {
    fn decide(
        &mut self,
        ctx: &confdrive::scene::DrivingContext,
    ) -> Result<Decision, String> {
        let text = build_decision_prompt(ctx).user;
        let dist = match confdrive::desk::classify(&text) {
            Some(archetype) => teacher_distribution(archetype),
            None => {
                let mut probs = [0.0f64; 10];
                probs[Action::from_code("CK-LK").unwrap().index()] = 1.0;
                DecisionDistribution::from_probs(probs).unwrap()
            }
        };
        Ok(Decision::Planned(dist))
    }

    fn name(&self) -> &str {
        "teacher"
    }
}

#[test]
#[ignore = "diagnostic output only"]
fn probe_teacher_closed_loop() {
    let suite = bundled_suite();
    let config = SimConfig { seed: 42, ..SimConfig::default() };
    let mut results = Vec::new();
    for scenario in &suite {
        let mut provider = TeacherProvider;
        let r = run_episode(scenario, &config, &mut provider).unwrap();
        println!(
            "teacher {:<22} success={} failure={:?} progress={:.2}",
            r.scenario_id, r.success, r.failure_kind, r.progress_ratio
        );
        results.push(r);
    }
    println!("{}", suite_csv(&results).unwrap());

    let mut baseline = Vec::new();
    for scenario in &suite {
        let mut provider = FixedProvider(Action::from_code("CK-LK").unwrap());
        let r = run_episode(scenario, &config, &mut provider).unwrap();
        println!(
            "baseline {:<22} success={} failure={:?} progress={:.2}",
            r.scenario_id, r.success, r.failure_kind, r.progress_ratio
        );
        baseline.push(r);
    }
    println!("{}", suite_csv(&baseline).unwrap());
}

#[test]
#[ignore = "expensive; trains the full student"]
fn probe_distillation_and_closed_loop() {
    let backend = committee_backend(EMBED_DIM, 0);
    let t0 = std::time::Instant::now();
    let (bank, _) = collect_archetype_bank(&backend, 0..20, 0).unwrap();
    println!("collected bank: {} items in {:?}", bank.len(), t0.elapsed());

    let texts = distillation_texts(&bank, 0, 3, 9).unwrap();
    let corpus: Vec<String> = texts.iter().map(|(t, _)| t.clone()).collect();
    let mut student = Student::new(StudentConfig::default(), &corpus).unwrap();
    let examples: Vec<_> = texts
        .iter()
        .map(|(text, target)| {
            let mut ex = student.build_training_example(text, target.clone(), None).unwrap();
            ex.lm_mask = ex.response_mask();
            ex
        })
        .collect();
    let t1 = std::time::Instant::now();
    let losses = student.train(&examples).unwrap();
    println!(
        "trained {} epochs in {:?}; first dpp {:.4} last dpp {:.4}",
        losses.len(),
        t1.elapsed(),
        losses.first().map(|l| l.dpp).unwrap_or(f64::NAN),
        losses.last().map(|l| l.dpp).unwrap_or(f64::NAN),
    );
    // Cache the artifacts so probe_loop_trace can rerun episodes without the
    // twenty-epoch wait.
    student.save_checkpoint("target/probe_student.ckpt".as_ref()).unwrap();
    bank.save("target/probe_bank.jsonl".as_ref()).unwrap();

    for (label, queries) in
        [("train", labeled_queries(0..20)), ("held-out", labeled_queries(20..30))]
    {
        for k in 0..=3usize {
            let mut agree = 0usize;
            let mut kl_sum = 0.0;
            let mut confusion = vec![[0usize; 10]; ARCHETYPE_COUNT];
            for q in &queries {
                let wrapped = chat_wrap_query(&q.q_md);
                let text = if k == 0 {
                    wrapped
                } else {
                    let emb = backend.embed(&q.q_md).unwrap();
                    let items = bank.retrieve(&emb, k).unwrap();
                    build_augmented_query(&wrapped, &items)
                };
                let (dist, _) = student.infer(&text, 0).unwrap();
                if dist.argmax() == q.target.argmax() {
                    agree += 1;
                }
                confusion[q.archetype][dist.argmax().index()] += 1;
                kl_sum += dpp_loss(&dist, &q.target);
            }
            println!(
                "{label} K={k}: agreement {:.1}% mean-KL {:.4}",
                100.0 * agree as f64 / queries.len() as f64,
                kl_sum / queries.len() as f64
            );
            if k == 0 {
                for archetype in 0..ARCHETYPE_COUNT {
                    let row = &confusion[archetype];
                    let want = teacher_distribution(archetype).argmax();
                    let hits = row[want.index()];
                    let total: usize = row.iter().sum();
                    if hits < total {
                        let worst = row
                            .iter()
                            .enumerate()
                            .filter(|(i, _)| *i != want.index())
                            .max_by_key(|(_, c)| **c)
                            .map(|(i, c)| (Action::from_index(i).unwrap().code(), *c))
                            .unwrap();
                        println!(
                            "  {label} {:<18} {hits}/{total} to {} (top stray {} x{})",
                            archetype_name(archetype),
                            want.code(),
                            worst.0,
                            worst.1
                        );
                    }
                }
            }
        }
    }

    let suite = bundled_suite();
    let config_sim = SimConfig { seed: 42, ..SimConfig::default() };
    let mut results = Vec::new();
    for scenario in &suite {
        let mut provider =
            StudentProvider { student: &student, backend: &backend, bank: Some(&bank), k: 1 };
        let r = run_episode(scenario, &config_sim, &mut provider).unwrap();
        println!(
            "student {:<22} success={} failure={:?} progress={:.2}",
            r.scenario_id, r.success, r.failure_kind, r.progress_ratio
        );
        results.push(r);
    }
    println!("{}", suite_csv(&results).unwrap());
}

/// Prints the student's view at every replan of an episode: what the scene
/// classifies to, what the student predicts, and what the planner then does.
struct TraceProvider<'a>(StudentProvider<'a>);

impl DecisionProvider for TraceProvider<'_> {
    fn decide(
        &mut self,
        ctx: &confdrive::scene::DrivingContext,
    ) -> Result<Decision, String> {
        let decision = self.0.decide(ctx)?;
        if let Decision::Planned(dist) = &decision {
            let text = build_decision_prompt(ctx).user;
            let arch = confdrive::desk::classify(&text)
                .map(archetype_name)
                .unwrap_or("(none)");
            let mut order: Vec<usize> = (0..10).collect();
            order.sort_by(|&a, &b| dist.probs()[b].partial_cmp(&dist.probs()[a]).unwrap());
            println!(
                "  t={:>5.1} v={:>4.1} lane={} {:<18} -> {} {:.2} | {} {:.2} | {} {:.2}",
                ctx.timestamp,
                ctx.ego.speed,
                ctx.ego.lane_id.0,
                arch,
                Action::from_index(order[0]).unwrap().code(),
                dist.probs()[order[0]],
                Action::from_index(order[1]).unwrap().code(),
                dist.probs()[order[1]],
                Action::from_index(order[2]).unwrap().code(),
                dist.probs()[order[2]],
            );
        }
        Ok(decision)
    }

    fn name(&self) -> &str {
        "trace"
    }
}

#[test]
#[ignore = "diagnostic output only; needs probe_distillation_and_closed_loop artifacts"]
fn probe_loop_trace() {
    let backend = committee_backend(EMBED_DIM, 0);
    let student = Student::load_checkpoint("target/probe_student.ckpt".as_ref()).unwrap();
    let bank = confdrive::memory::MemoryBank::load("target/probe_bank.jsonl".as_ref()).unwrap();
    let config_sim = SimConfig { seed: 42, ..SimConfig::default() };
    for scenario in bundled_suite() {
        let quiet = run_episode(
            &scenario,
            &config_sim,
            &mut StudentProvider { student: &student, backend: &backend, bank: Some(&bank), k: 1 },
        )
        .unwrap();
        println!(
            "student {:<22} success={} failure={:?} progress={:.2}",
            quiet.scenario_id, quiet.success, quiet.failure_kind, quiet.progress_ratio
        );
        if !quiet.success {
            let mut provider = TraceProvider(StudentProvider {
                student: &student,
                backend: &backend,
                bank: Some(&bank),
                k: 1,
            });
            let traced = run_episode(&scenario, &config_sim, &mut provider).unwrap();
            let plans: Vec<String> = traced
                .timeline
                .iter()
                .filter(|s| s.action.is_some())
                .map(|s| format!("{:.1}:{}", s.t, s.action.unwrap().code()))
                .collect();
            println!("  planner: {}", plans.join(" "));
        }
    }
}

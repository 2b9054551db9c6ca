//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line whether or not it fails; exits non-zero if any
//! criterion fails.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;

use rest_core::config::ExperimentConfig;
use rest_core::driver::{self, Experiment, RunRecord};
use rest_core::gradcheck::grad_check;
use rest_core::grow::{self, AnnotatedExample, GrowDataset, Origin};
use rest_core::improve::{self, Threshold};
use rest_core::losses::{self, LossContext, LossSpec, ValueNet};
use rest_core::mdp::{TokenId, Vocab, EOS};
use rest_core::net::PolicyConfig;
use rest_core::oracle;
use rest_core::policy::{init_policy, PolicyCheckpoint};
use rest_core::seeding;
use rest_core::task::{make_dataset, reward_sanity_suite, EditDistanceReward, RewardFn};
use rest_core::train;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn failed(e: impl std::fmt::Display) -> Outcome {
    outcome(false, format!("error: {e}"))
}

/// Desk-scale toy-task config shared by the training criteria: the default
/// task with a 500-example training split, which leaves BC well short of the
/// noise-free optimum.
fn desk(seed: u64, grows: usize, improves: usize) -> ExperimentConfig {
    ExperimentConfig {
        run_name: format!("desk-s{seed}-g{grows}-i{improves}"),
        seed,
        n_train: 500,
        grows,
        improves,
        ..ExperimentConfig::default()
    }
}

fn final_after_grow(record: &RunRecord, g: usize) -> Option<f64> {
    record
        .metrics
        .iter()
        .filter(|m| m.phase == "improve" && m.grow == g)
        .next_back()
        .map(|m| m.eval_reward)
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" → ")
}

struct MainRun {
    dir: PathBuf,
    record: RunRecord,
    rest: PolicyCheckpoint,
}

fn main_run(root: &Path) -> Result<MainRun, String> {
    let cfg = ExperimentConfig {
        thresholds: vec![0.7, 0.8, 0.9],
        ..desk(0, 1, 3)
    };
    let dir = root.join("main");
    let (rest, record) = driver::run_rest(&cfg, Some(&dir)).map_err(|e| e.to_string())?;
    Ok(MainRun { dir, record, rest })
}

fn improve_monotonicity(run: &MainRun) -> Outcome {
    let rewards: Vec<f64> = run.record.metrics.iter().map(|m| m.eval_reward).collect();
    let taus: Vec<&str> = run.record.metrics.iter().skip(1).map(|m| m.tau.as_str()).collect();
    if taus != ["0.7", "0.8", "0.9"] {
        return outcome(false, format!("thresholds used {taus:?}"));
    }
    let steps = &rewards[1..];
    let monotone = rewards.windows(2).all(|w| w[1] >= w[0] - 0.005);
    let gain = steps[steps.len() - 1] - steps[0];
    outcome(
        monotone && gain >= 0.02,
        format!("BC then τ=0.7/0.8/0.9: {}; final − first = {gain:+.4}", fmt(&rewards)),
    )
}

fn rest_beats_bc(run: &MainRun, root: &Path) -> Outcome {
    let baseline = match driver::run_rest(&desk(0, 0, 0), Some(&root.join("bc-only"))) {
        Ok((_, r)) => r.final_eval_reward,
        Err(e) => return failed(e),
    };
    let rest = run.record.final_eval_reward;
    outcome(
        rest >= baseline + 0.05,
        format!("G=1,I=3 {rest:.4} vs G=0,I=0 {baseline:.4} ({:+.4})", rest - baseline),
    )
}

fn second_grow_helps(root: &Path) -> Outcome {
    let mut one = Vec::new();
    let mut two = Vec::new();
    for seed in 0..5 {
        let (_, rec) = match driver::run_rest(&desk(seed, 2, 2), None) {
            Ok(r) => r,
            Err(e) => return failed(format!("seed {seed}: {e}")),
        };
        match final_after_grow(&rec, 1) {
            Some(r) => one.push(r),
            None => return failed(format!("seed {seed}: no grow-1 rows")),
        }
        two.push(rec.final_eval_reward);
    }
    // The first Grow of a G=2 run is the whole of the G=1 run with the same
    // seed; confirm on one seed rather than rerunning all five.
    let separate = match driver::run_rest(&desk(0, 1, 2), Some(&root.join("g1i2"))) {
        Ok((_, r)) => r.final_eval_reward,
        Err(e) => return failed(e),
    };
    let prefix_ok = separate == one[0];
    let within = one.iter().zip(&two).all(|(a, b)| *b >= a - 0.005);
    let strict = one.iter().zip(&two).filter(|(a, b)| b > a).count();
    outcome(
        prefix_ok && within && strict >= 4,
        format!(
            "G=1,I=2 [{}] vs G=2,I=2 [{}]; strictly better in {strict}/5; separate G=1 run matches: {prefix_ok}",
            fmt(&one),
            fmt(&two)
        ),
    )
}

fn best_of_n_monotone(run: &MainRun) -> Outcome {
    let cfg = &run.record.config;
    let bc = match PolicyCheckpoint::load(&run.dir.join("checkpoints/bc.json")) {
        Ok(p) => p,
        Err(e) => return failed(e),
    };
    let task = cfg.task();
    let reward = EditDistanceReward::new(task.clone());
    let contexts = make_dataset(1000, &task, seeding::derive(cfg.seed, "best-of-n-contexts", 0));
    let ns = [1, 4, 16, 64];
    let curve = |p: &PolicyCheckpoint| -> Vec<f64> {
        ns.iter()
            .map(|&n| {
                driver::best_of_n_reward(
                    p,
                    &contexts,
                    n,
                    &reward,
                    cfg.temperature,
                    task.output_max_len(),
                    seeding::derive(cfg.seed, "best-of-n", 0),
                )
            })
            .collect()
    };
    let b = curve(&bc);
    let r = curve(&run.rest);
    let mono = |c: &[f64]| c.windows(2).all(|w| w[1] >= w[0] - 0.01);
    let dominates = r.iter().zip(&b).all(|(x, y)| x >= y);
    outcome(
        mono(&b) && mono(&r) && dominates,
        format!("N=1,4,16,64 BC [{}] ReST [{}]", fmt(&b), fmt(&r)),
    )
}

fn oracle_improvement() -> Outcome {
    let t = Instant::now();
    let mut improved = 0;
    let mut degenerate = 0;
    for seed in 0..100 {
        let (dist, reward) = oracle::random_instance(seed, 4, 3, 3);
        let pi = oracle::exact_bc_fit(&dist);
        let v = oracle::expected_reward(&pi, &dist.p_x, &reward);
        match oracle::exact_improve(&pi, &dist, 0.5, v, &reward) {
            Ok(res) if res.dropped.is_empty() => {
                if oracle::expected_reward(&res.policy, &dist.p_x, &reward) > v {
                    improved += 1;
                }
            }
            Ok(_) => degenerate += 1,
            Err(e) => return failed(format!("instance {seed}: {e}")),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        improved == 100 && secs < 10.0,
        format!("{improved}/100 strictly improved at τ = V ({degenerate} degenerate), {secs:.2} s"),
    )
}

fn small_policy(seed: u64) -> PolicyCheckpoint {
    let vocab = Vocab::new(&['a', 'b', 'c']);
    let mut cfg = PolicyConfig::desk(vocab.len(), 5, 5);
    cfg.width = 8;
    cfg.ff_width = 12;
    cfg.layers = 1;
    init_policy(cfg, vocab, seed).expect("valid config")
}

fn random_records(n: usize, seed: u64) -> Vec<AnnotatedExample> {
    let mut rng = seeding::rng(seed);
    (0..n)
        .map(|i| {
            let sl = rng.random_range(1..=4);
            let ol = rng.random_range(0..=3);
            let source: Vec<TokenId> = (0..sl).map(|_| rng.random_range(3..6)).collect();
            let mut output: Vec<TokenId> = (0..ol).map(|_| rng.random_range(3..6)).collect();
            output.push(EOS);
            let origin = if rng.random_bool(0.5) { Origin::Original } else { Origin::Sampled };
            AnnotatedExample {
                source,
                output,
                reward: Some(grow::quantize_reward(rng.random::<f64>())),
                origin,
                grow: usize::from(origin == Origin::Sampled),
                source_id: i,
            }
        })
        .collect()
}

fn gradient_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for b in 0..20u64 {
        let policy = small_policy(100 + b);
        let batch = random_records(8, 200 + b);
        let tau = seeding::rng(300 + b).random_range(0.0..0.6);
        match oracle::gradient_equivalence_check(&policy, &batch, tau) {
            Ok(d) => worst = worst.max(d),
            Err(e) => return failed(e),
        }
    }
    outcome(worst < 1e-10, format!("max abs deviation {worst:.3e} over 20 batches"))
}

fn gradient_correctness() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for spec in [LossSpec::Bc, LossSpec::gold(), LossSpec::bvmpo(), LossSpec::oac()] {
        let mut worst: f64 = 0.0;
        for trial in 0..3u64 {
            let policy = small_policy(10 + trial);
            let prior = small_policy(20 + trial);
            let value = ValueNet::new(policy.config().clone(), 30 + trial).expect("valid config");
            let data = random_records(5, 40 + trial);
            let batch: Vec<&AnnotatedExample> = data.iter().collect();
            let ctx = LossContext {
                value: Some(&value),
                prior: Some(&prior),
                lambda: 0.3,
            };
            let report = losses::build_plan(&spec, &policy, &batch, &ctx)
                .and_then(|plan| {
                    let frozen = plan.freeze(&policy, &batch)?;
                    let (_, g) = plan.value_and_grad(&policy, &batch)?;
                    let mut probe = policy.clone();
                    Ok(grad_check(
                        |x| {
                            probe.net.set_flat_params(x);
                            frozen.value(&probe, &batch).unwrap_or(f64::NAN)
                        },
                        |_| train::flatten(&g),
                        &policy.net.flat_params(),
                        1e-6,
                    ))
                });
            match report {
                Ok(r) => {
                    ok &= r.passed(1e-4);
                    worst = worst.max(r.max_rel_error);
                }
                Err(e) => return failed(format!("{}: {e}", spec.name())),
            }
        }
        parts.push(format!("{} {worst:.2e}", spec.name()));
    }
    outcome(ok, format!("max relative error: {}", parts.join(", ")))
}

fn filter_correctness() -> Outcome {
    let mut rng = seeding::rng(5);
    let records: Vec<AnnotatedExample> = (0..10_000)
        .map(|i| AnnotatedExample {
            source: vec![3],
            output: vec![EOS],
            // two-decimal rewards so thresholds land exactly on record values
            reward: Some(f64::from(rng.random_range(0..=100u32)) / 100.0),
            origin: Origin::Sampled,
            grow: 1,
            source_id: i % 50,
        })
        .collect();
    let mut taus: Vec<f64> = (0..20).map(|k| f64::from(k) * 0.05).collect();
    taus[3] = records[17].reward.unwrap();
    taus.sort_by(f64::total_cmp);
    let mut prev: Option<Vec<usize>> = None;
    let mut scan_ok = true;
    let mut nested = true;
    for &tau in &taus {
        let got = match improve::filter(&records, &Threshold::Global(tau), false) {
            Ok(k) => k,
            Err(e) => return failed(e),
        };
        let want: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].reward.unwrap() > tau)
            .collect();
        scan_ok &= got == want;
        if let Some(p) = &prev {
            nested &= got.iter().all(|i| p.binary_search(i).is_ok());
        }
        prev = Some(got);
    }

    // crafted fixture: one source with rewards 0.1..1.0, another with 0.2 ×4
    let mut fixture = Vec::new();
    for (sid, rewards) in [(0, (1..=10).map(|k| f64::from(k) / 10.0).collect::<Vec<_>>()), (1, vec![0.2; 4])] {
        for r in rewards {
            fixture.push(AnnotatedExample {
                source: vec![3 + sid],
                output: vec![EOS],
                reward: Some(r),
                origin: Origin::Sampled,
                grow: 1,
                source_id: sid,
            });
        }
    }
    let ds = GrowDataset::from_records(fixture, 1);
    let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    let pct = |p| improve::percentile_thresholds(&ds, p).unwrap_or_default();
    let interp = |g| improve::interpolation_thresholds(&ds, g).unwrap_or_default();
    // nearest rank: ceil(p/100·n), so p=25 picks rank 3 of 10 and rank 1 of 4
    let fixtures_ok = close(&pct(25.0), &[0.3, 0.2])
        && close(&pct(50.0), &[0.5, 0.2])
        && close(&pct(90.0), &[0.9, 0.2])
        && close(&pct(100.0), &[1.0, 0.2])
        && close(&interp(0.0), &[0.55, 0.2])
        && close(&interp(0.5), &[0.775, 0.2])
        && close(&interp(1.0), &[1.0, 0.2]);
    outcome(
        scan_ok && nested && fixtures_ok,
        format!("scan match {scan_ok}, nested {nested}, percentile/interpolation fixtures {fixtures_ok}"),
    )
}

fn bc_matches_oracle() -> Outcome {
    let (dist, _) = oracle::random_instance(11, 3, 3, 2);
    let vocab = Vocab::new(&['a', 'b', 'c']);
    let policy = match init_policy(PolicyConfig::desk(vocab.len(), 1, 3), vocab, 2) {
        Ok(p) => p,
        Err(e) => return failed(e),
    };
    let sources: Vec<Vec<TokenId>> = (0..3).map(|i| vec![3 + i]).collect();
    let fit = match oracle::neural_bc_fit(&policy, &dist, &sources, 5000, 3e-3, 1e-3) {
        Ok(f) => f,
        Err(e) => return failed(e),
    };
    let table = match oracle::neural_table(&fit.policy, &sources, &dist.outputs) {
        Ok(t) => t,
        Err(e) => return failed(e),
    };
    let kl = oracle::kl(&dist.p_x, &oracle::exact_bc_fit(&dist).table, &table);
    outcome(
        kl < 1e-3 && fit.steps <= 5000,
        format!("KL {kl:.3e} after {} steps ({} outputs per context)", fit.steps, dist.n_outputs()),
    )
}

fn value_quality(run: &MainRun) -> Outcome {
    let cfg = &run.record.config;
    let exp = Experiment::new(cfg.clone());
    let vocab = cfg.task().vocab();
    let dataset = match grow::load(&run.dir.join("datasets/grow_1.tsv"), &vocab) {
        Ok(d) => d,
        Err(e) => return failed(e),
    };
    let diag = exp
        .train_value(&dataset, 1)
        .map_err(|e| e.to_string())
        .and_then(|v| losses::value_diagnostics(&v, &dataset.records).map_err(|e| e.to_string()));
    match diag {
        Ok(d) => outcome(
            !d.degenerate && d.kendall >= 0.8 && d.spearman >= 0.9,
            format!("kendall {:.4}, spearman {:.4} on {} records", d.kendall, d.spearman, dataset.len()),
        ),
        Err(e) => failed(e),
    }
}

struct ConstantReward;

impl RewardFn for ConstantReward {
    fn name(&self) -> &str {
        "constant"
    }
    fn score(&self, _: &[TokenId], _: &[TokenId]) -> f64 {
        1.0
    }
}

fn reward_sanity() -> Outcome {
    let task = ExperimentConfig::default().task();
    let real = reward_sanity_suite(&EditDistanceReward::new(task.clone()), &task, 0);
    let control = reward_sanity_suite(&ConstantReward, &task, 0);
    let control_fails = control.check("repetition").is_some_and(|c| !c.passed);
    let names: Vec<String> = real
        .checks
        .iter()
        .map(|c| format!("{} {}", c.name, if c.passed { "ok" } else { "FAILED" }))
        .collect();
    outcome(
        real.all_passed() && control_fails,
        format!("{}; constant reward fails repetition: {control_fails}", names.join(", ")),
    )
}

fn reproducibility(root: &Path) -> Outcome {
    // small enough to run twice in seconds, with a value net and a
    // behaviour prior in the loop so every stage is covered
    let cfg = ExperimentConfig {
        run_name: "repro".into(),
        seed: 3,
        n_train: 100,
        n_eval: 40,
        n_test: 40,
        width: 16,
        ff_width: 32,
        layers: 1,
        grows: 2,
        improves: 2,
        loss: "bvmpo".into(),
        allow_low_threshold: true,
        pretrain_budget: 150,
        pretrain_eval_interval: 50,
        improve_budget: 60,
        eval_interval: 20,
        value_steps: 40,
        ..ExperimentConfig::default()
    };
    let run = |workers: usize| -> Result<String, String> {
        let dir = root.join(format!("repro-w{workers}"));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| e.to_string())?;
        pool.install(|| driver::run_rest(&cfg, Some(&dir))).map_err(|e| e.to_string())?;
        std::fs::read_to_string(dir.join("metrics.csv")).map_err(|e| e.to_string())
    };
    match (run(1), run(2)) {
        (Ok(a), Ok(b)) => outcome(
            a == b,
            format!("metrics.csv with 1 and 2 workers identical: {} ({} rows)", a == b, a.lines().count() - 1),
        ),
        (Err(e), _) | (_, Err(e)) => failed(e),
    }
}

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    let root = root.path();
    let start = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let record = |name: &'static str, o: Outcome, results: &mut Vec<(&str, Outcome)>| {
        println!("[{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    record("reward sanity suite", reward_sanity(), &mut results);
    record("filter correctness", filter_correctness(), &mut results);
    record("gradient correctness", gradient_correctness(), &mut results);
    record("gradient equivalence", gradient_equivalence(), &mut results);
    record("oracle improvement guarantee", oracle_improvement(), &mut results);
    record("BC consistency with the exact oracle", bc_matches_oracle(), &mut results);
    record("reproducibility across worker counts", reproducibility(root), &mut results);
    match main_run(root) {
        Ok(run) => {
            record("improve-step monotonicity", improve_monotonicity(&run), &mut results);
            record("ReST beats BC", rest_beats_bc(&run, root), &mut results);
            record("best-of-N monotone", best_of_n_monotone(&run), &mut results);
            record("value-function quality", value_quality(&run), &mut results);
        }
        Err(e) => {
            for name in ["improve-step monotonicity", "ReST beats BC", "best-of-N monotone", "value-function quality"] {
                record(name, failed(&e), &mut results);
            }
        }
    }
    record("second Grow helps", second_grow_helps(root), &mut results);

    let n_failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!(
        "acceptance: {}/{} criteria passed in {:.0} s",
        results.len() - n_failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if n_failed > 0 {
        std::process::exit(1);
    }
}

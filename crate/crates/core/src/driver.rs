//! The outer loop: BC pretraining, then `G` Grow steps each followed by `I`
//! Improve steps, with evaluation, Best-of-N inference and the on-disk run
//! layout.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DecodeMode, ExperimentConfig};
use crate::grow::{self, AnnotatedExample, GrowDataset, GrowParams, Origin};
use crate::improve::{self, ImproveRow, Objective, ThresholdSchedule};
use crate::losses::{self, ValueNet};
use crate::mdp::TokenId;
use crate::policy::{init_policy, PolicyCheckpoint, SequencePolicy};
use crate::seeding::{self, Rng};
use crate::task::{make_splits, EditDistanceReward, Example, RewardFn, Splits};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("{phase}: {message}")]
    Phase { phase: String, message: String },
    #[error("run directory: {0}")]
    Io(#[from] std::io::Error),
}

fn phase_err(phase: impl Into<String>) -> impl FnOnce(&dyn std::fmt::Display) -> DriverError {
    let phase = phase.into();
    move |e| DriverError::Phase {
        phase,
        message: e.to_string(),
    }
}

macro_rules! phase {
    ($phase:expr, $e:expr) => {
        $e.map_err(|e| phase_err($phase)(&e))
    };
}

/// Mean reward on `contexts`: `n_samples` tempered samples per context, or
/// one greedy decode. Context `i` samples from stream `i` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    policy: &dyn SequencePolicy,
    contexts: &[Example],
    reward_fn: &dyn RewardFn,
    mode: DecodeMode,
    n_samples: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> f64 {
    if contexts.is_empty() {
        return 0.0;
    }
    let per: Vec<f64> = contexts
        .par_iter()
        .enumerate()
        .map(|(i, e)| match mode {
            DecodeMode::Greedy => reward_fn.score(&e.source, &policy.greedy(&e.source, max_len)),
            DecodeMode::Sample => {
                let mut rng = seeding::stream_rng(seed, i as u64);
                let ys = policy.sample_many(&e.source, n_samples, temperature, max_len, &mut rng);
                ys.iter().map(|y| reward_fn.score(&e.source, y)).sum::<f64>() / n_samples as f64
            }
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// Highest-reward sample among `n` draws; the earliest draw wins ties.
pub fn best_of_n(
    policy: &dyn SequencePolicy,
    source: &[TokenId],
    n: usize,
    reward_fn: &dyn RewardFn,
    temperature: f64,
    max_len: usize,
    rng: &mut Rng,
) -> (Vec<TokenId>, f64) {
    let ys = policy.sample_many(source, n.max(1), temperature, max_len, rng);
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for y in ys {
        let r = reward_fn.score(source, &y);
        if r > best.1 {
            best = (y, r);
        }
    }
    best
}

/// Mean Best-of-N reward over `contexts`.
pub fn best_of_n_reward(
    policy: &dyn SequencePolicy,
    contexts: &[Example],
    n: usize,
    reward_fn: &dyn RewardFn,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> f64 {
    let per: Vec<f64> = contexts
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut rng = seeding::stream_rng(seed, i as u64);
            best_of_n(policy, &e.source, n, reward_fn, temperature, max_len, &mut rng).1
        })
        .collect();
    per.iter().sum::<f64>() / per.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub phase: String,
    pub grow: usize,
    pub improve: usize,
    pub tau: String,
    pub eval_reward: f64,
    pub steps: usize,
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["phase", "grow", "improve", "tau", "eval_reward", "steps"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.phase.clone(),
            r.grow.to_string(),
            r.improve.to_string(),
            r.tau.clone(),
            format!("{:.6}", r.eval_reward),
            r.steps.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub metrics: Vec<MetricRow>,
    pub improve: Vec<ImproveRow>,
    /// Mean sampled reward of each Grow dataset.
    pub grow_values: Vec<f64>,
    pub checkpoints: Vec<String>,
    pub final_eval_reward: f64,
    pub final_test_reward: f64,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn distinct_samples(&self) -> usize {
        self.config.n_per_context * self.config.n_train * self.config.grows
    }
}

/// Artifact writer for one run directory; a no-op when there is none.
struct RunDir {
    root: Option<PathBuf>,
    log: Option<fs::File>,
}

impl RunDir {
    fn new(root: Option<&Path>) -> Result<Self, DriverError> {
        let Some(root) = root else {
            return Ok(RunDir { root: None, log: None });
        };
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("datasets"))?;
        let _ = fs::remove_file(root.join("run.json"));
        let log = fs::File::create(root.join("run.log"))?;
        Ok(RunDir {
            root: Some(root.to_path_buf()),
            log: Some(log),
        })
    }

    fn path(&self, rel: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(rel))
    }

    fn write(&self, rel: &str, contents: &str) -> Result<(), DriverError> {
        if let Some(p) = self.path(rel) {
            fs::write(p, contents)?;
        }
        Ok(())
    }

    fn log(&mut self, line: &str) {
        log::info!("{line}");
        if let Some(f) = &mut self.log {
            let _ = writeln!(f, "{line}");
        }
    }
}

/// Everything a run needs besides the evolving policy.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub splits: Splits,
    pub reward: EditDistanceReward,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Self {
        let task = config.task();
        let splits = make_splits(
            &task,
            [config.n_train, config.n_eval, config.n_test],
            seeding::derive(config.seed, "data", 0),
        );
        Experiment {
            reward: EditDistanceReward::new(task),
            splits,
            config,
        }
    }

    fn max_len(&self) -> usize {
        self.config.task().output_max_len()
    }

    pub fn eval_reward(&self, policy: &dyn SequencePolicy, contexts: &[Example]) -> f64 {
        evaluate(
            policy,
            contexts,
            &self.reward,
            self.config.eval_mode,
            self.config.eval_samples,
            self.config.temperature,
            self.max_len(),
            seeding::derive(self.config.seed, "eval", 0),
        )
    }

    pub fn eval_nll(&self, policy: &PolicyCheckpoint) -> f64 {
        let recs: Vec<AnnotatedExample> = self
            .splits
            .eval
            .iter()
            .map(|e| AnnotatedExample {
                source: e.source.clone(),
                output: e.reference.clone(),
                reward: Some(1.0),
                origin: Origin::Original,
                grow: 0,
                source_id: 0,
            })
            .collect();
        let refs: Vec<&AnnotatedExample> = recs.iter().collect();
        losses::bc_loss(policy, &refs).unwrap_or(f64::INFINITY)
    }

    pub fn init_policy(&self) -> Result<PolicyCheckpoint, DriverError> {
        let mut p = phase!(
            "init",
            init_policy(
                self.config.policy_config(),
                self.config.task().vocab(),
                seeding::derive(self.config.seed, "init", 0),
            )
        )?;
        p.set_precision(self.config.precision());
        Ok(p)
    }

    /// BC on the original data with early stopping on eval NLL.
    pub fn pretrain(&self) -> Result<(PolicyCheckpoint, usize), DriverError> {
        let policy = self.init_policy()?;
        let data = phase!("pretrain", GrowDataset::from_examples(&self.splits.train, &self.reward))?;
        let refs: Vec<&AnnotatedExample> = data.records.iter().collect();
        let out = phase!(
            "pretrain",
            improve::fit(&policy, &refs, &Objective::bc(), &self.config.pretrain(), &|p| -self.eval_nll(p))
        )?;
        Ok((out.best, out.steps))
    }

    pub fn grow(&self, policy: &PolicyCheckpoint, g: usize) -> Result<GrowDataset, DriverError> {
        let params = GrowParams {
            n_per_context: self.config.n_per_context,
            temperature: self.config.temperature,
            max_len: self.max_len(),
            grow_index: g,
            seed: seeding::derive(self.config.seed, "grow", g as u64),
        };
        phase!(format!("grow {g}"), grow::grow(policy, &self.splits.train, params, &self.reward))
    }

    pub fn train_value(&self, dataset: &GrowDataset, g: usize) -> Result<ValueNet, DriverError> {
        let label = format!("value {g}");
        let mut v = phase!(
            label.clone(),
            ValueNet::new(self.config.policy_config(), seeding::derive(self.config.seed, "value-init", g as u64))
        )?;
        v.net.set_precision(self.config.precision());
        phase!(label, losses::train_value_bve(&mut v, &dataset.records, &self.config.value_train(g)))?;
        Ok(v)
    }

    /// The `I` thresholds used at grow `g`. A global schedule skips
    /// candidates at or below the sampling policy's value.
    pub fn schedule_for(&self, dataset: &GrowDataset) -> Result<ThresholdSchedule, DriverError> {
        let full = self.config.schedule();
        let i = self.config.improves;
        let ThresholdSchedule::Global(values) = &full else {
            return Ok(full.truncated(i));
        };
        let v = dataset.sampled_value().unwrap_or(f64::NEG_INFINITY);
        let above: Vec<f64> = values.iter().copied().filter(|&t| t > v).collect();
        if above.len() >= i {
            return Ok(ThresholdSchedule::Global(above[..i].to_vec()));
        }
        if self.config.allow_low_threshold {
            return Ok(ThresholdSchedule::Global(values[values.len() - i..].to_vec()));
        }
        Err(DriverError::Phase {
            phase: format!("improve {}", dataset.grow),
            message: format!(
                "only {} candidate thresholds exceed the sampling value {v:.6}, {i} needed",
                above.len()
            ),
        })
    }

    #[allow(clippy::type_complexity)]
    pub fn improve(
        &self,
        start: &PolicyCheckpoint,
        dataset: &GrowDataset,
        bc: &PolicyCheckpoint,
        value: Option<&ValueNet>,
    ) -> Result<(PolicyCheckpoint, Vec<ImproveRow>, Vec<PolicyCheckpoint>), DriverError> {
        let g = dataset.grow;
        let schedule = self.schedule_for(dataset)?;
        let objective = Objective {
            loss: self.config.loss_spec(),
            value,
            prior: Some(bc),
        };
        phase!(
            format!("improve {g}"),
            improve::improve_schedule(
                start,
                dataset,
                &schedule,
                &objective,
                &self.config.improve_settings(g),
                &|p| self.eval_reward(p, &self.splits.eval),
            )
        )
    }
}

/// Runs the full loop; with `out` set, writes the run directory as it goes.
pub fn run_rest(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<(PolicyCheckpoint, RunRecord), DriverError> {
    let start = Instant::now();
    let mut dir = RunDir::new(out)?;
    dir.write("config.toml", &config.to_toml())?;
    let exp = Experiment::new(config.clone());
    let vocab = config.task().vocab();
    let mut metrics = Vec::new();
    let mut improve_rows = Vec::new();
    let mut checkpoints = Vec::new();
    let mut grow_values = Vec::new();

    dir.log(&format!("run {}: G={} I={} loss={}", config.run_name, config.grows, config.improves, config.loss));
    let (bc, steps) = exp.pretrain()?;
    let bc_reward = exp.eval_reward(&bc, &exp.splits.eval);
    dir.log(&format!("pretrain: {steps} steps, eval nll {:.5}, eval reward {bc_reward:.5}", exp.eval_nll(&bc)));
    if let Some(p) = dir.path("checkpoints/bc.json") {
        phase!("pretrain", bc.save(&p))?;
    }
    checkpoints.push("bc".to_string());
    metrics.push(MetricRow {
        phase: "pretrain".into(),
        grow: 0,
        improve: 0,
        tau: String::new(),
        eval_reward: bc_reward,
        steps,
    });
    dir.write("metrics.csv", &metrics_to_csv(&metrics))?;

    let mut current = bc.clone();
    let mut final_eval = bc_reward;
    let mut earlier: Vec<AnnotatedExample> = Vec::new();
    for g in 1..=config.grows {
        let mut dataset = exp.grow(&current, g)?;
        if config.reuse_samples {
            let mut records = dataset.records.clone();
            records.extend(earlier.iter().cloned());
            earlier.extend(dataset.records.iter().filter(|r| r.origin == Origin::Sampled).cloned());
            dataset = GrowDataset::from_records(records, g);
        }
        let v_hat = dataset.sampled_value().unwrap_or(0.0);
        grow_values.push(v_hat);
        dir.log(&format!(
            "grow {g}: {} records ({} sampled), sampled value {v_hat:.5}",
            dataset.len(),
            dataset.n_sampled
        ));
        if let Some(p) = dir.path(&format!("datasets/grow_{g}.tsv")) {
            phase!(format!("grow {g}"), grow::save(&dataset, &vocab, &p))?;
        }

        let value = if config.loss_spec().needs_value() {
            let v = exp.train_value(&dataset, g)?;
            let diag = phase!(format!("value {g}"), losses::value_diagnostics(&v, &dataset.records))?;
            dir.log(&format!(
                "value {g}: kendall {:.4} spearman {:.4}{}",
                diag.kendall,
                diag.spearman,
                if diag.degenerate { " (degenerate)" } else { "" }
            ));
            Some(v)
        } else {
            None
        };

        let start_policy = if config.restart_from_bc { &bc } else { &current };
        let (next, rows, ckpts) = exp.improve(start_policy, &dataset, &bc, value.as_ref())?;
        for (row, ck) in rows.iter().zip(&ckpts) {
            if let Some(p) = dir.path(&format!("checkpoints/{}.json", row.checkpoint)) {
                phase!(format!("improve {g}"), ck.save(&p))?;
            }
            checkpoints.push(row.checkpoint.clone());
            dir.log(&format!(
                "improve {g}.{}: tau {} kept {} steps {} eval reward {:.5}",
                row.improve, row.tau, row.kept, row.steps, row.best_eval_reward
            ));
            metrics.push(MetricRow {
                phase: "improve".into(),
                grow: g,
                improve: row.improve,
                tau: row.tau.clone(),
                eval_reward: row.best_eval_reward,
                steps: row.steps,
            });
            final_eval = row.best_eval_reward;
        }
        improve_rows.extend(rows);
        dir.write("metrics.csv", &metrics_to_csv(&metrics))?;
        dir.write("improve_report.csv", &improve::rows_to_csv(&improve_rows))?;
        if config.improves > 0 {
            current = next;
        }
    }
    if config.grows == 0 {
        dir.write("improve_report.csv", &improve::rows_to_csv(&[]))?;
    }

    let final_test = exp.eval_reward(&current, &exp.splits.test);
    dir.log(&format!("final: eval reward {final_eval:.5}, test reward {final_test:.5}"));
    if let Some(p) = dir.path("checkpoints/final.json") {
        phase!("final", current.save(&p))?;
    }
    let record = RunRecord {
        config: config.clone(),
        metrics,
        improve: improve_rows,
        grow_values,
        checkpoints,
        final_eval_reward: final_eval,
        final_test_reward: final_test,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    dir.write("run.json", &serde_json::to_string_pretty(&record).expect("record serializes"))?;
    Ok((current, record))
}

pub fn load_record(dir: &Path) -> Option<RunRecord> {
    let text = fs::read_to_string(dir.join("run.json")).ok()?;
    serde_json::from_str(&text).ok()
}

/// Comparison table over completed runs; incomplete directories are
/// skipped with a warning.
pub fn emit_report(dirs: &[PathBuf]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run", "loss", "G", "I", "schedule", "final_eval_reward", "final_test_reward", "distinct_samples",
    ])
    .expect("in-memory write");
    if dirs.is_empty() {
        log::warn!("no run directories given");
    }
    for d in dirs {
        let Some(r) = load_record(d) else {
            log::warn!("skipping incomplete run {}", d.display());
            continue;
        };
        let c = &r.config;
        w.write_record([
            c.run_name.clone(),
            c.loss.clone(),
            c.grows.to_string(),
            c.improves.to_string(),
            c.schedule.clone(),
            format!("{:.6}", r.final_eval_reward),
            format!("{:.6}", r.final_test_reward),
            r.distinct_samples().to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

//! The Improve step: reward-threshold filtering, threshold schedules and
//! the eval-driven fine-tuning loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grow::{AnnotatedExample, GrowDataset};
use crate::losses::{self, LossContext, LossError, LossSpec, ValueNet};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::policy::PolicyCheckpoint;
use crate::train::Sampler;

#[derive(Debug, Error)]
pub enum ImproveError {
    #[error("no record passes the filter at threshold {0}")]
    EmptyFilter(String),
    #[error("record {0} has no reward annotation")]
    Unannotated(usize),
    #[error("training diverged at step {0}")]
    NonFinite(usize),
    #[error("invalid threshold schedule: {0}")]
    Schedule(String),
    #[error("first threshold {tau} does not exceed the sampling policy's value {value:.6}")]
    ThresholdBelowValue { tau: f64, value: f64 },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("improve step {index}: {source}")]
    Step {
        index: usize,
        #[source]
        source: Box<ImproveError>,
    },
}

/// A single global threshold or one threshold per source id.
#[derive(Debug, Clone, PartialEq)]
pub enum Threshold {
    Global(f64),
    PerSource(Vec<f64>),
}

impl Threshold {
    fn for_source(&self, source_id: usize) -> f64 {
        match self {
            Threshold::Global(t) => *t,
            Threshold::PerSource(v) => v[source_id],
        }
    }
}

/// Keep iff `reward > τ`. With `inclusive_zero` a threshold of exactly 0
/// keeps reward-0 records too.
pub fn passes(reward: f64, tau: f64, inclusive_zero: bool) -> bool {
    reward > tau || (inclusive_zero && tau == 0.0 && reward >= 0.0)
}

/// Indices of the records passing the filter.
pub fn filter(records: &[AnnotatedExample], threshold: &Threshold, inclusive_zero: bool) -> Result<Vec<usize>, ImproveError> {
    let mut kept = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let reward = r.reward.ok_or(ImproveError::Unannotated(i))?;
        if passes(reward, threshold.for_source(r.source_id), inclusive_zero) {
            kept.push(i);
        }
    }
    Ok(kept)
}

fn group_rewards(dataset: &GrowDataset) -> Result<Vec<Vec<f64>>, ImproveError> {
    let mut g = vec![Vec::new(); dataset.num_sources()];
    for (i, r) in dataset.records.iter().enumerate() {
        g[r.source_id].push(r.reward.ok_or(ImproveError::Unannotated(i))?);
    }
    Ok(g)
}

/// Nearest-rank percentile of each source's rewards.
pub fn percentile_thresholds(dataset: &GrowDataset, p: f64) -> Result<Vec<f64>, ImproveError> {
    Ok(group_rewards(dataset)?
        .into_iter()
        .map(|mut r| {
            r.sort_by(f64::total_cmp);
            let rank = ((p * r.len() as f64 / 100.0).ceil() as usize).max(1);
            r[rank.min(r.len()) - 1]
        })
        .collect())
}

/// `τ = γ·max + (1−γ)·mean` of each source's rewards.
pub fn interpolation_thresholds(dataset: &GrowDataset, gamma: f64) -> Result<Vec<f64>, ImproveError> {
    Ok(group_rewards(dataset)?
        .into_iter()
        .map(|r| {
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            gamma * max + (1.0 - gamma) * mean
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "lowercase")]
pub enum ThresholdSchedule {
    Global(Vec<f64>),
    Percentile(Vec<f64>),
    Interpolation(Vec<f64>),
}

impl ThresholdSchedule {
    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.values().is_empty()
    }

    pub fn values(&self) -> &[f64] {
        match self {
            ThresholdSchedule::Global(v) | ThresholdSchedule::Percentile(v) | ThresholdSchedule::Interpolation(v) => v,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ThresholdSchedule::Global(_) => "global",
            ThresholdSchedule::Percentile(_) => "percentile",
            ThresholdSchedule::Interpolation(_) => "interpolation",
        }
    }

    /// The first `n` steps.
    pub fn truncated(&self, n: usize) -> Self {
        let cut = |v: &Vec<f64>| v[..n.min(v.len())].to_vec();
        match self {
            ThresholdSchedule::Global(v) => ThresholdSchedule::Global(cut(v)),
            ThresholdSchedule::Percentile(v) => ThresholdSchedule::Percentile(cut(v)),
            ThresholdSchedule::Interpolation(v) => ThresholdSchedule::Interpolation(cut(v)),
        }
    }

    pub fn validate(&self) -> Result<(), ImproveError> {
        let bad = |m: String| Err(ImproveError::Schedule(m));
        match self {
            ThresholdSchedule::Global(v) => {
                if let Some(w) = v.windows(2).find(|w| !(w[0] < w[1])) {
                    return bad(format!("thresholds must be strictly increasing, found {} then {}", w[0], w[1]));
                }
                if let Some(t) = v.iter().find(|t| !t.is_finite()) {
                    return bad(format!("threshold {t} is not finite"));
                }
            }
            ThresholdSchedule::Percentile(v) => {
                if let Some(p) = v.iter().find(|p| !(0.0..100.0).contains(*p)) {
                    return bad(format!("percentile {p} outside [0, 100)"));
                }
            }
            ThresholdSchedule::Interpolation(v) => {
                if let Some(g) = v.iter().find(|g| !(0.0..=1.0).contains(*g)) {
                    return bad(format!("interpolation weight {g} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn threshold(&self, step: usize, dataset: &GrowDataset) -> Result<Threshold, ImproveError> {
        Ok(match self {
            ThresholdSchedule::Global(v) => Threshold::Global(v[step]),
            ThresholdSchedule::Percentile(v) => Threshold::PerSource(percentile_thresholds(dataset, v[step])?),
            ThresholdSchedule::Interpolation(v) => Threshold::PerSource(interpolation_thresholds(dataset, v[step])?),
        })
    }

    /// Report label for step `step`.
    pub fn label(&self, step: usize) -> String {
        match self {
            ThresholdSchedule::Global(v) => format!("{}", v[step]),
            ThresholdSchedule::Percentile(v) => format!("p{}", v[step]),
            ThresholdSchedule::Interpolation(v) => format!("g{}", v[step]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_interval: usize,
    pub patience: usize,
    pub budget: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            eval_interval: 200,
            patience: 3,
            budget: 3000,
            seed: 0,
        }
    }
}

/// What the fine-tuning loop optimizes beyond the records themselves.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub loss: LossSpec,
    pub value: Option<&'a ValueNet>,
    pub prior: Option<&'a PolicyCheckpoint>,
}

impl Objective<'_> {
    pub fn bc() -> Self {
        Objective {
            loss: LossSpec::Bc,
            value: None,
            prior: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: PolicyCheckpoint,
    pub best_eval: f64,
    /// Optimizer step at which `best` was taken; 0 when no evaluation ran.
    pub best_step: usize,
    pub steps: usize,
    /// `(step, eval score, minibatch loss)` per evaluation.
    pub history: Vec<(usize, f64, f64)>,
}

/// Minibatch training on `records` with periodic evaluation. Stops after
/// `patience` consecutive evaluations without a new best, or when the
/// budget runs out, and returns the best-scoring checkpoint seen.
pub fn fit(
    policy: &PolicyCheckpoint,
    records: &[&AnnotatedExample],
    objective: &Objective,
    cfg: &TrainConfig,
    evaluate: &dyn Fn(&PolicyCheckpoint) -> f64,
) -> Result<FitOutcome, ImproveError> {
    let mut current = policy.clone();
    let mut opt = OptimizerState::new(OptimizerConfig::adam(cfg.learning_rate), current.net.params());
    let mut sampler = Sampler::new(records.len(), cfg.seed);
    let mut out = FitOutcome {
        best: policy.clone(),
        best_eval: f64::NEG_INFINITY,
        best_step: 0,
        steps: 0,
        history: Vec::new(),
    };
    let mut stale = 0;
    for step in 1..=cfg.budget {
        let batch: Vec<&AnnotatedExample> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| records[i])
            .collect();
        let lambda = match objective.loss {
            LossSpec::Bvmpo {
                lambda_start,
                lambda_end,
                ..
            } => losses::lambda_at(step - 1, cfg.budget, lambda_start, lambda_end),
            _ => 0.0,
        };
        let ctx = LossContext {
            value: objective.value,
            prior: objective.prior,
            lambda,
        };
        let (loss, grads) = losses::loss_and_grad(&objective.loss, &current, &batch, &ctx)?;
        if !loss.is_finite() {
            return Err(ImproveError::NonFinite(step));
        }
        opt.step(current.net.params_mut(), &grads)
            .map_err(|_| ImproveError::NonFinite(step))?;
        out.steps = step;
        if step % cfg.eval_interval == 0 || step == cfg.budget {
            let score = evaluate(&current);
            out.history.push((step, score, loss));
            log::debug!("step {step}: loss {loss:.5} eval {score:.5}");
            if score > out.best_eval {
                out.best_eval = score;
                out.best = current.clone();
                out.best_step = step;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if out.history.is_empty() {
        out.best = current;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImproveRow {
    pub grow: usize,
    pub improve: usize,
    pub tau: String,
    pub kept: usize,
    pub steps: usize,
    pub best_eval_reward: f64,
    pub checkpoint: String,
}

pub fn rows_to_csv(rows: &[ImproveRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["grow", "improve", "tau", "kept", "steps", "best_eval_reward"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.grow.to_string(),
            r.improve.to_string(),
            r.tau.clone(),
            r.kept.to_string(),
            r.steps.to_string(),
            format!("{:.6}", r.best_eval_reward),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[derive(Debug, Clone, Copy)]
pub struct ImproveSettings {
    pub train: TrainConfig,
    pub lr_decay: f64,
    pub inclusive_zero: bool,
    /// Skip the check that the first global threshold exceeds the sampling
    /// policy's estimated value.
    pub allow_low_threshold: bool,
}

/// Filters at `threshold` and fine-tunes on what remains.
pub fn improve_step(
    policy: &PolicyCheckpoint,
    dataset: &GrowDataset,
    threshold: &Threshold,
    label: &str,
    objective: &Objective,
    settings: &ImproveSettings,
    evaluate: &dyn Fn(&PolicyCheckpoint) -> f64,
) -> Result<(PolicyCheckpoint, FitOutcome, usize), ImproveError> {
    let kept = filter(&dataset.records, threshold, settings.inclusive_zero)?;
    if kept.is_empty() {
        return Err(ImproveError::EmptyFilter(label.to_string()));
    }
    let records: Vec<&AnnotatedExample> = kept.iter().map(|&i| &dataset.records[i]).collect();
    let outcome = fit(policy, &records, objective, &settings.train, evaluate)?;
    Ok((outcome.best.clone(), outcome, kept.len()))
}

/// Runs one Improve step per threshold, each starting from the previous
/// step's best checkpoint with the learning rate scaled by `lr_decay`.
/// Returns the final policy, one report row per step and each step's
/// checkpoint.
pub fn improve_schedule(
    policy: &PolicyCheckpoint,
    dataset: &GrowDataset,
    schedule: &ThresholdSchedule,
    objective: &Objective,
    settings: &ImproveSettings,
    evaluate: &dyn Fn(&PolicyCheckpoint) -> f64,
) -> Result<(PolicyCheckpoint, Vec<ImproveRow>, Vec<PolicyCheckpoint>), ImproveError> {
    schedule.validate()?;
    if let (ThresholdSchedule::Global(v), Some(value)) = (schedule, dataset.sampled_value()) {
        if let Some(&tau) = v.first() {
            if !settings.allow_low_threshold && tau <= value {
                return Err(ImproveError::ThresholdBelowValue { tau, value });
            }
        }
    }
    let mut current = policy.clone();
    let mut rows = Vec::with_capacity(schedule.len());
    let mut checkpoints = Vec::with_capacity(schedule.len());
    for i in 0..schedule.len() {
        let wrap = |e| ImproveError::Step {
            index: i + 1,
            source: Box::new(e),
        };
        let threshold = schedule.threshold(i, dataset).map_err(wrap)?;
        let mut s = *settings;
        s.train.learning_rate = settings.train.learning_rate * settings.lr_decay.powi(i as i32);
        s.train.seed = crate::seeding::derive(settings.train.seed, "improve", i as u64);
        let label = schedule.label(i);
        let (next, outcome, kept) =
            improve_step(&current, dataset, &threshold, &label, objective, &s, evaluate).map_err(wrap)?;
        let lineage = crate::policy::Lineage {
            grow: dataset.grow,
            improve: i + 1,
            learning_rate: s.train.learning_rate,
        };
        current = next.with_lineage(lineage);
        checkpoints.push(current.clone());
        log::info!(
            "grow {} improve {} tau {label}: kept {kept}, {} steps, best eval {:.5}",
            dataset.grow,
            i + 1,
            outcome.steps,
            outcome.best_eval
        );
        rows.push(ImproveRow {
            grow: dataset.grow,
            improve: i + 1,
            tau: label,
            kept,
            steps: outcome.steps,
            best_eval_reward: outcome.best_eval,
            checkpoint: format!("grow{}_improve{}", dataset.grow, i + 1),
        });
    }
    Ok((current, rows, checkpoints))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grow::Origin;
    use crate::mdp::{Vocab, EOS};
    use crate::net::PolicyConfig;
    use crate::policy::init_policy;
    use proptest::prelude::*;
    use std::cell::Cell;

    fn rec(source_id: usize, reward: f64) -> AnnotatedExample {
        AnnotatedExample {
            source: vec![3 + source_id],
            output: vec![EOS],
            reward: Some(reward),
            origin: Origin::Sampled,
            grow: 1,
            source_id,
        }
    }

    fn dataset(groups: &[&[f64]]) -> GrowDataset {
        let records = groups
            .iter()
            .enumerate()
            .flat_map(|(s, rs)| rs.iter().map(move |&r| rec(s, r)))
            .collect();
        GrowDataset::from_records(records, 1)
    }

    #[test]
    fn global_filter_examples() {
        let d = dataset(&[&[0.5, 0.8, 0.95]]);
        assert_eq!(filter(&d.records, &Threshold::Global(0.7), false).unwrap().len(), 2);
        let d = dataset(&[&[0.0, 0.3, 1.0]]);
        assert_eq!(filter(&d.records, &Threshold::Global(0.0), false).unwrap(), vec![1, 2]);
        assert_eq!(filter(&d.records, &Threshold::Global(0.0), true).unwrap().len(), 3);
        assert!(filter(&d.records, &Threshold::Global(1.0), false).unwrap().is_empty());
        let mut u = d.records.clone();
        u[1].reward = None;
        assert!(matches!(filter(&u, &Threshold::Global(0.5), false), Err(ImproveError::Unannotated(1))));
    }

    #[test]
    fn percentile_examples() {
        let tenth: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let d = dataset(&[&tenth, &[0.01, 0.02, 0.03]]);
        let t = percentile_thresholds(&d, 90.0).unwrap();
        assert_eq!(t[0], 0.9);
        let kept = filter(&d.records, &Threshold::PerSource(t.clone()), false).unwrap();
        assert_eq!(kept, vec![9]);
        assert_ne!(t[0], t[1]);
        let t = percentile_thresholds(&d, 0.0).unwrap();
        assert_eq!(t, vec![0.1, 0.01]);
        assert_eq!(filter(&d.records, &Threshold::PerSource(t), false).unwrap().len(), 11);
    }

    #[test]
    fn interpolation_examples() {
        let d = dataset(&[&[1.0, 0.2, 0.6], &[0.3, 0.5]]);
        assert!((interpolation_thresholds(&d, 0.5).unwrap()[0] - 0.8).abs() < 1e-12);
        assert_eq!(interpolation_thresholds(&d, 1.0).unwrap(), vec![1.0, 0.5]);
        let t = interpolation_thresholds(&d, 0.0).unwrap();
        assert!((t[0] - 0.6).abs() < 1e-12 && (t[1] - 0.4).abs() < 1e-12);
        assert!(filter(&d.records, &Threshold::PerSource(interpolation_thresholds(&d, 1.0).unwrap()), false)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn schedule_validation() {
        assert!(ThresholdSchedule::Global(vec![0.9, 0.7]).validate().is_err());
        assert!(ThresholdSchedule::Global(vec![0.7, 0.7]).validate().is_err());
        assert!(ThresholdSchedule::Global(vec![0.0, 0.7, 0.8, 0.9, 0.95, 0.99]).validate().is_ok());
        assert!(ThresholdSchedule::Percentile(vec![100.0]).validate().is_err());
        assert!(ThresholdSchedule::Interpolation(vec![1.5]).validate().is_err());
        assert_eq!(
            ThresholdSchedule::Global(vec![0.7, 0.8, 0.9]).truncated(2),
            ThresholdSchedule::Global(vec![0.7, 0.8])
        );
    }

    proptest! {
        #[test]
        fn filter_matches_scan_and_nests(
            rewards in proptest::collection::vec(0.0f64..=1.0, 0..200),
            mut taus in proptest::collection::vec(0.0f64..1.0, 2..6),
        ) {
            let d = dataset(&[&rewards]);
            taus.sort_by(f64::total_cmp);
            let mut prev: Option<Vec<usize>> = None;
            for &t in &taus {
                let kept = filter(&d.records, &Threshold::Global(t), false).unwrap();
                let scan: Vec<usize> = (0..rewards.len()).filter(|&i| rewards[i] > t).collect();
                prop_assert_eq!(&kept, &scan);
                if let Some(p) = &prev {
                    prop_assert!(kept.iter().all(|i| p.contains(i)));
                }
                prev = Some(kept);
            }
        }
    }

    fn tiny_policy() -> PolicyCheckpoint {
        let vocab = Vocab::new(&['a', 'b']);
        let mut cfg = PolicyConfig::desk(vocab.len(), 3, 3);
        cfg.width = 8;
        cfg.ff_width = 8;
        cfg.layers = 1;
        init_policy(cfg, vocab, 1).unwrap()
    }

    #[test]
    fn best_checkpoint_is_returned() {
        let policy = tiny_policy();
        let data = [rec(0, 1.0)];
        let records: Vec<&AnnotatedExample> = data.iter().collect();
        let scores = [0.5, 0.7, 0.6];
        let calls = Cell::new(0);
        let snapshots = std::sync::Mutex::new(Vec::new());
        let eval = |p: &PolicyCheckpoint| {
            snapshots.lock().unwrap().push(p.net.flat_params());
            let s = scores[calls.get()];
            calls.set(calls.get() + 1);
            s
        };
        let cfg = TrainConfig {
            batch_size: 1,
            eval_interval: 5,
            budget: 15,
            ..Default::default()
        };
        let out = fit(&policy, &records, &Objective::bc(), &cfg, &eval).unwrap();
        assert_eq!(out.best_eval, 0.7);
        assert_eq!(out.best_step, 10);
        assert_eq!(out.best.net.flat_params(), snapshots.lock().unwrap()[1]);
        assert_eq!(out.steps, 15);
    }

    #[test]
    fn patience_stops_training() {
        let policy = tiny_policy();
        let data = [rec(0, 1.0)];
        let records: Vec<&AnnotatedExample> = data.iter().collect();
        let cfg = TrainConfig {
            batch_size: 1,
            eval_interval: 2,
            patience: 3,
            budget: 100,
            ..Default::default()
        };
        let out = fit(&policy, &records, &Objective::bc(), &cfg, &|_| 0.3).unwrap();
        assert_eq!(out.steps, 8);
        assert_eq!(out.best_step, 2);
    }

    #[test]
    fn bc_fit_reduces_nll() {
        let policy = tiny_policy();
        let data: Vec<AnnotatedExample> = (0..6)
            .map(|i| AnnotatedExample {
                source: vec![3 + i % 2, 4],
                output: vec![4 - i % 2, EOS],
                ..rec(0, 1.0)
            })
            .collect();
        let records: Vec<&AnnotatedExample> = data.iter().collect();
        let before = losses::bc_loss(&policy, &records).unwrap();
        let cfg = TrainConfig {
            batch_size: 6,
            learning_rate: 1e-2,
            eval_interval: 100,
            budget: 100,
            ..Default::default()
        };
        let out = fit(&policy, &records, &Objective::bc(), &cfg, &|p| -losses::bc_loss(p, &records).unwrap()).unwrap();
        let after = losses::bc_loss(&out.best, &records).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn schedule_errors() {
        let policy = tiny_policy();
        let d = dataset(&[&[0.2, 0.5, 0.6]]);
        let settings = ImproveSettings {
            train: TrainConfig {
                budget: 2,
                eval_interval: 1,
                ..Default::default()
            },
            lr_decay: 0.5,
            inclusive_zero: false,
            allow_low_threshold: false,
        };
        let err = improve_schedule(&policy, &d, &ThresholdSchedule::Global(vec![0.3]), &Objective::bc(), &settings, &|_| 0.0);
        assert!(matches!(err, Err(ImproveError::ThresholdBelowValue { .. })));
        let err = improve_schedule(&policy, &d, &ThresholdSchedule::Global(vec![0.55, 0.9]), &Objective::bc(), &settings, &|_| 0.0)
            .unwrap_err();
        match err {
            ImproveError::Step { index, source } => {
                assert_eq!(index, 2);
                assert!(source.to_string().contains("0.9"));
            }
            e => panic!("unexpected {e}"),
        }
    }
}

//! Improve-step objectives and the value function they rely on.
//!
//! Every policy loss here has the form
//! `(1/B) Σ_i [ −⟨C_i, log π_θ(·|s_t)⟩ + c_i ]`
//! where the coefficient matrix `C_i` (one row per output position, one
//! column per action) and the constant `c_i` are computed from rewards,
//! value predictions, a frozen prior or detached policy probabilities, and
//! never carry gradient. A [`LossPlan`] holds those per-record terms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grow::AnnotatedExample;
use crate::mdp::{terminal_returns, TokenId};
use crate::net::{NetError, PolicyConfig, Seq2Seq};
use crate::optim::{OptimError, OptimizerConfig, OptimizerState};
use crate::policy::{decoder_input, PolicyCheckpoint, PolicyError};
use crate::tape::{Tape, Var};
use crate::tensor::{log_softmax_in_place, Tensor, TensorError};
use crate::train;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid loss spec: {0}")]
    Invalid(String),
    #[error("this loss needs a behaviour prior")]
    MissingPrior,
    #[error("record {0} has no reward annotation")]
    Unannotated(usize),
    #[error("loss became non-finite at step {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossSpec {
    Bc,
    Gold { k: usize, w_min: f64 },
    Bvmpo { eta: f64, lambda_start: f64, lambda_end: f64 },
    Oac { gamma: f64 },
}

impl LossSpec {
    pub fn gold() -> Self {
        LossSpec::Gold { k: 5, w_min: 0.1 }
    }

    pub fn bvmpo() -> Self {
        LossSpec::Bvmpo {
            eta: 0.5,
            lambda_start: 1.0,
            lambda_end: 1e-5,
        }
    }

    pub fn oac() -> Self {
        LossSpec::Oac { gamma: 1.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Bc => "bc",
            LossSpec::Gold { .. } => "gold",
            LossSpec::Bvmpo { .. } => "bvmpo",
            LossSpec::Oac { .. } => "oac",
        }
    }

    pub fn needs_value(&self) -> bool {
        !matches!(self, LossSpec::Bc)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: &str| Err(LossError::Invalid(m.to_string()));
        match *self {
            LossSpec::Bc => Ok(()),
            LossSpec::Gold { k, w_min } => {
                if k == 0 {
                    return bad("gold k must be at least 1");
                }
                if !(w_min > 0.0 && w_min <= 1.0) {
                    return bad("gold w_min must lie in (0, 1]");
                }
                Ok(())
            }
            LossSpec::Bvmpo {
                eta,
                lambda_start,
                lambda_end,
            } => {
                if !(eta > 0.0) {
                    return bad("bvmpo eta must be positive");
                }
                if !(lambda_end > 0.0 && lambda_start >= lambda_end) {
                    return bad("bvmpo needs lambda_start >= lambda_end > 0");
                }
                Ok(())
            }
            LossSpec::Oac { gamma } => {
                if !(gamma > 0.0 && gamma <= 1.0) {
                    return bad("oac gamma must lie in (0, 1]");
                }
                Ok(())
            }
        }
    }
}

/// Log-linear anneal with exact endpoints.
pub fn lambda_at(step: usize, budget: usize, start: f64, end: f64) -> f64 {
    if step == 0 || budget == 0 {
        return start;
    }
    if step >= budget {
        return end;
    }
    let f = step as f64 / budget as f64;
    (start.ln() + f * (end.ln() - start.ln())).exp()
}

/// Scalar state value for every output position: entry `t` estimates the
/// return from the state before token `t` is emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub net: Seq2Seq,
}

impl ValueNet {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self, LossError> {
        Ok(ValueNet {
            net: Seq2Seq::new(config, 1, seed)?,
        })
    }

    pub fn predict(&self, source: &[TokenId], output: &[TokenId]) -> Result<Vec<f64>, LossError> {
        Ok(self
            .net
            .forward_rows(source, &decoder_input(output))?
            .into_iter()
            .map(|r| r[0])
            .collect())
    }

    /// Value of the last decision state, whose prefix fixes the output.
    pub fn terminal_value(&self, source: &[TokenId], output: &[TokenId]) -> Result<f64, LossError> {
        Ok(*self.predict(source, output)?.last().unwrap_or(&0.0))
    }
}

/// Detached inputs shared by the losses.
#[derive(Clone, Copy, Default)]
pub struct LossContext<'a> {
    pub value: Option<&'a ValueNet>,
    pub prior: Option<&'a PolicyCheckpoint>,
    /// Current KL coefficient for the behaviour-prior term.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Coefficients {
    Fixed(Tensor),
    /// `w_t·q_t` on the taken action, `w_t = max(π_θ(y_t|·), w_min)` read
    /// from the current (detached) policy.
    Gold { q: Vec<f64>, w_min: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordPlan {
    pub record: usize,
    pub actions: Vec<usize>,
    pub coeffs: Coefficients,
    pub constant: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossPlan {
    pub records: Vec<RecordPlan>,
    pub batch_size: usize,
}

fn one_hot(actions: &[usize], n_actions: usize, weights: &[f64]) -> Tensor {
    let mut c = Tensor::zeros(&[actions.len(), n_actions]);
    let d = c.data_mut();
    for (t, (&a, &w)) in actions.iter().zip(weights).enumerate() {
        d[t * n_actions + a] = w;
    }
    c
}

fn reward_of(r: &AnnotatedExample, i: usize) -> Result<f64, LossError> {
    r.reward.ok_or(LossError::Unannotated(i))
}

fn values_or_zero(ctx: &LossContext, r: &AnnotatedExample) -> Result<Vec<f64>, LossError> {
    match ctx.value {
        Some(v) => v.predict(&r.source, &r.output),
        None => Ok(vec![0.0; r.output.len()]),
    }
}

fn log_softmax_rows(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|mut r| {
            log_softmax_in_place(&mut r);
            r
        })
        .collect()
}

/// k-step truncated return with terminal-only reward and unit discount;
/// positions whose horizon stops short of the end bootstrap from `values`
/// when given, otherwise count nothing.
pub fn gold_returns(len: usize, reward: f64, k: usize, values: Option<&[f64]>) -> Vec<f64> {
    (1..=len)
        .map(|t| {
            if len - t < k {
                reward
            } else {
                values.map_or(0.0, |v| v[t + k - 1])
            }
        })
        .collect()
}

pub fn build_plan(
    spec: &LossSpec,
    policy: &PolicyCheckpoint,
    batch: &[&AnnotatedExample],
    ctx: &LossContext,
) -> Result<LossPlan, LossError> {
    spec.validate()?;
    let n_actions = policy.vocab.num_actions();
    let actions: Vec<Vec<usize>> = batch
        .iter()
        .map(|r| policy.actions(&r.output))
        .collect::<Result<_, _>>()?;
    let rewards: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(i, r)| reward_of(r, i))
        .collect::<Result<_, _>>()?;

    let records = match *spec {
        LossSpec::Bc => batch
            .iter()
            .enumerate()
            .map(|(i, _)| RecordPlan {
                record: i,
                coeffs: Coefficients::Fixed(one_hot(&actions[i], n_actions, &vec![1.0; actions[i].len()])),
                actions: actions[i].clone(),
                constant: 0.0,
            })
            .collect(),
        LossSpec::Gold { k, w_min } => batch
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let values = match ctx.value {
                    Some(v) => Some(v.predict(&r.source, &r.output)?),
                    None => None,
                };
                Ok(RecordPlan {
                    record: i,
                    coeffs: Coefficients::Gold {
                        q: gold_returns(r.output.len(), rewards[i], k, values.as_deref()),
                        w_min,
                    },
                    actions: actions[i].clone(),
                    constant: 0.0,
                })
            })
            .collect::<Result<_, LossError>>()?,
        LossSpec::Oac { gamma } => batch
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let v = values_or_zero(ctx, r)?;
                let g = terminal_returns(r.output.len(), rewards[i], gamma);
                let adv: Vec<f64> = g.iter().zip(&v).map(|(g, v)| g - v).collect();
                Ok(RecordPlan {
                    record: i,
                    coeffs: Coefficients::Fixed(one_hot(&actions[i], n_actions, &adv)),
                    actions: actions[i].clone(),
                    constant: 0.0,
                })
            })
            .collect::<Result<_, LossError>>()?,
        LossSpec::Bvmpo { eta, .. } => {
            let prior = ctx.prior.ok_or(LossError::MissingPrior)?;
            bvmpo_records(prior, batch, &actions, &rewards, eta, ctx, n_actions)?
        }
    };
    Ok(LossPlan {
        records,
        batch_size: batch.len(),
    })
}

/// Sequence-level advantages against the initial-state value
/// `A_i = r_i − V(s_1)`.
pub fn sequence_advantages(
    batch: &[&AnnotatedExample],
    value: Option<&ValueNet>,
) -> Result<Vec<f64>, LossError> {
    batch
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let base = match value {
                Some(v) => v.predict(&r.source, &r.output)?[0],
                None => 0.0,
            };
            Ok(reward_of(r, i)? - base)
        })
        .collect()
}

/// Indices of the upper half (rounded up) by advantage, and their weights
/// `ψ ∝ exp(A/η)` normalized over that half.
pub fn top_half_weights(adv: &[f64], eta: f64) -> (Vec<usize>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..adv.len()).collect();
    idx.sort_by(|&a, &b| adv[b].total_cmp(&adv[a]));
    idx.truncate(adv.len().div_ceil(2));
    let top = idx.iter().map(|&i| adv[i]).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = idx.iter().map(|&i| ((adv[i] - top) / eta).exp()).collect();
    let z: f64 = w.iter().sum();
    (idx, w.into_iter().map(|x| x / z).collect())
}

fn bvmpo_records(
    prior: &PolicyCheckpoint,
    batch: &[&AnnotatedExample],
    actions: &[Vec<usize>],
    _rewards: &[f64],
    eta: f64,
    ctx: &LossContext,
    n_actions: usize,
) -> Result<Vec<RecordPlan>, LossError> {
    let adv = sequence_advantages(batch, ctx.value)?;
    let (top, psi) = top_half_weights(&adv, eta);
    let mut weight = vec![0.0; batch.len()];
    for (&i, &w) in top.iter().zip(&psi) {
        // the plan divides by the batch size, the policy term should not
        weight[i] = w * batch.len() as f64;
    }
    let lambda = ctx.lambda;
    batch
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut c = one_hot(&actions[i], n_actions, &vec![weight[i]; actions[i].len()]);
            let mut constant = 0.0;
            if lambda > 0.0 {
                let q = prior.step_log_probs(&r.source, &r.output)?;
                let d = c.data_mut();
                for (t, row) in q.iter().enumerate() {
                    for (a, &lq) in row.iter().enumerate() {
                        let p = lq.exp();
                        d[t * n_actions + a] += lambda * p;
                        if p > 0.0 {
                            constant += lambda * p * lq;
                        }
                    }
                }
            }
            Ok(RecordPlan {
                record: i,
                actions: actions[i].clone(),
                coeffs: Coefficients::Fixed(c),
                constant,
            })
        })
        .collect()
}

/// The plan for `F(x,y;τ)·L`: records at or below `tau` are dropped and
/// contribute nothing, while the mean still runs over the whole batch.
pub fn weighted_plan(
    spec: &LossSpec,
    policy: &PolicyCheckpoint,
    batch: &[&AnnotatedExample],
    tau: f64,
    ctx: &LossContext,
) -> Result<LossPlan, LossError> {
    let mut kept = Vec::new();
    let mut map = Vec::new();
    for (i, r) in batch.iter().enumerate() {
        if reward_of(r, i)? > tau {
            kept.push(*r);
            map.push(i);
        }
    }
    let mut plan = build_plan(spec, policy, &kept, ctx)?;
    for rp in &mut plan.records {
        rp.record = map[rp.record];
    }
    plan.batch_size = batch.len();
    Ok(plan)
}

fn coefficient_matrix(rp: &RecordPlan, lsm: &[f64], n_actions: usize) -> Vec<f64> {
    match &rp.coeffs {
        Coefficients::Fixed(c) => c.data().to_vec(),
        Coefficients::Gold { q, w_min } => {
            let w: Vec<f64> = rp
                .actions
                .iter()
                .enumerate()
                .map(|(t, &a)| lsm[t * n_actions + a].exp().max(*w_min) * q[t])
                .collect();
            one_hot(&rp.actions, n_actions, &w).into_data()
        }
    }
}

impl LossPlan {
    /// Replaces policy-dependent coefficients by their values under
    /// `policy`, so the plan is a fixed function of the parameters.
    pub fn freeze(&self, policy: &PolicyCheckpoint, batch: &[&AnnotatedExample]) -> Result<LossPlan, LossError> {
        let n_actions = policy.vocab.num_actions();
        let records = self
            .records
            .iter()
            .map(|rp| {
                let r = batch[rp.record];
                let lsm: Vec<f64> = policy.step_log_probs(&r.source, &r.output)?.concat();
                let c = coefficient_matrix(rp, &lsm, n_actions);
                Ok(RecordPlan {
                    coeffs: Coefficients::Fixed(Tensor::matrix(rp.actions.len(), n_actions, c).expect("shape")),
                    ..rp.clone()
                })
            })
            .collect::<Result<_, LossError>>()?;
        Ok(LossPlan {
            records,
            batch_size: self.batch_size,
        })
    }

    pub fn value(&self, policy: &PolicyCheckpoint, batch: &[&AnnotatedExample]) -> Result<f64, LossError> {
        if self.batch_size == 0 {
            return Ok(0.0);
        }
        let n_actions = policy.vocab.num_actions();
        let parts: Vec<f64> = self
            .records
            .par_iter()
            .map(|rp| {
                let r = batch[rp.record];
                let lsm: Vec<f64> = log_softmax_rows(policy.net.forward_rows(&r.source, &decoder_input(&r.output))?).concat();
                let c = coefficient_matrix(rp, &lsm, n_actions);
                let dot: f64 = c.iter().zip(&lsm).map(|(a, b)| a * b).sum();
                Ok(rp.constant - dot)
            })
            .collect::<Result<_, LossError>>()?;
        Ok(parts.iter().sum::<f64>() / self.batch_size as f64)
    }

    pub fn value_and_grad(
        &self,
        policy: &PolicyCheckpoint,
        batch: &[&AnnotatedExample],
    ) -> Result<(f64, Vec<Tensor>), LossError> {
        let net = &policy.net;
        if self.batch_size == 0 {
            return Ok((0.0, net.params().iter().map(|t| Tensor::zeros(t.shape())).collect()));
        }
        let n_actions = policy.vocab.num_actions();
        let inv_b = 1.0 / self.batch_size as f64;
        let (loss, grads) = train::batch_gradient(net, self.records.len(), |tape, p, k| {
            let rp = &self.records[k];
            let r = batch[rp.record];
            let lsm = record_log_probs(net, tape, p, &r.source, &r.output)?;
            let c = coefficient_matrix(rp, tape.value(lsm).data(), n_actions);
            let c = Tensor::matrix(rp.actions.len(), n_actions, c)?;
            let dot = tape.dot_const(lsm, &c)?;
            Ok(Some(tape.scale(dot, -inv_b)))
        })?;
        let constant: f64 = self.records.iter().map(|r| r.constant).sum::<f64>() * inv_b;
        Ok((loss + constant, grads))
    }
}

fn record_log_probs<'a>(
    net: &Seq2Seq,
    tape: &mut Tape<'a>,
    p: &[Var],
    source: &[TokenId],
    output: &[TokenId],
) -> Result<Var, NetError> {
    let logits = net.forward(tape, p, source, &decoder_input(output))?;
    Ok(tape.log_softmax_rows(logits)?)
}

pub fn loss_value(
    spec: &LossSpec,
    policy: &PolicyCheckpoint,
    batch: &[&AnnotatedExample],
    ctx: &LossContext,
) -> Result<f64, LossError> {
    build_plan(spec, policy, batch, ctx)?.value(policy, batch)
}

pub fn loss_and_grad(
    spec: &LossSpec,
    policy: &PolicyCheckpoint,
    batch: &[&AnnotatedExample],
    ctx: &LossContext,
) -> Result<(f64, Vec<Tensor>), LossError> {
    build_plan(spec, policy, batch, ctx)?.value_and_grad(policy, batch)
}

/// Mean negative log-likelihood of the batch.
pub fn bc_loss(policy: &PolicyCheckpoint, batch: &[&AnnotatedExample]) -> Result<f64, LossError> {
    loss_value(&LossSpec::Bc, policy, batch, &LossContext::default())
}

pub fn weighted_objective(
    spec: &LossSpec,
    policy: &PolicyCheckpoint,
    batch: &[&AnnotatedExample],
    tau: f64,
    ctx: &LossContext,
) -> Result<f64, LossError> {
    weighted_plan(spec, policy, batch, tau, ctx)?.value(policy, batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueTrainConfig {
    pub gamma: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ValueTrainConfig {
    fn default() -> Self {
        ValueTrainConfig {
            gamma: 1.0,
            steps: 20000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

fn value_targets(r: &AnnotatedExample, gamma: f64, i: usize) -> Result<Tensor, LossError> {
    let g = terminal_returns(r.output.len(), reward_of(r, i)?, gamma);
    Ok(Tensor::matrix(g.len(), 1, g.into_iter().map(|x| -x).collect())?)
}

/// Mean over the batch of the per-position mean squared error to
/// `G_t = γ^{T−t}·r`.
pub fn value_loss_and_grad(
    value: &ValueNet,
    batch: &[&AnnotatedExample],
    gamma: f64,
) -> Result<(f64, Vec<Tensor>), LossError> {
    let inv_b = 1.0 / batch.len().max(1) as f64;
    let net = &value.net;
    let targets: Vec<Tensor> = batch
        .iter()
        .enumerate()
        .map(|(i, r)| value_targets(r, gamma, i))
        .collect::<Result<_, _>>()?;
    Ok(train::batch_gradient(net, batch.len(), |tape, p, i| {
        let r = batch[i];
        let v = net.forward(tape, p, &r.source, &decoder_input(&r.output))?;
        let d = tape.add_const(v, &targets[i])?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        Ok(Some(tape.scale(s, inv_b / r.output.len() as f64)))
    })?)
}

/// Behaviour value estimation: regress every position onto its Monte Carlo
/// return on the given records, with the learning rate decayed linearly to
/// zero over the budget. Returns the minibatch loss per step.
pub fn train_value_bve(
    value: &mut ValueNet,
    records: &[AnnotatedExample],
    cfg: &ValueTrainConfig,
) -> Result<Vec<f64>, LossError> {
    let mut opt = OptimizerState::new(OptimizerConfig::adam(cfg.learning_rate), value.net.params());
    let mut sampler = train::Sampler::new(records.len(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&AnnotatedExample> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| &records[i])
            .collect();
        let (loss, grads) = value_loss_and_grad(value, &batch, cfg.gamma)?;
        if !loss.is_finite() {
            return Err(LossError::NonFinite(step));
        }
        opt.set_learning_rate(cfg.learning_rate * (1.0 - step as f64 / cfg.steps as f64));
        opt.step(value.net.params_mut(), &grads)?;
        losses.push(loss);
    }
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCorrelation {
    pub kendall: f64,
    pub spearman: f64,
    /// Set when either side is constant; both correlations are then 0.
    pub degenerate: bool,
}

/// Kendall tau-b.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut concordant, mut discordant, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tx += 1,
                (_, 0) => ty += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n1 = (concordant + discordant + tx) as f64;
    let n2 = (concordant + discordant + ty) as f64;
    (n1 > 0.0 && n2 > 0.0).then(|| (concordant - discordant) as f64 / (n1 * n2).sqrt())
}

/// Ranks from 1, ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

pub fn rank_correlation(pred: &[f64], target: &[f64]) -> RankCorrelation {
    match (kendall_tau(pred, target), spearman(pred, target)) {
        (Some(kendall), Some(spearman)) => RankCorrelation {
            kendall,
            spearman,
            degenerate: false,
        },
        _ => RankCorrelation {
            kendall: 0.0,
            spearman: 0.0,
            degenerate: true,
        },
    }
}

/// Rank agreement between terminal-state values and annotated rewards.
pub fn value_diagnostics(value: &ValueNet, records: &[AnnotatedExample]) -> Result<RankCorrelation, LossError> {
    let pred: Vec<f64> = records
        .par_iter()
        .map(|r| value.terminal_value(&r.source, &r.output))
        .collect::<Result<_, _>>()?;
    let target: Vec<f64> = records
        .iter()
        .enumerate()
        .map(|(i, r)| reward_of(r, i))
        .collect::<Result<_, _>>()?;
    Ok(rank_correlation(&pred, &target))
}

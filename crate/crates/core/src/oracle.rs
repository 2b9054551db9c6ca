//! Exact, enumeration-based version of the Grow/Improve loop on tabular
//! problems: the data/policy mixture is filtered by reward and projected
//! back onto the (unconstrained) conditional family. Also hosts the check
//! that the filtered-objective gradient splits into its sampled and
//! original-data parts.

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::grow::{AnnotatedExample, Origin};
use crate::losses::{Coefficients, LossError, LossPlan, RecordPlan};
use crate::mdp::{TokenId, EOS};
use crate::net::NetError;
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::policy::{decoder_input, PolicyCheckpoint};
use crate::seeding;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("mixture weight {0} outside [0, 1]")]
    Lambda(f64),
    #[error("threshold {0} removes all probability mass")]
    NoMass(f64),
    #[error("threshold {0} removes the mass of every context")]
    AllContextsDead(f64),
    #[error("invalid table: {0}")]
    Table(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub const ROW_TOLERANCE: f64 = 1e-12;

/// Every letter string of length `0..=max_letters` over `n_letters`
/// letters, terminated by EOS; length-major, then lexicographic.
pub fn enumerate_outputs(n_letters: usize, max_letters: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![vec![EOS]];
    let mut layer: Vec<Vec<TokenId>> = vec![vec![]];
    for _ in 0..max_letters {
        layer = layer
            .iter()
            .flat_map(|p| {
                (0..n_letters).map(move |l| {
                    let mut q = p.clone();
                    q.push(3 + l);
                    q
                })
            })
            .collect();
        out.extend(layer.iter().map(|p| {
            let mut q = p.clone();
            q.push(EOS);
            q
        }));
    }
    out
}

fn check_rows(rows: &[Vec<f64>], width: usize, what: &str) -> Result<(), OracleError> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(OracleError::Table(format!("{what} row {i} has {} entries, expected {width}", r.len())));
        }
        if r.iter().any(|&v| !(v >= 0.0)) {
            return Err(OracleError::Table(format!("{what} row {i} has a negative entry")));
        }
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > ROW_TOLERANCE {
            return Err(OracleError::Table(format!("{what} row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// `p(x)` and `p(y|x)` over finite context and output sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDistribution {
    pub outputs: Vec<Vec<TokenId>>,
    pub p_x: Vec<f64>,
    pub p_y: Vec<Vec<f64>>,
}

impl TabularDistribution {
    pub fn new(outputs: Vec<Vec<TokenId>>, p_x: Vec<f64>, p_y: Vec<Vec<f64>>) -> Result<Self, OracleError> {
        check_rows(std::slice::from_ref(&p_x), p_y.len(), "p(x)")?;
        check_rows(&p_y, outputs.len(), "p(y|x)")?;
        Ok(TabularDistribution { outputs, p_x, p_y })
    }

    pub fn n_contexts(&self) -> usize {
        self.p_x.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub table: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self, OracleError> {
        let w = table.first().map_or(0, |r| r.len());
        check_rows(&table, w, "π(y|x)")?;
        Ok(TabularPolicy { table })
    }
}

/// The unconstrained minimizer of `KL(p(x,y) ‖ π(x,y))` is `p(y|x)`.
pub fn exact_bc_fit(dist: &TabularDistribution) -> TabularPolicy {
    TabularPolicy {
        table: dist.p_y.clone(),
    }
}

/// `Σ_x p(x) Σ_y p(y|x) log(p(y|x)/π(y|x))`.
pub fn kl(p_x: &[f64], p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    p_x.iter()
        .zip(p.iter().zip(q))
        .map(|(&px, (pr, qr))| {
            px * pr
                .iter()
                .zip(qr)
                .filter(|(&a, _)| a > 0.0)
                .map(|(&a, &b)| a * (a / b).ln())
                .sum::<f64>()
        })
        .sum()
}

/// `Σ_x p(x) Σ_y π(y|x) R(x,y)`.
pub fn expected_reward(policy: &TabularPolicy, p_x: &[f64], reward: &[Vec<f64>]) -> f64 {
    let mut v = 0.0;
    for (x, &px) in p_x.iter().enumerate() {
        let mut row = 0.0;
        for (y, &pi) in policy.table[x].iter().enumerate() {
            row += pi * reward[x][y];
        }
        v += px * row;
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredMixture {
    /// Unnormalized joint `{(1−λ)p(x,y) + λπ(x,y)}·I(R(x,y) > τ)`.
    pub table: Vec<Vec<f64>>,
    pub normalizer: f64,
}

pub fn filtered_mixture(
    dist: &TabularDistribution,
    policy: &TabularPolicy,
    lambda: f64,
    tau: f64,
    reward: &[Vec<f64>],
) -> Result<FilteredMixture, OracleError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(OracleError::Lambda(lambda));
    }
    let table: Vec<Vec<f64>> = (0..dist.n_contexts())
        .map(|x| {
            (0..dist.n_outputs())
                .map(|y| {
                    if reward[x][y] > tau {
                        dist.p_x[x] * ((1.0 - lambda) * dist.p_y[x][y] + lambda * policy.table[x][y])
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let normalizer: f64 = table.iter().flatten().sum();
    if normalizer <= 0.0 {
        return Err(OracleError::NoMass(tau));
    }
    Ok(FilteredMixture { table, normalizer })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImproveResult {
    pub policy: TabularPolicy,
    /// Contexts with no surviving mass; they keep their previous row.
    pub dropped: Vec<usize>,
}

/// KL projection of the filtered mixture onto conditional tables: each
/// context's row becomes the mixture's conditional.
pub fn exact_improve(
    policy: &TabularPolicy,
    dist: &TabularDistribution,
    lambda: f64,
    tau: f64,
    reward: &[Vec<f64>],
) -> Result<ImproveResult, OracleError> {
    let mix = match filtered_mixture(dist, policy, lambda, tau, reward) {
        Err(OracleError::NoMass(t)) => return Err(OracleError::AllContextsDead(t)),
        r => r?,
    };
    let mut dropped = Vec::new();
    let table = mix
        .table
        .iter()
        .enumerate()
        .map(|(x, row)| {
            let z: f64 = row.iter().sum();
            if z > 0.0 {
                row.iter().map(|v| v / z).collect()
            } else {
                dropped.push(x);
                policy.table[x].clone()
            }
        })
        .collect();
    if !dropped.is_empty() {
        log::warn!("threshold {tau}: {} contexts keep their previous policy", dropped.len());
    }
    Ok(ImproveResult {
        policy: TabularPolicy { table },
        dropped,
    })
}

fn random_simplex(n: usize, rng: &mut seeding::Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = w.iter().sum();
    let mut row: Vec<f64> = w.iter().map(|v| v / s).collect();
    // put the rounding residue on the largest entry so the row sums to 1
    let err = 1.0 - row.iter().sum::<f64>();
    let i = crate::policy::argmax(&row);
    row[i] += err;
    row
}

/// A random instance: Dirichlet(1) rows for `p(x)` and `p(y|x)` and uniform
/// rewards in [0, 1).
pub fn random_instance(
    seed: u64,
    n_contexts: usize,
    n_letters: usize,
    max_letters: usize,
) -> (TabularDistribution, Vec<Vec<f64>>) {
    let mut rng = seeding::rng(seed);
    let outputs = enumerate_outputs(n_letters, max_letters);
    let ny = outputs.len();
    let p_x = random_simplex(n_contexts, &mut rng);
    let p_y = (0..n_contexts).map(|_| random_simplex(ny, &mut rng)).collect();
    let reward = (0..n_contexts)
        .map(|_| (0..ny).map(|_| rng.random::<f64>()).collect())
        .collect();
    (
        TabularDistribution::new(outputs, p_x, p_y).expect("random rows are normalized"),
        reward,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub step: usize,
    pub tau: f64,
    pub value: f64,
    pub dropped: usize,
}

/// Starting from the exact BC fit, repeatedly sets `τ` to the current value
/// and improves.
pub fn sweep(seeds: std::ops::Range<u64>, steps: usize, lambda: f64) -> Result<Vec<SweepRow>, OracleError> {
    let mut rows = Vec::new();
    for seed in seeds {
        let (dist, reward) = random_instance(seed, 4, 3, 3);
        let mut pi = exact_bc_fit(&dist);
        let mut v = expected_reward(&pi, &dist.p_x, &reward);
        rows.push(SweepRow {
            seed,
            step: 0,
            tau: f64::NAN,
            value: v,
            dropped: 0,
        });
        for step in 1..=steps {
            let tau = v;
            let r = exact_improve(&pi, &dist, lambda, tau, &reward)?;
            pi = r.policy;
            v = expected_reward(&pi, &dist.p_x, &reward);
            rows.push(SweepRow {
                seed,
                step,
                tau,
                value: v,
                dropped: r.dropped.len(),
            });
        }
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "step", "tau", "V"]).expect("in-memory write");
    for r in rows {
        let tau = if r.tau.is_nan() { String::new() } else { format!("{:.9}", r.tau) };
        w.write_record([r.seed.to_string(), r.step.to_string(), tau, format!("{:.9}", r.value)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// `π_θ(y|x)` of every output in `outputs`, one row per source. Rows need
/// not sum to one: the network may put mass on outputs outside the table.
pub fn neural_table(
    policy: &PolicyCheckpoint,
    sources: &[Vec<TokenId>],
    outputs: &[Vec<TokenId>],
) -> Result<Vec<Vec<f64>>, OracleError> {
    sources
        .iter()
        .map(|x| {
            outputs
                .iter()
                .map(|y| {
                    policy
                        .log_prob(x, y)
                        .map(|lp| lp.total.exp())
                        .map_err(|e| OracleError::Table(e.to_string()))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct NeuralFit {
    pub policy: PolicyCheckpoint,
    /// Steps taken; equal to the budget when the target was not reached.
    pub steps: usize,
    pub kl: f64,
}

/// NLL training of `policy` on `dist`, with context `i` encoded as
/// `sources[i]`. Each step is a full-batch Adam step on the exact expected
/// NLL `Σ_x p(x) Σ_y p(y|x)·(−log π_θ(y|x))`; the loss minus the entropy of
/// `p` is the KL to the exact fit, so training stops as soon as it drops
/// below `target_kl`.
pub fn neural_bc_fit(
    policy: &PolicyCheckpoint,
    dist: &TabularDistribution,
    sources: &[Vec<TokenId>],
    budget: usize,
    learning_rate: f64,
    target_kl: f64,
) -> Result<NeuralFit, OracleError> {
    if sources.len() != dist.n_contexts() {
        return Err(OracleError::Table(format!(
            "{} sources for {} contexts",
            sources.len(),
            dist.n_contexts()
        )));
    }
    let mut records = Vec::new();
    let mut plans = Vec::new();
    let mut entropy = 0.0;
    for (i, x) in sources.iter().enumerate() {
        for (j, y) in dist.outputs.iter().enumerate() {
            let w = dist.p_x[i] * dist.p_y[i][j];
            if w <= 0.0 {
                continue;
            }
            entropy -= w * dist.p_y[i][j].ln();
            let actions = policy.actions(y).map_err(|e| OracleError::Table(e.to_string()))?;
            let n = policy.vocab.num_actions();
            let mut c = Tensor::zeros(&[actions.len(), n]);
            for (t, &a) in actions.iter().enumerate() {
                c.data_mut()[t * n + a] = w;
            }
            plans.push(RecordPlan {
                record: records.len(),
                actions,
                coeffs: Coefficients::Fixed(c),
                constant: 0.0,
            });
            records.push(AnnotatedExample {
                source: x.clone(),
                output: y.clone(),
                reward: None,
                origin: Origin::Original,
                grow: 0,
                source_id: i,
            });
        }
    }
    let plan = LossPlan {
        records: plans,
        batch_size: 1,
    };
    let batch: Vec<&AnnotatedExample> = records.iter().collect();
    let mut current = policy.clone();
    let mut opt = OptimizerState::new(OptimizerConfig::adam(learning_rate), current.net.params());
    let to_table = |e: LossError| OracleError::Table(e.to_string());
    for step in 0..budget {
        let (loss, grads) = plan.value_and_grad(&current, &batch).map_err(to_table)?;
        let kl = loss - entropy;
        if kl < target_kl {
            return Ok(NeuralFit { policy: current, steps: step, kl });
        }
        opt.step(current.net.params_mut(), &grads)
            .map_err(|e| OracleError::Table(e.to_string()))?;
    }
    let kl = plan.value(&current, &batch).map_err(to_table)? - entropy;
    Ok(NeuralFit {
        policy: current,
        steps: budget,
        kl,
    })
}

fn sequence_nll<'a>(
    policy: &PolicyCheckpoint,
    tape: &mut Tape<'a>,
    p: &[Var],
    r: &AnnotatedExample,
) -> Result<Var, OracleError> {
    let actions = policy.actions(&r.output).map_err(|e| OracleError::Table(e.to_string()))?;
    let logits = policy.net.forward(tape, p, &r.source, &decoder_input(&r.output))?;
    let lsm = tape.log_softmax_rows(logits).map_err(NetError::from)?;
    let n = policy.vocab.num_actions();
    let mut sel = Tensor::zeros(&[actions.len(), n]);
    for (t, &a) in actions.iter().enumerate() {
        sel.data_mut()[t * n + a] = -1.0;
    }
    Ok(tape.dot_const(lsm, &sel).map_err(NetError::from)?)
}

fn gradient_of<F>(policy: &PolicyCheckpoint, build: F) -> Result<Vec<f64>, OracleError>
where
    F: for<'a> FnOnce(&mut Tape<'a>, &[Var]) -> Result<Option<Var>, OracleError>,
{
    let mut tape = Tape::new(policy.net.precision());
    let p = policy.net.register(&mut tape);
    let Some(out) = build(&mut tape, &p)? else {
        return Ok(vec![0.0; policy.net.num_scalars()]);
    };
    let g = tape.backward(out).map_err(NetError::from)?;
    Ok(p.iter().flat_map(|&v| g.get(&tape, v).into_data()).collect())
}

/// Max abs difference between (a) the gradient of the filtered BC objective
/// `J = (1/B) Σ F·NLL` on one tape and (b) the two-term estimate
/// `λ̂·mean_sampled(F·∇NLL) + (1−λ̂)·mean_original(F·∇NLL)` assembled from
/// per-record gradients, `λ̂` being the batch's sampled fraction.
pub fn gradient_equivalence_check(
    policy: &PolicyCheckpoint,
    batch: &[AnnotatedExample],
    tau: f64,
) -> Result<f64, OracleError> {
    let pass = |r: &AnnotatedExample| r.reward.is_some_and(|v| v > tau);
    let b = batch.len() as f64;
    let joint = gradient_of(policy, |tape, p| {
        let mut total: Option<Var> = None;
        for r in batch.iter().filter(|r| pass(r)) {
            let l = sequence_nll(policy, tape, p, r)?;
            total = Some(match total {
                Some(t) => tape.add(t, l).map_err(NetError::from)?,
                None => l,
            });
        }
        Ok(total.map(|t| tape.scale(t, 1.0 / b)))
    })?;

    let n = policy.net.num_scalars();
    let mut parts = [vec![0.0; n], vec![0.0; n]];
    let mut counts = [0usize; 2];
    for r in batch {
        let k = usize::from(r.origin == Origin::Original);
        counts[k] += 1;
        if !pass(r) {
            continue;
        }
        let g = gradient_of(policy, |tape, p| Ok(Some(sequence_nll(policy, tape, p, r)?)))?;
        for (a, v) in parts[k].iter_mut().zip(g) {
            *a += v;
        }
    }
    let lambda_hat = counts[0] as f64 / b;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut est = 0.0;
        if counts[0] > 0 {
            est += lambda_hat * parts[0][i] / counts[0] as f64;
        }
        if counts[1] > 0 {
            est += (1.0 - lambda_hat) * parts[1][i] / counts[1] as f64;
        }
        worst = worst.max((est - joint[i]).abs());
    }
    Ok(worst)
}

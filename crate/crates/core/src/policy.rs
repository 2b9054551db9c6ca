//! The autoregressive policy `π(y|x) = Π_t π(y_t | y_<t, x)` and its
//! checkpoints.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{TokenId, Vocab, BOS, EOS};
use crate::net::{NetError, PolicyConfig, Seq2Seq};
use crate::seeding::Rng;
use crate::tensor::{log_softmax_in_place, softmax_in_place, Precision, Tensor};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("token id {0} is not an emit-able token")]
    NotAnAction(TokenId),
    #[error("output is empty")]
    EmptyOutput,
    #[error("config vocab_size {config} does not match vocabulary of {vocab}")]
    VocabMismatch { config: usize, vocab: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Anything that can produce outputs for a source context.
pub trait SequencePolicy: Sync {
    fn sample(
        &self,
        source: &[TokenId],
        temperature: f64,
        max_len: usize,
        rng: &mut Rng,
    ) -> Vec<TokenId>;

    /// `n` independent draws from one rng; implementations may share work
    /// across draws but must consume the rng exactly as `n` calls to
    /// [`SequencePolicy::sample`] would.
    fn sample_many(
        &self,
        source: &[TokenId],
        n: usize,
        temperature: f64,
        max_len: usize,
        rng: &mut Rng,
    ) -> Vec<Vec<TokenId>> {
        (0..n)
            .map(|_| self.sample(source, temperature, max_len, rng))
            .collect()
    }

    fn greedy(&self, source: &[TokenId], max_len: usize) -> Vec<TokenId>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Lineage {
    pub grow: usize,
    pub improve: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogProb {
    pub per_token: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub net: Seq2Seq,
    pub vocab: Vocab,
    pub lineage: Lineage,
}

/// Decoder inputs for teacher forcing: `[BOS, y_1, …, y_{T-1}]`.
pub fn decoder_input(output: &[TokenId]) -> Vec<TokenId> {
    std::iter::once(BOS)
        .chain(output.iter().copied().take(output.len().saturating_sub(1)))
        .collect()
}

pub fn init_policy(
    config: PolicyConfig,
    vocab: Vocab,
    seed: u64,
) -> Result<PolicyCheckpoint, PolicyError> {
    if config.vocab_size != vocab.len() {
        return Err(PolicyError::VocabMismatch {
            config: config.vocab_size,
            vocab: vocab.len(),
        });
    }
    let net = Seq2Seq::new(config, vocab.num_actions(), seed)?;
    Ok(PolicyCheckpoint {
        net,
        vocab,
        lineage: Lineage::default(),
    })
}

fn tempered(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut p: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    softmax_in_place(&mut p);
    p
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn draw(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the total mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl PolicyCheckpoint {
    pub fn config(&self) -> &PolicyConfig {
        self.net.config()
    }

    pub fn max_len(&self) -> usize {
        self.net.config().max_target_len
    }

    pub fn with_lineage(mut self, lineage: Lineage) -> Self {
        self.lineage = lineage;
        self
    }

    pub fn set_precision(&mut self, p: Precision) {
        self.net.set_precision(p);
    }

    pub fn actions(&self, output: &[TokenId]) -> Result<Vec<usize>, PolicyError> {
        output
            .iter()
            .map(|&t| {
                self.vocab
                    .token_action(t)
                    .map_err(|_| PolicyError::NotAnAction(t))
            })
            .collect()
    }

    /// Per-step log-probabilities of the actions over the full action space,
    /// teacher-forced on `output`.
    pub fn step_log_probs(
        &self,
        source: &[TokenId],
        output: &[TokenId],
    ) -> Result<Vec<Vec<f64>>, PolicyError> {
        if output.is_empty() {
            return Err(PolicyError::EmptyOutput);
        }
        self.actions(output)?;
        let rows = self.net.forward_rows(source, &decoder_input(output))?;
        Ok(rows
            .into_iter()
            .map(|mut r| {
                log_softmax_in_place(&mut r);
                r
            })
            .collect())
    }

    pub fn log_prob(&self, source: &[TokenId], output: &[TokenId]) -> Result<LogProb, PolicyError> {
        let actions = self.actions(output)?;
        let steps = self.step_log_probs(source, output)?;
        let per_token: Vec<f64> = steps.iter().zip(&actions).map(|(r, &a)| r[a]).collect();
        let total = per_token.iter().sum();
        Ok(LogProb { per_token, total })
    }

    /// Distribution over actions after `prefix`, at the given temperature.
    pub fn next_action_probs(
        &self,
        source: &[TokenId],
        prefix: &[TokenId],
        temperature: f64,
    ) -> Result<Vec<f64>, PolicyError> {
        let mem = self.net.encode(source)?;
        let mut cache = self.net.start_decoding();
        let mut logits = self.net.decode_step(&mem, &mut cache, BOS)?;
        for &t in prefix {
            logits = self.net.decode_step(&mem, &mut cache, t)?;
        }
        Ok(tempered(&logits, temperature))
    }

    fn decode_with<F>(&self, source: &[TokenId], max_len: usize, mut pick: F) -> Vec<TokenId>
    where
        F: FnMut(&[f64]) -> usize,
    {
        let max_len = max_len.min(self.max_len());
        let mem = match self.net.encode(source) {
            Ok(m) => m,
            Err(_) => return vec![EOS],
        };
        let mut cache = self.net.start_decoding();
        let mut out = Vec::with_capacity(max_len);
        let mut input = BOS;
        while out.len() < max_len {
            let logits = self
                .net
                .decode_step(&mem, &mut cache, input)
                .expect("position within max_target_len");
            let tok = self.vocab.action_token(pick(&logits));
            out.push(tok);
            if tok == EOS {
                break;
            }
            input = tok;
        }
        out
    }
}

impl SequencePolicy for PolicyCheckpoint {
    fn sample(
        &self,
        source: &[TokenId],
        temperature: f64,
        max_len: usize,
        rng: &mut Rng,
    ) -> Vec<TokenId> {
        assert!(temperature > 0.0, "temperature must be positive");
        self.decode_with(source, max_len, |logits| draw(&tempered(logits, temperature), rng))
    }

    fn sample_many(
        &self,
        source: &[TokenId],
        n: usize,
        temperature: f64,
        max_len: usize,
        rng: &mut Rng,
    ) -> Vec<Vec<TokenId>> {
        assert!(temperature > 0.0, "temperature must be positive");
        let max_len = max_len.min(self.max_len());
        let Ok(mem) = self.net.encode(source) else {
            return vec![vec![EOS]; n];
        };
        (0..n)
            .map(|_| {
                let mut cache = self.net.start_decoding();
                let mut out = Vec::with_capacity(max_len);
                let mut input = BOS;
                while out.len() < max_len {
                    let logits = self
                        .net
                        .decode_step(&mem, &mut cache, input)
                        .expect("position within max_target_len");
                    let tok = self.vocab.action_token(draw(&tempered(&logits, temperature), rng));
                    out.push(tok);
                    if tok == EOS {
                        break;
                    }
                    input = tok;
                }
                out
            })
            .collect()
    }

    fn greedy(&self, source: &[TokenId], max_len: usize) -> Vec<TokenId> {
        self.decode_with(source, max_len, argmax)
    }
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    letters: Vec<char>,
    config: PolicyConfig,
    out_dim: usize,
    lineage: Lineage,
    params: Vec<NamedTensor>,
}

const CHECKPOINT_FORMAT: &str = "rest-policy-checkpoint";

pub(crate) fn net_to_json(
    net: &Seq2Seq,
    vocab: &Vocab,
    lineage: Lineage,
) -> Result<String, serde_json::Error> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        letters: vocab.letters().to_vec(),
        config: net.config().clone(),
        out_dim: net.out_dim(),
        lineage,
        params: net
            .named_params()
            .map(|(n, t)| NamedTensor {
                name: n.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string(&file)
}

pub(crate) fn net_from_json(text: &str) -> Result<(Seq2Seq, Vocab, Lineage), PolicyError> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| PolicyError::Format(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT || file.version != 1 {
        return Err(PolicyError::Format(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    let named = file
        .params
        .into_iter()
        .map(|p| {
            Tensor::new(p.shape, p.data)
                .map(|t| (p.name, t))
                .map_err(|e| PolicyError::Format(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let net = Seq2Seq::from_params(file.config, file.out_dim, named)?;
    if !net.all_finite() {
        return Err(PolicyError::Format("non-finite parameter".into()));
    }
    Ok((net, Vocab::new(&file.letters), file.lineage))
}

impl PolicyCheckpoint {
    pub fn to_json(&self) -> String {
        net_to_json(&self.net, &self.vocab, self.lineage).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let (net, vocab, lineage) = net_from_json(text)?;
        if net.out_dim() != vocab.num_actions() {
            return Err(PolicyError::Format(format!(
                "policy head width {} does not match {} actions",
                net.out_dim(),
                vocab.num_actions()
            )));
        }
        Ok(PolicyCheckpoint {
            net,
            vocab,
            lineage,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

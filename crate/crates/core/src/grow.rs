//! The Grow step: sample candidates from the current policy for every source
//! context, annotate everything with rewards, and keep the original data in
//! the same dataset.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::mdp::{TokenId, Vocab};
use crate::policy::SequencePolicy;
use crate::seeding;
use crate::task::{Example, RewardFn};

#[derive(Debug, Error)]
pub enum GrowError {
    #[error("n_per_context must be at least 1")]
    NoSamples,
    #[error("reward {reward} for record {index} is outside [0, 1]")]
    RewardOutOfRange { index: usize, reward: f64 },
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Original,
    Sampled,
}

impl Origin {
    pub fn tag(self) -> &'static str {
        match self {
            Origin::Original => "original",
            Origin::Sampled => "sampled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedExample {
    pub source: Vec<TokenId>,
    pub output: Vec<TokenId>,
    /// `None` until annotated.
    pub reward: Option<f64>,
    pub origin: Origin,
    /// Grow step that produced a sampled record; 0 for original data.
    pub grow: usize,
    pub source_id: usize,
}

/// Rewards are stored at micro-unit resolution so the on-disk decimal form
/// reloads bit-exactly.
pub fn quantize_reward(r: f64) -> f64 {
    (r * 1e6).round() / 1e6
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowDataset {
    pub records: Vec<AnnotatedExample>,
    pub grow: usize,
    pub n_original: usize,
    pub n_sampled: usize,
}

impl GrowDataset {
    /// Builds a dataset, assigning source ids by first occurrence.
    pub fn from_records(mut records: Vec<AnnotatedExample>, grow: usize) -> Self {
        let mut ids: HashMap<Vec<TokenId>, usize> = HashMap::new();
        for r in &mut records {
            let next = ids.len();
            r.source_id = *ids.entry(r.source.clone()).or_insert(next);
        }
        let n_original = records.iter().filter(|r| r.origin == Origin::Original).count();
        GrowDataset {
            n_sampled: records.len() - n_original,
            n_original,
            records,
            grow,
        }
    }

    /// The original data alone, before any growth.
    pub fn from_examples(data: &[Example], reward_fn: &dyn RewardFn) -> Result<Self, GrowError> {
        let mut records: Vec<_> = data.iter().map(original_record).collect();
        annotate(&mut records, reward_fn)?;
        Ok(GrowDataset::from_records(records, 0))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Proportion of policy samples in the mixture.
    pub fn lambda(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.n_sampled as f64 / self.records.len() as f64
        }
    }

    pub fn num_sources(&self) -> usize {
        self.records.iter().map(|r| r.source_id + 1).max().unwrap_or(0)
    }

    /// Record indices grouped by source id.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.num_sources()];
        for (i, r) in self.records.iter().enumerate() {
            g[r.source_id].push(i);
        }
        g
    }

    /// Mean reward over sampled records, the estimate of the sampling
    /// policy's value.
    pub fn sampled_value(&self) -> Option<f64> {
        let rewards: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.origin == Origin::Sampled)
            .filter_map(|r| r.reward)
            .collect();
        (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / rewards.len() as f64)
    }

    pub fn mean_reward(&self, origin: Origin) -> Option<f64> {
        let rewards: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.origin == origin)
            .filter_map(|r| r.reward)
            .collect();
        (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / rewards.len() as f64)
    }
}

fn original_record(e: &Example) -> AnnotatedExample {
    AnnotatedExample {
        source: e.source.clone(),
        output: e.reference.clone(),
        reward: None,
        origin: Origin::Original,
        grow: 0,
        source_id: 0,
    }
}

/// Rewrites every reward from `reward_fn`; applying it twice is the same as
/// applying it once.
pub fn annotate(records: &mut [AnnotatedExample], reward_fn: &dyn RewardFn) -> Result<(), GrowError> {
    records
        .par_iter_mut()
        .for_each(|r| r.reward = Some(quantize_reward(reward_fn.score(&r.source, &r.output))));
    if let Some((index, r)) = records
        .iter()
        .enumerate()
        .find(|(_, r)| !matches!(r.reward, Some(v) if (0.0..=1.0).contains(&v)))
    {
        return Err(GrowError::RewardOutOfRange {
            index,
            reward: r.reward.unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct GrowParams {
    pub n_per_context: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub grow_index: usize,
    pub seed: u64,
}

/// Draws `n_per_context` samples for every context of `data`. Context `i`
/// samples from its own rng stream, so the result does not depend on the
/// number of worker threads.
pub fn grow(
    policy: &dyn SequencePolicy,
    data: &[Example],
    params: GrowParams,
    reward_fn: &dyn RewardFn,
) -> Result<GrowDataset, GrowError> {
    if params.n_per_context == 0 {
        return Err(GrowError::NoSamples);
    }
    let per_context: Vec<Vec<AnnotatedExample>> = data
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut rng = seeding::stream_rng(params.seed, i as u64);
            let samples = policy.sample_many(
                &e.source,
                params.n_per_context,
                params.temperature,
                params.max_len,
                &mut rng,
            );
            std::iter::once(original_record(e))
                .chain(samples.into_iter().map(|y| AnnotatedExample {
                    source: e.source.clone(),
                    output: y,
                    reward: None,
                    origin: Origin::Sampled,
                    grow: params.grow_index,
                    source_id: 0,
                }))
                .collect()
        })
        .collect();
    let mut records: Vec<_> = per_context.into_iter().flatten().collect();
    annotate(&mut records, reward_fn)?;
    Ok(GrowDataset::from_records(records, params.grow_index))
}

const HEADER: &str = "#rest-dataset";
const VERSION: &str = "v1";

/// Line-delimited text: a header, then one tab-separated record per line
/// with source, output (`.` marks EOS), reward to six decimals, origin tag
/// and grow index.
pub fn to_text(dataset: &GrowDataset, vocab: &Vocab) -> String {
    let mut s = String::with_capacity(32 * (dataset.len() + 1));
    let _ = writeln!(s, "{HEADER}\t{VERSION}\tgrow={}", dataset.grow);
    for r in &dataset.records {
        let reward = r.reward.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            vocab.render(&r.source),
            vocab.render(&r.output),
            reward,
            r.origin.tag(),
            r.grow
        );
    }
    s
}

pub fn from_text(text: &str, vocab: &Vocab) -> Result<GrowDataset, GrowError> {
    let mut lines = text.lines().enumerate();
    let err = |line: usize, message: String| GrowError::Parse {
        line: line + 1,
        message,
    };
    let (_, header) = lines.next().ok_or_else(|| err(0, "missing header".into()))?;
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.len() != 3 || fields[0] != HEADER || fields[1] != VERSION {
        return Err(err(0, format!("unrecognized header {header:?}")));
    }
    let grow = fields[2]
        .strip_prefix("grow=")
        .and_then(|g| g.parse().ok())
        .ok_or_else(|| err(0, format!("bad grow field {:?}", fields[2])))?;

    let mut records = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(err(ln, format!("expected 5 fields, found {}", f.len())));
        }
        let source = vocab.encode(f[0]).map_err(|e| err(ln, e.to_string()))?;
        let output = vocab.encode(f[1]).map_err(|e| err(ln, e.to_string()))?;
        let reward = match f[2] {
            "-" => None,
            s => {
                let v: f64 = s.parse().map_err(|_| err(ln, format!("bad reward {s:?}")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(err(ln, format!("reward {v} outside [0, 1]")));
                }
                Some(v)
            }
        };
        let origin = match f[3] {
            "original" => Origin::Original,
            "sampled" => Origin::Sampled,
            o => return Err(err(ln, format!("unknown origin {o:?}"))),
        };
        let grow: usize = f[4]
            .parse()
            .map_err(|_| err(ln, format!("bad grow index {:?}", f[4])))?;
        records.push(AnnotatedExample {
            source,
            output,
            reward,
            origin,
            grow,
            source_id: 0,
        });
    }
    Ok(GrowDataset::from_records(records, grow))
}

pub fn save(dataset: &GrowDataset, vocab: &Vocab, path: &Path) -> Result<(), GrowError> {
    fs::write(path, to_text(dataset, vocab))?;
    Ok(())
}

pub fn load(path: &Path, vocab: &Vocab) -> Result<GrowDataset, GrowError> {
    from_text(&fs::read_to_string(path)?, vocab)
}

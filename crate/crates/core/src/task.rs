//! Synthetic "cipher-reverse" translation task with an edit-distance reward.
//!
//! The gold translation of `x` reverses it and shifts every letter one step
//! forward in the alphabet (cyclically). References are corrupted with
//! per-token substitution noise so they are imperfect.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{TokenId, Vocab, EOS};
use crate::policy::SequencePolicy;
use crate::seeding;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("token {0} is not a task letter")]
    NotALetter(TokenId),
    #[error("invalid task spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub letters: Vec<char>,
    pub shift: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub p_noise: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            letters: "abcdefghij".chars().collect(),
            shift: 1,
            min_len: 3,
            max_len: 12,
            p_noise: 0.1,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let mut l = self.letters.clone();
        l.sort_unstable();
        l.dedup();
        if l.len() != self.letters.len() || l.is_empty() {
            return Err(TaskError::Invalid("letters must be distinct and non-empty".into()));
        }
        if self.letters.contains(&'.') {
            return Err(TaskError::Invalid("'.' is reserved for EOS".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(TaskError::Invalid(format!(
                "length range [{}, {}] is empty",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.p_noise) {
            return Err(TaskError::Invalid(format!(
                "p_noise {} outside [0, 1)",
                self.p_noise
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(&self.letters)
    }

    /// Upper bound on output length including EOS.
    pub fn output_max_len(&self) -> usize {
        self.max_len + 4
    }

    fn shift_letter(&self, vocab: &Vocab, t: TokenId, by: usize) -> Result<TokenId, TaskError> {
        let n = vocab.num_letters();
        let i = vocab.letter_index(t).ok_or(TaskError::NotALetter(t))?;
        Ok(vocab.letter((i + by % n) % n))
    }

    /// `shift(reverse(x))`
    pub fn gold_target(&self, x: &[TokenId]) -> Result<Vec<TokenId>, TaskError> {
        let vocab = self.vocab();
        x.iter()
            .rev()
            .map(|&t| self.shift_letter(&vocab, t, self.shift))
            .collect()
    }

    pub fn gold_target_inverse(&self, y: &[TokenId]) -> Result<Vec<TokenId>, TaskError> {
        let vocab = self.vocab();
        let n = vocab.num_letters();
        y.iter()
            .rev()
            .map(|&t| self.shift_letter(&vocab, t, n - self.shift % n))
            .collect()
    }

    pub fn random_source<R: Rng>(&self, rng: &mut R) -> Vec<TokenId> {
        let vocab = self.vocab();
        let len = rng.random_range(self.min_len..=self.max_len);
        (0..len)
            .map(|_| vocab.letter(rng.random_range(0..vocab.num_letters())))
            .collect()
    }

    /// Replaces each letter, with probability `p_noise`, by a different
    /// uniformly chosen letter.
    pub fn corrupt<R: Rng>(&self, y: &[TokenId], rng: &mut R) -> Vec<TokenId> {
        let vocab = self.vocab();
        let n = vocab.num_letters();
        y.iter()
            .map(|&t| {
                if n > 1 && rng.random::<f64>() < self.p_noise {
                    let i = vocab.letter_index(t).expect("gold targets are letters");
                    let offset = rng.random_range(1..n);
                    vocab.letter((i + offset) % n)
                } else {
                    t
                }
            })
            .collect()
    }
}

pub trait RewardFn: Sync {
    fn name(&self) -> &str;
    /// Score in `[0, 1]` of output `y` for source `x`.
    fn score(&self, x: &[TokenId], y: &[TokenId]) -> f64;
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − lev(y, y*) / max(|y|, |y*|)` on letter content.
#[derive(Debug, Clone)]
pub struct EditDistanceReward {
    task: TaskSpec,
    vocab: Vocab,
}

impl EditDistanceReward {
    pub fn new(task: TaskSpec) -> Self {
        let vocab = task.vocab();
        EditDistanceReward { task, vocab }
    }
}

impl RewardFn for EditDistanceReward {
    fn name(&self) -> &str {
        "edit-distance"
    }

    fn score(&self, x: &[TokenId], y: &[TokenId]) -> f64 {
        let y = self.vocab.strip_specials(y);
        let Ok(gold) = self.task.gold_target(&self.vocab.strip_specials(x)) else {
            return 0.0;
        };
        let denom = y.len().max(gold.len());
        if denom == 0 {
            return 1.0;
        }
        let d = levenshtein(&y, &gold) as f64;
        (1.0 - d / denom as f64).clamp(0.0, 1.0)
    }
}

/// A source context with its (possibly noisy) reference output. The
/// reference carries its trailing EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub source: Vec<TokenId>,
    pub reference: Vec<TokenId>,
}

pub fn make_dataset(n: usize, task: &TaskSpec, seed: u64) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let mut rng = seeding::stream_rng(seed, i as u64);
            let source = task.random_source(&mut rng);
            let gold = task.gold_target(&source).expect("sources use task letters");
            let mut reference = task.corrupt(&gold, &mut rng);
            reference.push(EOS);
            Example { source, reference }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn make_splits(task: &TaskSpec, sizes: [usize; 3], seed: u64) -> Splits {
    Splits {
        train: make_dataset(sizes[0], task, seeding::derive(seed, "data-train", 0)),
        eval: make_dataset(sizes[1], task, seeding::derive(seed, "data-eval", 0)),
        test: make_dataset(sizes[2], task, seeding::derive(seed, "data-test", 0)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SanityCheck {
    pub name: &'static str,
    pub passed: bool,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SanityReport {
    pub checks: Vec<SanityCheck>,
}

impl SanityReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&SanityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const MAX_LISTED_FAILURES: usize = 10;

fn finish(name: &'static str, failures: Vec<String>) -> SanityCheck {
    let passed = failures.is_empty();
    let mut failures = failures;
    failures.truncate(MAX_LISTED_FAILURES);
    SanityCheck {
        name,
        passed,
        failures,
    }
}

/// Hand-crafted probes a reward function must satisfy on this task:
/// repeating the gold output is penalized, shuffling it never helps, and
/// every score lies in `[0, 1]`.
pub fn reward_sanity_suite(reward: &dyn RewardFn, task: &TaskSpec, seed: u64) -> SanityReport {
    let vocab = task.vocab();
    let mut rng = seeding::rng(seed);

    let mut rep = Vec::new();
    let mut perm = Vec::new();
    for _ in 0..200 {
        let x = task.random_source(&mut rng);
        let gold = task.gold_target(&x).expect("task letters");
        let base = reward.score(&x, &gold);

        let doubled: Vec<_> = gold.iter().chain(gold.iter()).copied().collect();
        let r2 = reward.score(&x, &doubled);
        if !(r2 < base) {
            rep.push(format!(
                "{}: repeated {} scored {r2} vs {base}",
                vocab.render(&x),
                vocab.render(&doubled)
            ));
        }

        if gold.len() >= 3 {
            for _ in 0..5 {
                let mut shuffled = gold.clone();
                shuffled.shuffle(&mut rng);
                let rp = reward.score(&x, &shuffled);
                let bad = if shuffled == gold { rp > base } else { rp >= base };
                if bad {
                    perm.push(format!(
                        "{}: permutation {} scored {rp} vs {base}",
                        vocab.render(&x),
                        vocab.render(&shuffled)
                    ));
                }
            }
        }
    }

    let mut bounds = Vec::new();
    for _ in 0..1000 {
        let x = task.random_source(&mut rng);
        let len = rng.random_range(0..=task.output_max_len());
        let y: Vec<_> = (0..len)
            .map(|_| vocab.letter(rng.random_range(0..vocab.num_letters())))
            .collect();
        let r = reward.score(&x, &y);
        if !(0.0..=1.0).contains(&r) {
            bounds.push(format!("{} -> {}: {r}", vocab.render(&x), vocab.render(&y)));
        }
    }

    SanityReport {
        checks: vec![
            finish("repetition", rep),
            finish("permutation", perm),
            finish("bounds", bounds),
        ],
    }
}

/// Emits the gold translation; a perfect policy for tests and baselines.
#[derive(Debug, Clone)]
pub struct GoldPolicy {
    task: TaskSpec,
}

impl GoldPolicy {
    pub fn new(task: TaskSpec) -> Self {
        GoldPolicy { task }
    }

    fn decode(&self, source: &[TokenId], max_len: usize) -> Vec<TokenId> {
        let mut y = self.task.gold_target(source).unwrap_or_default();
        y.push(EOS);
        y.truncate(max_len);
        y
    }
}

impl SequencePolicy for GoldPolicy {
    fn sample(
        &self,
        source: &[TokenId],
        _temperature: f64,
        max_len: usize,
        _rng: &mut seeding::Rng,
    ) -> Vec<TokenId> {
        self.decode(source, max_len)
    }

    fn greedy(&self, source: &[TokenId], max_len: usize) -> Vec<TokenId> {
        self.decode(source, max_len)
    }
}

/// Emits EOS immediately.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptyPolicy;

impl SequencePolicy for EmptyPolicy {
    fn sample(&self, _: &[TokenId], _: f64, _: usize, _: &mut seeding::Rng) -> Vec<TokenId> {
        vec![EOS]
    }

    fn greedy(&self, _: &[TokenId], _: usize) -> Vec<TokenId> {
        vec![EOS]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools_free::permutations;

    mod itertools_free {
        pub fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
            if items.len() <= 1 {
                return vec![items.to_vec()];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.to_vec();
                let head = rest.remove(i);
                for mut p in permutations(&rest) {
                    p.insert(0, head.clone());
                    out.push(p);
                }
            }
            out
        }
    }

    fn task() -> TaskSpec {
        TaskSpec::default()
    }

    #[test]
    fn gold_target_examples() {
        let t = task();
        let v = t.vocab();
        assert_eq!(v.render(&t.gold_target(&v.encode("abc").unwrap()).unwrap()), "dcb");
        assert_eq!(v.render(&t.gold_target(&v.encode("j").unwrap()).unwrap()), "a");
        assert_eq!(
            t.gold_target(&[crate::mdp::BOS]),
            Err(TaskError::NotALetter(crate::mdp::BOS))
        );
    }

    #[test]
    fn gold_target_inverse_roundtrips() {
        let t = task();
        let mut rng = seeding::rng(3);
        for _ in 0..100 {
            let y = t.random_source(&mut rng);
            let x = t.gold_target_inverse(&y).unwrap();
            assert_eq!(t.gold_target(&x).unwrap(), y);
        }
    }

    #[test]
    fn reward_examples() {
        let t = task();
        let v = t.vocab();
        let r = EditDistanceReward::new(t.clone());
        let x = v.encode("abc").unwrap();
        assert_eq!(r.score(&x, &v.encode("dcb").unwrap()), 1.0);
        assert_eq!(r.score(&x, &v.encode("dcb.").unwrap()), 1.0);
        assert_eq!(r.score(&x, &[]), 0.0);
        assert!((r.score(&x, &v.encode("dcc").unwrap()) - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        // PAD placement is ignored
        assert_eq!(
            r.score(&x, &[0, v.letter(3), 0, v.letter(2), v.letter(1), 0]),
            1.0
        );
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein(b"", b"abc"), 3);
        assert_eq!(levenshtein(b"abc", b""), 3);
        assert_eq!(levenshtein(b"abc", b"bcx"), 2);
    }

    /// All outputs up to length 5 over the alphabet, for each source up to
    /// length 4: the gold target is the unique maximizer.
    #[test]
    fn reward_uniquely_maximized_by_gold() {
        let t = TaskSpec {
            letters: vec!['a', 'b', 'c'],
            ..task()
        };
        let v = t.vocab();
        let r = EditDistanceReward::new(t.clone());
        let mut outputs: Vec<Vec<TokenId>> = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..5 {
            let mut next = Vec::new();
            for p in &frontier {
                for l in 0..3 {
                    let mut q: Vec<TokenId> = p.clone();
                    q.push(v.letter(l));
                    next.push(q);
                }
            }
            outputs.extend(next.iter().cloned());
            frontier = next;
        }
        for len in 1..=4 {
            for code in 0..3usize.pow(len as u32) {
                let x: Vec<TokenId> = (0..len)
                    .map(|i| v.letter((code / 3usize.pow(i as u32)) % 3))
                    .collect();
                let gold = t.gold_target(&x).unwrap();
                for y in &outputs {
                    let s = r.score(&x, y);
                    if *y == gold {
                        assert_eq!(s, 1.0);
                    } else {
                        assert!(s < 1.0, "{} scored 1 for {}", v.render(y), v.render(&x));
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_references_are_perfect() {
        let t = TaskSpec {
            p_noise: 0.0,
            ..task()
        };
        let r = EditDistanceReward::new(t.clone());
        for ex in make_dataset(200, &t, 5) {
            assert_eq!(r.score(&ex.source, &ex.reference), 1.0);
            assert_eq!(ex.reference.last(), Some(&EOS));
            assert!((3..=12).contains(&ex.source.len()));
        }
    }

    /// Expected reference reward at p_noise = 0.1 (lengths uniform on
    /// [3, 12], alphabet of 10), estimated from 10⁶ corrupted strings by an
    /// independent script: 0.899915.
    #[test]
    fn noisy_reference_reward_matches_expectation() {
        let t = task();
        let r = EditDistanceReward::new(t.clone());
        let data = make_dataset(2000, &t, 11);
        let mean =
            data.iter().map(|e| r.score(&e.source, &e.reference)).sum::<f64>() / data.len() as f64;
        assert!((mean - 0.899915).abs() < 0.02, "mean reference reward {mean}");
    }

    #[test]
    fn datasets_are_seed_deterministic() {
        let t = task();
        assert_eq!(make_dataset(50, &t, 9), make_dataset(50, &t, 9));
        assert_ne!(make_dataset(50, &t, 9), make_dataset(50, &t, 10));
    }

    #[test]
    fn sanity_suite_passes_for_edit_distance() {
        let t = task();
        let report = reward_sanity_suite(&EditDistanceReward::new(t.clone()), &t, 1);
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn repeated_gold_scores_one_half() {
        let t = task();
        let v = t.vocab();
        let r = EditDistanceReward::new(t);
        let x = v.encode("abc").unwrap();
        assert_eq!(r.score(&x, &v.encode("dcbdcb").unwrap()), 0.5);
    }

    #[test]
    fn every_permutation_of_gold_scores_below_one() {
        let t = task();
        let v = t.vocab();
        let r = EditDistanceReward::new(t);
        let x = v.encode("abc").unwrap();
        let gold = v.encode("dcb").unwrap();
        let perms = permutations(&gold);
        assert_eq!(perms.len(), 6);
        for p in perms {
            let s = r.score(&x, &p);
            if p == gold {
                assert_eq!(s, 1.0);
            } else {
                assert!(s < 1.0);
            }
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

    #[test]
    fn constant_reward_fails_repetition() {
        let t = task();
        let report = reward_sanity_suite(&ConstantReward, &t, 1);
        assert!(!report.check("repetition").unwrap().passed);
        assert!(!report.all_passed());
        assert!(report.check("bounds").unwrap().passed);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut t = task();
        t.p_noise = 1.0;
        assert!(t.validate().is_err());
        let mut t = task();
        t.letters = vec!['a', 'a'];
        assert!(t.validate().is_err());
        assert!(task().validate().is_ok());
    }
}

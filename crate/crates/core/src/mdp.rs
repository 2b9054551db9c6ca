//! Conditional generation viewed as a deterministic MDP: the state is the
//! source plus the partial output, actions are tokens, and the only reward
//! arrives once the output is complete.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
const FIRST_LETTER: TokenId = 3;

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("transition applied to a terminal state")]
    Terminal,
    #[error("episode is not terminal (length {len}, max_len {max_len})")]
    NotTerminal { len: usize, max_len: usize },
    #[error("token id {0} is not in the vocabulary")]
    UnknownToken(TokenId),
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),
}

/// Special tokens followed by single-character letters. The policy's action
/// space is EOS plus the letters, so BOS and PAD are never emitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    letters: Vec<char>,
}

impl Vocab {
    pub fn new(letters: &[char]) -> Self {
        let mut seen = letters.to_vec();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), letters.len(), "letters must be distinct");
        assert!(
            letters.iter().all(|c| *c != '.'),
            "'.' renders EOS and cannot be a letter"
        );
        Vocab {
            letters: letters.to_vec(),
        }
    }

    pub fn letters(&self) -> &[char] {
        &self.letters
    }

    pub fn len(&self) -> usize {
        FIRST_LETTER + self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_letters(&self) -> usize {
        self.letters.len()
    }

    pub fn letter(&self, index: usize) -> TokenId {
        FIRST_LETTER + index
    }

    pub fn letter_index(&self, token: TokenId) -> Option<usize> {
        (token >= FIRST_LETTER && token < self.len()).then(|| token - FIRST_LETTER)
    }

    pub fn is_letter(&self, token: TokenId) -> bool {
        self.letter_index(token).is_some()
    }

    /// Number of emit-able tokens (EOS plus letters).
    pub fn num_actions(&self) -> usize {
        self.len() - EOS
    }

    pub fn action_token(&self, action: usize) -> TokenId {
        action + EOS
    }

    pub fn token_action(&self, token: TokenId) -> Result<usize, MdpError> {
        if (EOS..self.len()).contains(&token) {
            Ok(token - EOS)
        } else {
            Err(MdpError::UnknownToken(token))
        }
    }

    pub fn encode_char(&self, c: char) -> Result<TokenId, MdpError> {
        if c == '.' {
            return Ok(EOS);
        }
        self.letters
            .iter()
            .position(|&l| l == c)
            .map(|i| FIRST_LETTER + i)
            .ok_or(MdpError::UnknownChar(c))
    }

    /// Parses letters, with `.` standing for EOS.
    pub fn encode(&self, s: &str) -> Result<Vec<TokenId>, MdpError> {
        s.chars().map(|c| self.encode_char(c)).collect()
    }

    /// Renders letters as characters and EOS as `.`; PAD and BOS are dropped.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter_map(|&t| match t {
                EOS => Some('.'),
                _ => self.letter_index(t).map(|i| self.letters[i]),
            })
            .collect()
    }

    /// Letter content only, the part a reward function scores.
    pub fn strip_specials(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        tokens.iter().copied().filter(|&t| self.is_letter(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct State {
    pub source: Vec<TokenId>,
    pub output: Vec<TokenId>,
}

impl State {
    pub fn initial(source: Vec<TokenId>) -> Self {
        State {
            source,
            output: Vec::new(),
        }
    }
}

pub fn is_terminal(state: &State, max_len: usize) -> bool {
    state.output.last() == Some(&EOS) || state.output.len() >= max_len
}

pub fn transition(state: &State, action: TokenId, max_len: usize) -> Result<State, MdpError> {
    if is_terminal(state, max_len) {
        return Err(MdpError::Terminal);
    }
    let mut output = state.output.clone();
    output.push(action);
    Ok(State {
        source: state.source.clone(),
        output,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub source: Vec<TokenId>,
    pub output: Vec<TokenId>,
    pub reward: f64,
}

impl Episode {
    pub fn new(
        source: Vec<TokenId>,
        output: Vec<TokenId>,
        reward: f64,
        max_len: usize,
    ) -> Result<Self, MdpError> {
        let len = output.len();
        let ends = output.last() == Some(&EOS);
        if len == 0 || (!ends && len < max_len) {
            return Err(MdpError::NotTerminal { len, max_len });
        }
        Ok(Episode {
            source,
            output,
            reward,
        })
    }

    pub fn len(&self) -> usize {
        self.output.len()
    }

    pub fn is_empty(&self) -> bool {
        self.output.is_empty()
    }
}

/// Zero at every step except the last, which carries the terminal reward.
pub fn step_rewards(episode: &Episode) -> Vec<f64> {
    let mut r = vec![0.0; episode.len()];
    if let Some(last) = r.last_mut() {
        *last = episode.reward;
    }
    r
}

/// `G_t = Σ_{j≥t} γ^{j-t} r_j`
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Closed form for terminal-only rewards: `G_t = γ^{T-t}·r` (1-based `t`).
pub fn terminal_returns(len: usize, reward: f64, gamma: f64) -> Vec<f64> {
    (1..=len)
        .map(|t| gamma.powi((len - t) as i32) * reward)
        .collect()
}

//! Experiment configuration: one flat TOML table with documented defaults,
//! `key=value` overrides and validation against every module's invariants.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::improve::{ImproveSettings, ThresholdSchedule, TrainConfig};
use crate::losses::{LossSpec, ValueTrainConfig};
use crate::net::PolicyConfig;
use crate::task::TaskSpec;
use crate::tensor::Precision;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
    #[error("override {0:?} is not of the form key=value")]
    Override(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub seed: u64,
    /// 64 or 32.
    pub precision: u32,

    // task
    pub letters: String,
    pub shift: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub p_noise: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_test: usize,

    // networks
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,

    // outer loop
    #[serde(rename = "G")]
    pub grows: usize,
    #[serde(rename = "I")]
    pub improves: usize,
    pub n_per_context: usize,
    pub temperature: f64,
    /// `global`, `percentile` or `interpolation`.
    pub schedule: String,
    /// Candidate values for the schedule. For a global schedule each Grow
    /// uses the first `I` values above the sampling policy's value.
    pub thresholds: Vec<f64>,
    pub inclusive_zero: bool,
    pub allow_low_threshold: bool,
    /// Start every Grow's Improve steps from the BC policy instead of the
    /// current one.
    pub restart_from_bc: bool,
    /// Keep samples from earlier Grow steps in later datasets.
    pub reuse_samples: bool,

    // losses
    /// `bc`, `gold`, `bvmpo` or `oac`.
    pub loss: String,
    pub gold_k: usize,
    pub gold_w_min: f64,
    pub bvmpo_eta: f64,
    pub bvmpo_lambda_start: f64,
    pub bvmpo_lambda_end: f64,
    pub oac_gamma: f64,

    // evaluation
    pub eval_mode: DecodeMode,
    pub eval_samples: usize,

    // optimization
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub pretrain_budget: usize,
    pub pretrain_eval_interval: usize,
    pub pretrain_patience: usize,
    pub improve_lr: f64,
    pub improve_budget: usize,
    pub eval_interval: usize,
    pub patience: usize,
    pub lr_decay: f64,
    pub value_steps: usize,
    pub value_lr: f64,
    pub value_gamma: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_name: "rest".into(),
            seed: 0,
            precision: 64,
            letters: "abcdefghij".into(),
            shift: 1,
            min_len: 3,
            max_len: 12,
            p_noise: 0.1,
            n_train: 2000,
            n_eval: 500,
            n_test: 500,
            width: 32,
            layers: 2,
            heads: 2,
            ff_width: 64,
            grows: 1,
            improves: 3,
            n_per_context: 8,
            temperature: 0.8,
            schedule: "global".into(),
            thresholds: vec![0.0, 0.7, 0.8, 0.9, 0.95, 0.99],
            inclusive_zero: false,
            allow_low_threshold: false,
            restart_from_bc: false,
            reuse_samples: false,
            loss: "bc".into(),
            gold_k: 5,
            gold_w_min: 0.1,
            bvmpo_eta: 0.5,
            bvmpo_lambda_start: 1.0,
            bvmpo_lambda_end: 1e-5,
            oac_gamma: 1.0,
            eval_mode: DecodeMode::Sample,
            eval_samples: 4,
            batch_size: 16,
            pretrain_lr: 1e-3,
            pretrain_budget: 5000,
            pretrain_eval_interval: 250,
            pretrain_patience: 3,
            improve_lr: 5e-4,
            improve_budget: 3000,
            eval_interval: 200,
            patience: 3,
            lr_decay: 0.5,
            value_steps: 20000,
            value_lr: 1e-3,
            value_gamma: 1.0,
        }
    }
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides; values use TOML syntax, with bare
    /// words taken as strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            let (k, v) = (k.trim(), v.trim());
            let value = match toml::from_str::<toml::Table>(&format!("v = {v}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(v.to_string()),
            };
            table.insert(k.to_string(), value);
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))
    }

    /// Reads `path` (or the defaults when `None`), applies the overrides and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        let c = base.with_overrides(overrides)?;
        c.validate()?;
        Ok(c)
    }

    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            letters: self.letters.chars().collect(),
            shift: self.shift,
            min_len: self.min_len,
            max_len: self.max_len,
            p_noise: self.p_noise,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let task = self.task();
        PolicyConfig {
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            ff_width: self.ff_width,
            ..PolicyConfig::desk(task.vocab().len(), task.max_len, task.output_max_len())
        }
    }

    pub fn precision(&self) -> Precision {
        Precision::from_bits(self.precision).expect("validated")
    }

    pub fn loss_spec(&self) -> LossSpec {
        match self.loss.as_str() {
            "gold" => LossSpec::Gold {
                k: self.gold_k,
                w_min: self.gold_w_min,
            },
            "bvmpo" => LossSpec::Bvmpo {
                eta: self.bvmpo_eta,
                lambda_start: self.bvmpo_lambda_start,
                lambda_end: self.bvmpo_lambda_end,
            },
            "oac" => LossSpec::Oac { gamma: self.oac_gamma },
            _ => LossSpec::Bc,
        }
    }

    /// The schedule over all candidate thresholds; see `thresholds`.
    pub fn schedule(&self) -> ThresholdSchedule {
        let v = self.thresholds.clone();
        match self.schedule.as_str() {
            "percentile" => ThresholdSchedule::Percentile(v),
            "interpolation" => ThresholdSchedule::Interpolation(v),
            _ => ThresholdSchedule::Global(v),
        }
    }

    pub fn pretrain(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.pretrain_lr,
            eval_interval: self.pretrain_eval_interval,
            patience: self.pretrain_patience,
            budget: self.pretrain_budget,
            seed: crate::seeding::derive(self.seed, "pretrain", 0),
        }
    }

    pub fn improve_settings(&self, grow: usize) -> ImproveSettings {
        ImproveSettings {
            train: TrainConfig {
                batch_size: self.batch_size,
                learning_rate: self.improve_lr,
                eval_interval: self.eval_interval,
                patience: self.patience,
                budget: self.improve_budget,
                seed: crate::seeding::derive(self.seed, "improve-train", grow as u64),
            },
            lr_decay: self.lr_decay,
            inclusive_zero: self.inclusive_zero,
            allow_low_threshold: self.allow_low_threshold,
        }
    }

    pub fn value_train(&self, grow: usize) -> ValueTrainConfig {
        ValueTrainConfig {
            gamma: self.value_gamma,
            steps: self.value_steps,
            batch_size: self.batch_size,
            learning_rate: self.value_lr,
            seed: crate::seeding::derive(self.seed, "value-train", grow as u64),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if Precision::from_bits(self.precision).is_none() {
            return Err(invalid("precision", "must be 32 or 64"));
        }
        self.task().validate().map_err(|e| invalid("letters", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.p_noise) {
            return Err(invalid("p_noise", "must lie in [0, 1]"));
        }
        for (key, n) in [("n_train", self.n_train), ("n_eval", self.n_eval)] {
            if n == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        self.policy_config().validate().map_err(|e| invalid("width", e.to_string()))?;
        if self.grows == 0 && self.improves != 0 {
            return Err(invalid("I", "must be 0 when G = 0"));
        }
        if self.n_per_context == 0 {
            return Err(invalid("n_per_context", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be positive"));
        }
        if !matches!(self.schedule.as_str(), "global" | "percentile" | "interpolation") {
            return Err(invalid("schedule", format!("unknown schedule {:?}", self.schedule)));
        }
        self.schedule().validate().map_err(|e| invalid("thresholds", e.to_string()))?;
        if self.thresholds.len() < self.improves {
            return Err(invalid(
                "thresholds",
                format!("{} values for I = {}", self.thresholds.len(), self.improves),
            ));
        }
        if !matches!(self.loss.as_str(), "bc" | "gold" | "bvmpo" | "oac") {
            return Err(invalid("loss", format!("unknown loss {:?}", self.loss)));
        }
        self.loss_spec().validate().map_err(|e| {
            let key = match self.loss.as_str() {
                "gold" => "gold_k",
                "bvmpo" => "bvmpo_eta",
                _ => "oac_gamma",
            };
            invalid(key, e.to_string())
        })?;
        if self.eval_samples == 0 {
            return Err(invalid("eval_samples", "must be at least 1"));
        }
        for (key, n) in [
            ("batch_size", self.batch_size),
            ("pretrain_eval_interval", self.pretrain_eval_interval),
            ("eval_interval", self.eval_interval),
            ("pretrain_patience", self.pretrain_patience),
            ("patience", self.patience),
        ] {
            if n == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        for (key, lr) in [
            ("pretrain_lr", self.pretrain_lr),
            ("improve_lr", self.improve_lr),
            ("value_lr", self.value_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(invalid(key, "must be positive"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid("lr_decay", "must lie in (0, 1]"));
        }
        if !(self.value_gamma > 0.0 && self.value_gamma <= 1.0) {
            return Err(invalid("value_gamma", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

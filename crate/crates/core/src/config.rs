//! Engine and reward configuration, plus the TOML config file that carries both.
//!
//! Constructors validate every field and reject out-of-range values; nothing
//! is silently clamped.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid value for `{field}`: {detail}")]
    OutOfRange { field: &'static str, detail: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config io error: {0}")]
    Io(String),
}

fn out_of_range(field: &'static str, detail: impl Into<String>) -> ConfigError {
    ConfigError::OutOfRange {
        field,
        detail: detail.into(),
    }
}

/// How mentioned objects are pulled out of a trajectory before verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionStrategy {
    /// Visual keys when present, else a backend call when one is configured,
    /// else the offline heuristic.
    #[default]
    Auto,
    /// Only the trajectory's own `<visual_keys>` section.
    Keys,
    /// One extraction call to a generation backend.
    Backend,
    /// Stop-word filtered n-grams; no network.
    Heuristic,
}

/// Inference-time parameters for iterative grounded aggregation.
///
/// `m_subset` is the per-slot peer group size (sometimes written K).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub n_population: usize,
    pub t_iterations: usize,
    pub m_subset: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub grounding_threshold: f64,
    pub seed: u64,
    pub max_retries_per_generation: usize,
    pub max_tokens: u32,
    /// Cap on concurrent backend generations within one run.
    pub max_in_flight: usize,
    pub extraction: ExtractionStrategy,
    /// Frames of a video checked per object; the best score wins.
    pub grounding_frames: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_population: 8,
            t_iterations: 3,
            m_subset: 4,
            temperature: 0.8,
            top_p: 0.95,
            grounding_threshold: 0.35,
            seed: 0,
            max_retries_per_generation: 2,
            max_tokens: 1024,
            max_in_flight: 8,
            extraction: ExtractionStrategy::Auto,
            grounding_frames: 4,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_population < 1 {
            return Err(out_of_range("n_population", "must be >= 1"));
        }
        if self.t_iterations < 1 {
            return Err(out_of_range("t_iterations", "must be >= 1"));
        }
        if self.m_subset < 1 || self.m_subset > self.n_population {
            return Err(out_of_range(
                "m_subset",
                format!("must satisfy 1 <= m_subset <= n_population ({})", self.n_population),
            ));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(out_of_range("temperature", "must be finite and >= 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(out_of_range("top_p", "must lie in (0, 1]"));
        }
        if !(self.grounding_threshold > 0.0 && self.grounding_threshold < 1.0) {
            return Err(out_of_range("grounding_threshold", "must lie in (0, 1)"));
        }
        if self.max_in_flight < 1 {
            return Err(out_of_range("max_in_flight", "must be >= 1"));
        }
        if self.grounding_frames < 1 {
            return Err(out_of_range("grounding_frames", "must be >= 1"));
        }
        Ok(())
    }

    /// Single-sample configuration used for baseline runs.
    pub fn single_sample(&self) -> Self {
        Self {
            n_population: 1,
            t_iterations: 1,
            m_subset: 1,
            ..self.clone()
        }
    }
}

/// Reward shaping and GSPO hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct RewardConfig<T> {
    pub w_acc: T,
    pub w_key: T,
    /// Precision share in the key-overlap reward.
    pub alpha: T,
    pub epsilon: T,
    /// Length-penalty strength.
    pub beta: T,
    /// EMA decay of the solve rate.
    pub gamma: T,
    pub j_rollouts: usize,
    /// Inverse temperature of the group preference softmax.
    pub lambda: T,
    pub alpha_kl: T,
}

impl<T: Real> Default for RewardConfig<T> {
    fn default() -> Self {
        Self {
            w_acc: T::one(),
            w_key: T::lit(0.35),
            alpha: T::lit(0.5),
            epsilon: T::lit(1e-8),
            beta: T::lit(0.001),
            gamma: T::lit(0.9),
            j_rollouts: 4,
            lambda: T::one(),
            alpha_kl: T::lit(0.02),
        }
    }
}

impl<T: Real> RewardConfig<T> {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if !self.w_acc.is_finite() {
            return Err(out_of_range("w_acc", "must be finite"));
        }
        if !self.w_key.is_finite() {
            return Err(out_of_range("w_key", "must be finite"));
        }
        if !unit(self.alpha) {
            return Err(out_of_range("alpha", "must lie in [0, 1]"));
        }
        if !(self.epsilon > T::zero()) || !self.epsilon.is_finite() {
            return Err(out_of_range("epsilon", "must be finite and > 0"));
        }
        if !(self.beta >= T::zero()) || !self.beta.is_finite() {
            return Err(out_of_range("beta", "must be finite and >= 0"));
        }
        if !(self.gamma >= T::zero() && self.gamma < T::one()) {
            return Err(out_of_range("gamma", "must lie in [0, 1)"));
        }
        if self.j_rollouts < 1 {
            return Err(out_of_range("j_rollouts", "must be >= 1"));
        }
        if !self.lambda.is_finite() {
            return Err(out_of_range("lambda", "must be finite"));
        }
        if !(self.alpha_kl >= T::zero()) || !self.alpha_kl.is_finite() {
            return Err(out_of_range("alpha_kl", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// On-disk config: an `[engine]` and a `[reward]` table, both optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub engine: EngineConfig,
    pub reward: RewardConfig<f64>,
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.engine.validate()?;
        cfg.reward.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }
}

//! Core types and math for grounded iterative aggregation of reasoning
//! trajectories.
//!
//! The numeric modules ([`rewards`], [`gspo`], [`stats`]) are generic over
//! the scalar type through [`Real`]; the aliases below fix it to `f64` (and
//! `f32` where that is useful).

pub mod config;
pub mod evalkit;
pub mod format;
pub mod gspo;
pub mod normalize;
pub mod rewards;
pub mod scalar;
pub mod seed;
pub mod stats;
pub mod types;

pub use config::{ConfigError, ConfigFile, EngineConfig, ExtractionStrategy};
pub use evalkit::{EvalItem, ExitReason, RunRecord, Summary, TraceSummary};
pub use format::{emit_output, parse_output, FormatError, ParsedOutput};
pub use normalize::normalize_answer;
pub use scalar::Real;
pub use types::{MediaType, MultimodalInput, Population, Trajectory};

pub type RewardConfig = config::RewardConfig<f64>;
pub type RewardConfig32 = config::RewardConfig<f32>;
pub type RewardBreakdown = rewards::RewardBreakdown<f64>;
pub type RewardBreakdown32 = rewards::RewardBreakdown<f32>;
pub type SolveRateTracker = rewards::SolveRateTracker<f64>;
pub type SolveRateTracker32 = rewards::SolveRateTracker<f32>;
pub type GroupRollouts = gspo::GroupRollouts<f64>;
pub type ToyPolicy = gspo::ToyPolicy<f64>;
pub type ToyGroup = gspo::ToyGroup<f64>;
pub type BootstrapCi = stats::BootstrapCi<f64>;

//! Generation backends, grounding verification and the iterative grounded
//! aggregation loop.

pub mod backend;
pub mod engine;
pub mod grounding;
pub mod prompts;
pub mod simulator;

pub use backend::{Backend, BackendError, GenerationRequest, HttpBackend, HttpBackendConfig, ScriptEntry, ScriptedBackend};
pub use engine::{check_consensus, sample_subset, Engine, EngineError, RunTrace};
pub use grounding::{FixtureEntry, FixtureVerifier, HttpVerifier, VerifiedEvidence, Verifier};
pub use prompts::PromptTemplates;
pub use simulator::{AggregationRule, SimulatorBackend, SimulatorProfile};

//! The evolution loop and the harness contract it evaluates through.

pub mod config;
pub mod evolution;
pub mod harness;
pub mod scoring;

pub use config::{load_config, parse_config, ConfigError, HarnessConfig, RunConfig};
pub use evolution::{
    assess, evaluate_seed, repair_loop, replay_frontier, resume_evolution, run_evolution, Assessment, Evolution, RepairAttempt,
    RepairReport, RunError, RunSummary,
};
pub use harness::{fast_check, Evaluator, FastResult, HarnessRun, InfraError, Manifest, Mode, SubprocessHarness};
pub use scoring::{classify, compute_score, is_suspicious, ScoreError};

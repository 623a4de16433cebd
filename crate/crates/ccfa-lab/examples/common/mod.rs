//! Shared fixtures for the runnable examples.

use ccfa_lab::cli::ExperimentConfig;

/// The small-memory synthetic stream used throughout the examples: 10
/// classes in 16-D, 5 initial + 5 single-class stages, one exemplar per
/// class.
pub fn small_memory_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(include_str!("../../configs/small_memory.toml"))
        .expect("bundled config parses")
}

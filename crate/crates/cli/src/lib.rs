//! Configuration-driven experiment runner: TOML configs and presets, parallel
//! trajectory fan-out, CSV/JSON summaries and SVG figures.

pub mod config;
pub mod output;
pub mod plot;
pub mod presets;
pub mod runner;

pub use config::{load_config, parse_config, ConfigError, Experiment, ExperimentConfig, Overrides};
pub use output::write_outputs;
pub use plot::{emit_plots, PlotReport};
pub use runner::{run_experiment, workers_from_env, EngineOutcome, ExperimentOutcome, RunError, WORKERS_ENV};

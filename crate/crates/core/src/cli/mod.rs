//! Command-line experiment harness: strict JSON configs, reproducible run
//! directories, one-parameter sweeps, plot-data export, and self-checks.

pub mod config;
pub mod harness;

pub use config::{
    build_env, build_learner, parse_config, parse_config_value, EnvSpec, ExperimentSpec,
    PolicySpec, SweepSpec,
};
pub use harness::{cmd_check, cmd_export_plots, cmd_run, cmd_sweep, execute_run};

//! Desk-scale policy-optimization lab.
//!
//! Small autoregressive policies are trained on enumerable generation
//! environments, where every policy statistic (KL to a target distribution,
//! entropy, mode coverage, true log-partition) can be computed exactly by
//! enumeration. The lab implements FlowRL-style distribution matching via a
//! trajectory-balance objective with a learned log-partition network,
//! alongside GRPO, PPO, and REINFORCE++ baselines, on a shared tape-based
//! reverse-mode gradient engine.
//!
//! Entire runs are pure functions of `(config, seed)`: rerunning a config
//! reproduces artifacts byte for byte.

pub mod cli;
pub mod envs;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};

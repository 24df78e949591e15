//! Training objectives.
//!
//! Five losses share one calling convention: record the scalar loss on a
//! caller-supplied tape against a [`Binder`](crate::grad::Binder) created
//! for the owning parameter block, and return the output node plus a
//! [`LossBreakdown`] of
//! diagnostic averages. The caller decides what to do with the node (one
//! backward sweep per optimizer step, or finite-difference probing in
//! tests).
//!
//! Conventions shared across losses:
//!
//! * Rewards arrive on the trajectories: `reward` is the raw environment
//!   value, `reward_norm` is whatever standardization the collector applied
//!   (per-group or batch-global). Losses never normalize internally, so a
//!   micro-batch shard sees exactly the statistics of the full rollout.
//! * Sequence-level importance ratios are clamped in log space at
//!   [`LOG_RATIO_CLAMP`] before exponentiation, then clipped into
//!   `[1 - eps, 1 + eps]`. The resulting weight multiplies the loss as a
//!   plain number: no gradient flows through it.
//! * `logp_old*` fields and critic values recorded at collection time are
//!   rollout-snapshot constants; only the live policy (and live critic /
//!   partition net) contribute gradient.

pub mod flowrl;
pub mod grpo;
pub mod partition;
pub mod ppo;
pub mod rpp;

pub use flowrl::{flowrl_loss, trajectory_balance_loss, FlowrlSettings};
pub use grpo::grpo_loss;
pub use partition::PartitionNet;
pub use ppo::{ppo_loss, Critic};
pub use rpp::rpp_loss;

use crate::error::{Error, Result};
use crate::grad::{ParamBlock, Parameter};
use crate::policy::{Policy, Prompt, Trajectory};
use serde::{Deserialize, Serialize};

/// Log-space bound applied to importance ratios before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 20.0;

/// How rewards are standardized before entering a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardNormMode {
    /// Standardize within each prompt's rollout group; residuals compare
    /// length-normalized log-probabilities.
    Group,
    /// Use raw rewards; residuals compare whole-sequence log-probabilities,
    /// so a perfectly matched policy and true log-partition zero the loss.
    Raw,
}

/// Trajectories sampled for one prompt, plus anything the collector
/// precomputed from the rollout snapshot.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub prompt: Prompt,
    pub trajectories: Vec<Trajectory>,
    /// Rollout-time critic values per trajectory and token position; empty
    /// unless the algorithm trains a critic.
    pub old_values: Vec<Vec<f64>>,
}

impl RolloutGroup {
    pub fn new(prompt: Prompt, trajectories: Vec<Trajectory>) -> Self {
        Self {
            prompt,
            trajectories,
            old_values: Vec::new(),
        }
    }
}

/// Diagnostic averages over the batch a loss was evaluated on. Fields that
/// a loss does not compute stay zero (or empty for the per-trajectory
/// vectors, which only the squared-residual losses fill).
#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub loss: f64,
    pub mean_residual: f64,
    /// Mean importance weight (or mean unclipped token ratio for the
    /// surrogate losses).
    pub mean_w: f64,
    /// Mean partition-net output across groups.
    pub log_z: f64,
    pub mean_logp_norm: f64,
    pub mean_ref_logp_norm: f64,
    pub mean_beta_r: f64,
    /// Per-trajectory residuals, in batch order.
    pub residuals: Vec<f64>,
    /// Per-trajectory importance weights, in batch order; the loss is the
    /// mean of `weights[i] * residuals[i]^2`.
    pub weights: Vec<f64>,
}

/// Standardize to zero mean and unit population standard deviation. A group
/// with identical entries maps to all zeros; fewer than two entries is a
/// contract violation.
pub fn group_normalize(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!(
            "reward normalization needs at least 2 samples, got {}",
            rewards.len()
        )));
    }
    // Exact equality check first: the mean of identical values can pick up
    // rounding noise, which would turn a degenerate group into garbage
    // rather than the zeros it must produce.
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Clipped sequence-level importance weight
/// `clip(exp(logp_current - logp_old), 1 - eps, 1 + eps)`, with the log
/// ratio bounded at [`LOG_RATIO_CLAMP`] first. Plain arithmetic: the result
/// carries no gradient.
pub fn importance_weight(logp_current: f64, logp_old: f64, epsilon: f64) -> f64 {
    let delta = (logp_current - logp_old).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    delta.exp().clamp(1.0 - epsilon, 1.0 + epsilon)
}

/// Policy plus partition net, optimized jointly by the distribution-matching
/// losses. Parameter order: policy first, then the partition net.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub policy: Policy,
    pub partition: PartitionNet,
}

impl ParamBlock for FlowModel {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.policy.params();
        out.extend(self.partition.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.policy.params_mut();
        out.extend(self.partition.params_mut());
        out
    }
}

/// Policy plus critic for the value-baseline surrogate. Parameter order:
/// policy first, then the critic.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub policy: Policy,
    pub critic: Critic,
}

impl ParamBlock for ActorCritic {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.policy.params();
        out.extend(self.critic.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.policy.params_mut();
        out.extend(self.critic.params_mut());
        out
    }
}

/// Total trajectory count across groups; errors on an empty batch.
pub(crate) fn batch_size(groups: &[RolloutGroup]) -> Result<usize> {
    let n: usize = groups.iter().map(|g| g.trajectories.len()).sum();
    if n == 0 {
        return Err(Error::Contract("empty rollout batch".into()));
    }
    Ok(n)
}

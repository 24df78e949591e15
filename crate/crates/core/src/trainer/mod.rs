//! The training loop: rollout collection under a frozen snapshot,
//! micro-batched optimizer steps, and periodic exact evaluation.
//!
//! One *phase* is: refresh the old-policy snapshot from the live policy,
//! collect `prompts_per_batch x group_size` trajectories from the snapshot,
//! split them into `micro_batches_per_rollout` contiguous shards, and take
//! one optimizer step per shard. Later shards therefore train on data that
//! has drifted off-policy, which is exactly the regime the clipped
//! importance weights are for; the first shard of every phase is on-policy
//! by construction.
//!
//! Determinism: every random draw comes from a stream keyed by
//! `(seed, channel, phase, prompt slot, rollout index)`, so a run is a pure
//! function of its configuration. The snapshot audit at the end of each
//! phase recomputes every stored `logp_old` and demands bitwise equality.

pub mod optim;

pub use optim::{Optimizer, OptimizerKind};

use crate::envs::{Environment, RewardTable};
use crate::error::{Error, Result};
use crate::grad::{Binder, ParamBlock, Parameter, Tape, Var};
use crate::metrics::{
    self, default_coverage_threshold, kl_divergence, mode_coverage, target_distribution,
    DistributionTable, TargetDistribution,
};
use crate::objectives::{
    flowrl_loss, group_normalize, grpo_loss, ppo_loss, rpp_loss, trajectory_balance_loss,
    ActorCritic, FlowModel, FlowrlSettings, LossBreakdown, PartitionNet, RewardNormMode,
    RolloutGroup,
};
use crate::policy::{
    sample_trajectory, save_policy, Policy, PolicyCheckpoint, ReferencePolicy,
    DEFAULT_ENUMERATION_CAP,
};
use crate::rng;
use serde::{Deserialize, Serialize};

/// RNG channel for parameter initialization.
pub const CHANNEL_INIT: u64 = 0;
/// RNG channel for rollout sampling.
pub const CHANNEL_ROLLOUT: u64 = 1;
/// RNG channel for sampled evaluation.
pub const CHANNEL_EVAL: u64 = 2;

/// Which loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Flowrl,
    /// Plain trajectory balance (no reference term, raw rewards).
    Tb,
    Grpo,
    Ppo,
    Rpp,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Flowrl => "flowrl",
            Algorithm::Tb => "tb",
            Algorithm::Grpo => "grpo",
            Algorithm::Ppo => "ppo",
            Algorithm::Rpp => "rpp",
        }
    }

    /// Does this loss train a partition net?
    pub fn uses_partition(&self) -> bool {
        matches!(self, Algorithm::Flowrl | Algorithm::Tb)
    }

    /// Does this loss train a critic?
    pub fn uses_critic(&self) -> bool {
        matches!(self, Algorithm::Ppo)
    }
}

/// Resolved training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Number of rollout phases.
    pub steps: usize,
    pub prompts_per_batch: usize,
    pub group_size: usize,
    pub micro_batches_per_rollout: usize,
    pub optimizer: OptimizerKind,
    pub lr_policy: f64,
    pub lr_partition: f64,
    pub lr_critic: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// Reference-KL penalty coefficient for the surrogate losses.
    pub lambda: f64,
    pub reward_norm_mode: RewardNormMode,
    pub use_importance_weights: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reward_norm_mode == RewardNormMode::Group && self.group_size < 2 {
            return Err(Error::Config(
                "group reward normalization needs group_size >= 2".into(),
            ));
        }
        if self.algorithm == Algorithm::Grpo && self.group_size < 2 {
            return Err(Error::Config("grpo advantages need group_size >= 2".into()));
        }
        if self.algorithm == Algorithm::Rpp && self.prompts_per_batch * self.group_size < 2 {
            return Err(Error::Config(
                "batch-global advantages need at least 2 trajectories per batch".into(),
            ));
        }
        for (name, lr) in [
            ("lr_policy", self.lr_policy),
            ("lr_partition", self.lr_partition),
            ("lr_critic", self.lr_critic),
        ] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.prompts_per_batch == 0 || self.group_size == 0 {
            return Err(Error::Config("batch dimensions must be positive".into()));
        }
        if self.micro_batches_per_rollout == 0 {
            return Err(Error::Config(
                "micro_batches_per_rollout must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn flowrl_settings(&self) -> FlowrlSettings {
        FlowrlSettings {
            beta: self.beta,
            epsilon: self.epsilon,
            norm_mode: self.reward_norm_mode,
            use_importance_weights: self.use_importance_weights,
        }
    }
}

/// Evaluation cadence and fidelity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Evaluate every this many phases (plus phase 0 and the final phase).
    pub interval: usize,
    /// Sample count when enumeration is off.
    pub samples: usize,
    /// Evaluate by exact support enumeration (else by sampling).
    pub enumerate: bool,
    /// Also checkpoint every this many phases (0 = final only).
    pub checkpoint_interval: usize,
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Config("eval interval must be positive".into()));
        }
        if !self.enumerate && self.samples == 0 {
            return Err(Error::Config(
                "sampled evaluation needs a positive sample count".into(),
            ));
        }
        Ok(())
    }
}

/// The trainable model for the configured algorithm.
// One value per run; the variant size spread has no performance cost here.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Learner {
    /// Policy + partition net (distribution-matching losses).
    Flow(FlowModel),
    /// Policy alone (grpo, rpp).
    PolicyOnly(Policy),
    /// Policy + critic (ppo).
    ActorCritic(ActorCritic),
}

impl Learner {
    pub fn policy(&self) -> &Policy {
        match self {
            Learner::Flow(m) => &m.policy,
            Learner::PolicyOnly(p) => p,
            Learner::ActorCritic(m) => &m.policy,
        }
    }

    pub fn policy_mut(&mut self) -> &mut Policy {
        match self {
            Learner::Flow(m) => &mut m.policy,
            Learner::PolicyOnly(p) => p,
            Learner::ActorCritic(m) => &mut m.policy,
        }
    }

    pub fn partition(&self) -> Option<&PartitionNet> {
        match self {
            Learner::Flow(m) => Some(&m.partition),
            _ => None,
        }
    }

    /// One learning rate per parameter slot, in declaration order.
    pub fn learning_rates(&self, cfg: &TrainConfig) -> Vec<f64> {
        let fill = |block: &dyn Fn() -> usize, lr: f64| vec![lr; block()];
        match self {
            Learner::Flow(m) => {
                let mut out = fill(&|| m.policy.params().len(), cfg.lr_policy);
                out.extend(fill(&|| m.partition.params().len(), cfg.lr_partition));
                out
            }
            Learner::PolicyOnly(p) => fill(&|| p.params().len(), cfg.lr_policy),
            Learner::ActorCritic(m) => {
                let mut out = fill(&|| m.policy.params().len(), cfg.lr_policy);
                out.extend(fill(&|| m.critic.params().len(), cfg.lr_critic));
                out
            }
        }
    }
}

impl ParamBlock for Learner {
    fn params(&self) -> Vec<&Parameter> {
        match self {
            Learner::Flow(m) => m.params(),
            Learner::PolicyOnly(p) => p.params(),
            Learner::ActorCritic(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Learner::Flow(m) => m.params_mut(),
            Learner::PolicyOnly(p) => p.params_mut(),
            Learner::ActorCritic(m) => m.params_mut(),
        }
    }
}

/// Mutable training state threaded through the phase loop.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed-phase counter; also keys the RNG streams.
    pub phase: usize,
    pub learner: Learner,
    /// Frozen rollout policy, refreshed exactly once per phase.
    pub snapshot: Policy,
    pub reference: ReferencePolicy,
    pub optimizer: Optimizer,
}

impl TrainState {
    pub fn new(learner: Learner, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = learner.params().iter().map(|p| p.len()).collect();
        let snapshot = learner.policy().snapshot();
        Self {
            phase: 0,
            learner,
            snapshot,
            reference: ReferencePolicy::Uniform,
            optimizer: Optimizer::new(cfg.optimizer, &sizes),
        }
    }
}

/// Sample one batch of rollout groups from the snapshot. Prompts are cycled
/// deterministically; rewards, reference log-probabilities, normalized
/// rewards, and (for critic algorithms) rollout-time values are all filled
/// here so the losses never recompute them.
pub fn collect_rollouts(
    state: &TrainState,
    env: &Environment,
    cfg: &TrainConfig,
) -> Result<Vec<RolloutGroup>> {
    let num_prompts = env.prompts.len();
    let mut groups = Vec::with_capacity(cfg.prompts_per_batch);
    for slot in 0..cfg.prompts_per_batch {
        let prompt = &env.prompts[(state.phase * cfg.prompts_per_batch + slot) % num_prompts];
        let mut trajectories = Vec::with_capacity(cfg.group_size);
        for idx in 0..cfg.group_size {
            let mut stream = rng::stream(
                cfg.seed,
                &[CHANNEL_ROLLOUT, state.phase as u64, slot as u64, idx as u64],
            );
            let mut t = sample_trajectory(&state.snapshot, prompt, &mut stream);
            t.reward = env.reward(prompt.id, &t.tokens)?;
            t.logp_ref = state.reference.logprob(&env.space, prompt, &t.tokens)?;
            trajectories.push(t);
        }
        let mut group = RolloutGroup::new(prompt.clone(), trajectories);
        if let Learner::ActorCritic(m) = &state.learner {
            group.old_values = group
                .trajectories
                .iter()
                .map(|t| {
                    (0..t.tokens.len())
                        .map(|j| m.critic.value(&group.prompt, &t.tokens[..j]))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
        }
        groups.push(group);
    }
    fill_normalized_rewards(&mut groups, cfg)?;
    Ok(groups)
}

/// Standardized rewards: batch-global for the global-advantage algorithm,
/// per-group otherwise (skipped for singleton groups, which only the
/// raw-reward losses accept).
fn fill_normalized_rewards(groups: &mut [RolloutGroup], cfg: &TrainConfig) -> Result<()> {
    if cfg.algorithm == Algorithm::Rpp {
        let all: Vec<f64> = groups
            .iter()
            .flat_map(|g| g.trajectories.iter().map(|t| t.reward))
            .collect();
        let norms = group_normalize(&all)?;
        let mut k = 0;
        for g in groups.iter_mut() {
            for t in &mut g.trajectories {
                t.reward_norm = norms[k];
                k += 1;
            }
        }
        return Ok(());
    }
    for g in groups.iter_mut() {
        if g.trajectories.len() < 2 {
            continue;
        }
        let rewards: Vec<f64> = g.trajectories.iter().map(|t| t.reward).collect();
        let norms = group_normalize(&rewards)?;
        for (t, &n) in g.trajectories.iter_mut().zip(&norms) {
            t.reward_norm = n;
        }
    }
    Ok(())
}

/// Split the batch into `m` contiguous shards of near-equal trajectory
/// counts (group structure is preserved; a group may straddle a boundary,
/// in which case its trajectories are split while keeping their collected
/// statistics). At most one shard per trajectory.
pub fn shard_groups(groups: &[RolloutGroup], m: usize) -> Vec<Vec<RolloutGroup>> {
    let total: usize = groups.iter().map(|g| g.trajectories.len()).sum();
    if total == 0 {
        return Vec::new();
    }
    let shards_n = m.min(total).max(1);
    let base = total / shards_n;
    let rem = total % shards_n;
    let mut out = Vec::with_capacity(shards_n);
    let (mut gi, mut ti) = (0usize, 0usize);
    for s in 0..shards_n {
        let mut need = base + usize::from(s < rem);
        let mut shard = Vec::new();
        while need > 0 {
            let g = &groups[gi];
            let take = need.min(g.trajectories.len() - ti);
            let mut piece =
                RolloutGroup::new(g.prompt.clone(), g.trajectories[ti..ti + take].to_vec());
            if !g.old_values.is_empty() {
                piece.old_values = g.old_values[ti..ti + take].to_vec();
            }
            shard.push(piece);
            ti += take;
            need -= take;
            if ti == g.trajectories.len() {
                gi += 1;
                ti = 0;
            }
        }
        out.push(shard);
    }
    out
}

/// One optimizer step per micro-batch shard; returns the trajectory-count
/// weighted aggregate of the per-shard breakdowns.
pub fn train_step(
    state: &mut TrainState,
    groups: &[RolloutGroup],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let shards = shard_groups(groups, cfg.micro_batches_per_rollout);
    let mut collected: Vec<(usize, LossBreakdown)> = Vec::with_capacity(shards.len());
    let n_shards = shards.len();
    for (i, shard) in shards.iter().enumerate() {
        let size: usize = shard.iter().map(|g| g.trajectories.len()).sum();
        let bd = apply_shard(state, shard, cfg).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!(
                "phase {}, micro-batch {}/{}: {msg}; first trajectory tokens {:?}, rewards {:?}",
                state.phase,
                i + 1,
                n_shards,
                shard[0].trajectories[0].tokens,
                shard[0]
                    .trajectories
                    .iter()
                    .map(|t| t.reward)
                    .collect::<Vec<_>>(),
            )),
            other => other,
        })?;
        collected.push((size, bd));
    }
    Ok(aggregate_breakdowns(collected))
}

/// Loss + backward + one optimizer step on a single shard.
fn apply_shard(
    state: &mut TrainState,
    shard: &[RolloutGroup],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let lrs = state.learner.learning_rates(cfg);
    let mut tape = Tape::new();
    let TrainState {
        learner, optimizer, ..
    } = state;
    match learner {
        Learner::Flow(m) => {
            let mut bind = Binder::for_block(m);
            let (loss, bd) = match cfg.algorithm {
                Algorithm::Flowrl => {
                    flowrl_loss(&mut tape, &mut bind, m, shard, &cfg.flowrl_settings())?
                }
                Algorithm::Tb => trajectory_balance_loss(&mut tape, &mut bind, m, shard, cfg.beta)?,
                other => {
                    return Err(Error::Contract(format!(
                        "{} cannot train a flow learner",
                        other.as_str()
                    )))
                }
            };
            backprop_and_step(&mut tape, &mut bind, loss, m, optimizer, &lrs)?;
            Ok(bd)
        }
        Learner::PolicyOnly(p) => {
            let mut bind = Binder::for_block(p);
            let (loss, bd) = match cfg.algorithm {
                Algorithm::Grpo => {
                    grpo_loss(&mut tape, &mut bind, p, shard, cfg.epsilon, cfg.lambda)?
                }
                Algorithm::Rpp => rpp_loss(&mut tape, &mut bind, p, shard, cfg.lambda)?,
                other => {
                    return Err(Error::Contract(format!(
                        "{} cannot train a bare policy",
                        other.as_str()
                    )))
                }
            };
            backprop_and_step(&mut tape, &mut bind, loss, p, optimizer, &lrs)?;
            Ok(bd)
        }
        Learner::ActorCritic(m) => {
            if cfg.algorithm != Algorithm::Ppo {
                return Err(Error::Contract(format!(
                    "{} cannot train an actor-critic learner",
                    cfg.algorithm.as_str()
                )));
            }
            let mut bind = Binder::for_block(m);
            let (loss, bd) = ppo_loss(&mut tape, &mut bind, m, shard, cfg.epsilon)?;
            backprop_and_step(&mut tape, &mut bind, loss, m, optimizer, &lrs)?;
            Ok(bd)
        }
    }
}

/// Shared tail of a shard update: finiteness check, backward sweep,
/// gradient accumulation, optimizer step.
fn backprop_and_step<B: ParamBlock>(
    tape: &mut Tape,
    bind: &mut Binder,
    loss: Var,
    block: &mut B,
    optimizer: &mut Optimizer,
    lrs: &[f64],
) -> Result<()> {
    let v = tape.value(loss);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    tape.backward(loss)?;
    block.zero_grad();
    bind.accumulate(tape, block);
    optimizer.step(block, lrs)
}

/// Trajectory-count weighted combination of per-shard breakdowns.
fn aggregate_breakdowns(shards: Vec<(usize, LossBreakdown)>) -> LossBreakdown {
    let total: usize = shards.iter().map(|(n, _)| n).sum();
    let mut out = LossBreakdown::default();
    for (n, bd) in shards {
        let w = n as f64 / total as f64;
        out.loss += w * bd.loss;
        out.mean_residual += w * bd.mean_residual;
        out.mean_w += w * bd.mean_w;
        out.log_z += w * bd.log_z;
        out.mean_logp_norm += w * bd.mean_logp_norm;
        out.mean_ref_logp_norm += w * bd.mean_ref_logp_norm;
        out.mean_beta_r += w * bd.mean_beta_r;
        out.residuals.extend(bd.residuals);
        out.weights.extend(bd.weights);
    }
    out
}

/// Bitwise audit that stored rollout statistics still describe the
/// snapshot: recomputes every `logp_old` and demands exact equality.
pub fn audit_snapshot(state: &TrainState, groups: &[RolloutGroup]) -> Result<()> {
    for g in groups {
        for t in &g.trajectories {
            let lp = state.snapshot.logprob(&g.prompt, &t.tokens)?;
            if lp.to_bits() != t.logp_old.to_bits() {
                return Err(Error::Contract(format!(
                    "snapshot discipline violated: stored logp_old {} vs recomputed {} for {:?}",
                    t.logp_old, lp, t.tokens
                )));
            }
        }
    }
    Ok(())
}

/// One evaluation row of metrics.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub kl_to_target: f64,
    pub entropy: f64,
    /// Modes covered at the default threshold, averaged over prompts.
    pub mode_coverage: f64,
    /// `|log Z - true log-partition|`; only reported by raw-mode partition
    /// learners.
    pub log_z_error: Option<f64>,
    pub mean_reward: f64,
}

/// One row of breakdown.csv.
#[derive(Debug, Clone)]
pub struct BreakdownRow {
    pub step: usize,
    pub breakdown: LossBreakdown,
}

/// Everything a run produces, in memory; the harness decides where it goes.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: Vec<MetricsRow>,
    pub breakdown: Vec<BreakdownRow>,
    /// Policy checkpoints at (phase, snapshot) pairs; always includes the
    /// final phase.
    pub checkpoints: Vec<(usize, PolicyCheckpoint)>,
    pub state: TrainState,
}

/// Per-prompt ground truth cached for evaluation.
struct EvalOracle {
    rewards: Vec<RewardTable>,
    targets: Vec<TargetDistribution>,
}

impl EvalOracle {
    fn build(env: &Environment, beta: f64, reference: &ReferencePolicy) -> Result<Self> {
        let mut rewards = Vec::with_capacity(env.prompts.len());
        let mut targets = Vec::with_capacity(env.prompts.len());
        for prompt in &env.prompts {
            let table = env.enumerate_rewards(prompt.id, DEFAULT_ENUMERATION_CAP)?;
            let target = target_distribution(&table, &env.space, prompt, beta, reference)?;
            rewards.push(table);
            targets.push(target);
        }
        Ok(Self { rewards, targets })
    }
}

/// Full training run. Alternates snapshot refresh, collection, micro-batch
/// updates, and exact (or sampled) evaluation every `eval.interval` phases,
/// plus phase 0 and the final phase.
pub fn train_loop(
    env: &Environment,
    learner: Learner,
    cfg: &TrainConfig,
    eval: &EvalSettings,
) -> Result<RunResult> {
    cfg.validate()?;
    eval.validate()?;
    let mut state = TrainState::new(learner, cfg);
    let oracle = EvalOracle::build(env, cfg.beta, &state.reference)?;
    let mut result = RunResult {
        metrics: Vec::new(),
        breakdown: Vec::new(),
        checkpoints: Vec::new(),
        state: state.clone(),
    };
    result
        .metrics
        .push(evaluate(&state, env, &oracle, cfg, eval, 0)?);
    for phase in 1..=cfg.steps {
        state.phase = phase;
        state.snapshot = state.learner.policy().snapshot();
        let groups = collect_rollouts(&state, env, cfg)?;
        let bd = train_step(&mut state, &groups, cfg)?;
        audit_snapshot(&state, &groups)?;
        result.breakdown.push(BreakdownRow {
            step: phase,
            breakdown: bd,
        });
        if phase % eval.interval == 0 || phase == cfg.steps {
            result
                .metrics
                .push(evaluate(&state, env, &oracle, cfg, eval, phase)?);
        }
        if eval.checkpoint_interval > 0 && phase % eval.checkpoint_interval == 0 {
            result
                .checkpoints
                .push((phase, save_policy(state.learner.policy())));
        }
    }
    if result
        .checkpoints
        .last()
        .map(|(p, _)| *p != cfg.steps)
        .unwrap_or(true)
    {
        result
            .checkpoints
            .push((cfg.steps, save_policy(state.learner.policy())));
    }
    result.state = state;
    Ok(result)
}

/// Metrics against the cached oracle, averaged across prompts.
fn evaluate(
    state: &TrainState,
    env: &Environment,
    oracle: &EvalOracle,
    cfg: &TrainConfig,
    eval: &EvalSettings,
    phase: usize,
) -> Result<MetricsRow> {
    let policy = state.learner.policy();
    let n = env.prompts.len() as f64;
    let mut row = MetricsRow {
        step: phase,
        kl_to_target: 0.0,
        entropy: 0.0,
        mode_coverage: 0.0,
        log_z_error: None,
        mean_reward: 0.0,
    };
    let report_log_z =
        cfg.reward_norm_mode == RewardNormMode::Raw && state.learner.partition().is_some();
    let mut log_z_err = 0.0;
    for (pid, prompt) in env.prompts.iter().enumerate() {
        let target = &oracle.targets[pid];
        let rewards = &oracle.rewards[pid];
        let dist = if eval.enumerate {
            DistributionTable::from_policy(policy, prompt, DEFAULT_ENUMERATION_CAP)?
        } else {
            let mut stream = rng::stream(cfg.seed, &[CHANNEL_EVAL, phase as u64, prompt.id as u64]);
            DistributionTable::from_samples(policy, prompt, eval.samples, &mut stream)
        };
        row.kl_to_target += kl_divergence(&dist, &target.table)? / n;
        row.entropy += metrics::entropy(&dist) / n;
        let modes = &env.modes[pid];
        let threshold = default_coverage_threshold(modes.len().max(1));
        row.mode_coverage +=
            mode_coverage(&dist, modes, env.space.max_len, threshold).covered as f64 / n;
        row.mean_reward += dist
            .sequences
            .iter()
            .zip(&dist.probs)
            .map(|(seq, &p)| {
                p * rewards
                    .lookup(seq)
                    .expect("reward table covers the full support")
            })
            .sum::<f64>()
            / n;
        if report_log_z {
            let lz = state
                .learner
                .partition()
                .expect("checked above")
                .log_partition(prompt)?;
            log_z_err += (lz - target.log_partition).abs() / n;
        }
    }
    if report_log_z {
        row.log_z_error = Some(log_z_err);
    }
    Ok(row)
}

//! Randomized self-checks: gradient verification for every loss, the
//! enumerated gradient-equivalence check, and the objective decomposition
//! identity. The `check` CLI verb runs a small sample of each and prints a
//! pass/fail table; the acceptance suite runs them at full count.

use crate::envs::{Environment, ModalConfig};
use crate::error::Result;
use crate::grad::{finite_diff_check, Activation, Binder, DenseNet, FdReport, ParamBlock, Tape};
use crate::metrics::{prop1_discrepancy, prop2_check, Prop1Report, Prop2Report};
use crate::objectives::{
    flowrl::{current_weights, flowrl_loss_weighted},
    group_normalize, grpo_loss, ppo_loss, rpp_loss, trajectory_balance_loss, ActorCritic, Critic,
    FlowModel, FlowrlSettings, PartitionNet, RewardNormMode, RolloutGroup,
};
use crate::policy::{sample_trajectory, MlpDims, Policy, ReferencePolicy};
use crate::rng;
use crate::trainer::Algorithm;
use rand::Rng;

/// Relative-error bound for all finite-difference checks.
pub const FD_TOLERANCE: f64 = 1e-5;
/// Relative-discrepancy bound for the gradient-equivalence check.
pub const PROP1_TOLERANCE: f64 = 1e-4;
/// Absolute bound for the decomposition identity.
pub const PROP2_TOLERANCE: f64 = 1e-8;

/// One row of the `check` verb's table.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Random dense network with 2-4 layers; the loss is the squared first
/// output on a fixed random input.
pub fn dense_net_fd(seed: u64) -> Result<FdReport> {
    let mut init = rng::stream(seed, &[9, 0]);
    let depth = init.gen_range(2..=4usize);
    let mut dims = vec![init.gen_range(2..=5usize)];
    for _ in 0..depth {
        dims.push(init.gen_range(2..=6usize));
    }
    let mut activations: Vec<Activation> = (1..depth)
        .map(|_| {
            if init.gen_bool(0.5) {
                Activation::Tanh
            } else {
                Activation::Relu
            }
        })
        .collect();
    activations.push(Activation::Identity);
    let mut net = DenseNet::new(&dims, &activations, &mut init);
    let input: Vec<f64> = (0..dims[0]).map(|_| init.gen_range(-1.0..1.0)).collect();
    finite_diff_check(
        &mut net,
        &|tape: &mut Tape, bind: &mut Binder, net: &DenseNet| {
            let xs: Vec<_> = input.iter().map(|&v| tape.leaf(v)).collect();
            let out = net.forward_tape(tape, bind, 0, &xs)?;
            Ok(tape.square(out[0]))
        },
        FD_TOLERANCE,
    )
}

/// Tiny randomized environment for loss-level checks.
fn check_env(seed: u64) -> Result<Environment> {
    ModalConfig {
        vocab_size: 3,
        length: 3,
        variable_length: seed.is_multiple_of(2),
        num_modes: 2,
        peaks: vec![1.0],
        tau: vec![0.7],
        floor: 0.05,
        radius: 0,
        num_prompts: 1,
        seed,
    }
    .build()
}

/// Collect a stale batch: rollouts and statistics come from the current
/// policy, after which the live parameters are jittered so stored
/// `logp_old` / critic values genuinely disagree with the live model.
fn stale_batch(
    policy: &Policy,
    critic: Option<&Critic>,
    env: &Environment,
    algorithm: Algorithm,
    norm: RewardNormMode,
    seed: u64,
) -> Result<Vec<RolloutGroup>> {
    let prompt = &env.prompts[0];
    let mut groups = Vec::new();
    for g in 0..2usize {
        let mut trajectories = Vec::new();
        for i in 0..3usize {
            let mut stream = rng::stream(seed, &[8, g as u64, i as u64]);
            let mut t = sample_trajectory(policy, prompt, &mut stream);
            t.reward = env.reward(prompt.id, &t.tokens)?;
            t.logp_ref = ReferencePolicy::Uniform.logprob(&env.space, prompt, &t.tokens)?;
            trajectories.push(t);
        }
        let mut group = RolloutGroup::new(prompt.clone(), trajectories);
        if let Some(c) = critic {
            group.old_values = group
                .trajectories
                .iter()
                .map(|t| {
                    (0..t.tokens.len())
                        .map(|j| c.value(&group.prompt, &t.tokens[..j]))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
        }
        groups.push(group);
    }
    match algorithm {
        Algorithm::Rpp => {
            let all: Vec<f64> = groups
                .iter()
                .flat_map(|g| g.trajectories.iter().map(|t| t.reward))
                .collect();
            let norms = group_normalize(&all)?;
            let mut k = 0;
            for g in &mut groups {
                for t in &mut g.trajectories {
                    t.reward_norm = norms[k];
                    k += 1;
                }
            }
        }
        _ if algorithm == Algorithm::Grpo || norm == RewardNormMode::Group => {
            for g in &mut groups {
                let rewards: Vec<f64> = g.trajectories.iter().map(|t| t.reward).collect();
                let norms = group_normalize(&rewards)?;
                for (t, &n) in g.trajectories.iter_mut().zip(&norms) {
                    t.reward_norm = n;
                }
            }
        }
        _ => {}
    }
    Ok(groups)
}

/// Add small random noise to every parameter of a block.
fn jitter<B: ParamBlock>(block: &mut B, scale: f64, seed: u64) {
    let mut stream = rng::stream(seed, &[8, 99]);
    for p in block.params_mut() {
        for v in p.values.iter_mut() {
            *v += scale * stream.gen_range(-1.0..1.0);
        }
    }
}

/// Finite-difference check of one training loss on a random stale batch.
///
/// For the importance-weighted distribution-matching loss, the weights are
/// frozen at their current values before differentiation — that is the
/// function the analytic gradient computes, since the weights are
/// gradient-opaque by contract.
pub fn loss_fd(algorithm: Algorithm, seed: u64) -> Result<FdReport> {
    let env = check_env(seed)?;
    let mut init = rng::stream(seed, &[8, 0]);
    let policy = Policy::new_tabular_random(env.space, 0.5, &mut init);
    let norm = if seed.is_multiple_of(2) {
        RewardNormMode::Group
    } else {
        RewardNormMode::Raw
    };
    match algorithm {
        Algorithm::Flowrl | Algorithm::Tb => {
            let mut model = FlowModel {
                policy,
                partition: PartitionNet::new(
                    env.prompts[0].embedding.len(),
                    6,
                    &mut rng::stream(seed, &[8, 1]),
                ),
            };
            let groups = stale_batch(&model.policy, None, &env, algorithm, norm, seed)?;
            jitter(&mut model, 0.02, seed);
            if algorithm == Algorithm::Tb {
                return finite_diff_check(
                    &mut model,
                    &|tape: &mut Tape, bind: &mut Binder, m: &FlowModel| {
                        Ok(trajectory_balance_loss(tape, bind, m, &groups, 4.0)?.0)
                    },
                    FD_TOLERANCE,
                );
            }
            let settings = FlowrlSettings {
                beta: 4.0,
                epsilon: 0.2,
                norm_mode: norm,
                use_importance_weights: true,
            };
            let frozen = current_weights(&model, &groups, &settings)?;
            finite_diff_check(
                &mut model,
                &|tape: &mut Tape, bind: &mut Binder, m: &FlowModel| {
                    Ok(flowrl_loss_weighted(tape, bind, m, &groups, &settings, Some(&frozen))?.0)
                },
                FD_TOLERANCE,
            )
        }
        Algorithm::Grpo | Algorithm::Rpp => {
            let mut policy = policy;
            let groups = stale_batch(&policy, None, &env, algorithm, norm, seed)?;
            jitter(&mut policy, 0.02, seed);
            if algorithm == Algorithm::Grpo {
                finite_diff_check(
                    &mut policy,
                    &|tape: &mut Tape, bind: &mut Binder, p: &Policy| {
                        Ok(grpo_loss(tape, bind, p, &groups, 0.2, 1e-2)?.0)
                    },
                    FD_TOLERANCE,
                )
            } else {
                finite_diff_check(
                    &mut policy,
                    &|tape: &mut Tape, bind: &mut Binder, p: &Policy| {
                        Ok(rpp_loss(tape, bind, p, &groups, 1e-2)?.0)
                    },
                    FD_TOLERANCE,
                )
            }
        }
        Algorithm::Ppo => {
            let critic = Critic::new(
                env.space,
                MlpDims {
                    prompt_dim: env.prompts[0].embedding.len(),
                    token_embed_dim: 4,
                    hidden_dim: 6,
                },
                &mut rng::stream(seed, &[8, 2]),
            );
            let mut model = ActorCritic { policy, critic };
            let groups = stale_batch(
                &model.policy,
                Some(&model.critic),
                &env,
                algorithm,
                norm,
                seed,
            )?;
            jitter(&mut model, 0.02, seed);
            finite_diff_check(
                &mut model,
                &|tape: &mut Tape, bind: &mut Binder, m: &ActorCritic| {
                    Ok(ppo_loss(tape, bind, m, &groups, 0.2)?.0)
                },
                FD_TOLERANCE,
            )
        }
    }
}

/// Enumerable spaces with at most 1,024 sequences, cycled by seed.
fn prop_space(seed: u64) -> (usize, usize) {
    match seed % 4 {
        0 => (4, 3),  // 64
        1 => (4, 5),  // 1024
        2 => (3, 5),  // 243
        _ => (2, 10), // 1024
    }
}

/// Gradient-equivalence check on a random tabular policy and random tilted
/// target; `factor` scales the divergence gradient (2.0 is the claimed
/// constant, anything else is a negative control).
pub fn prop1_random(seed: u64, factor: f64) -> Result<Prop1Report> {
    let (vocab, len) = prop_space(seed);
    let env = ModalConfig {
        vocab_size: vocab,
        length: len,
        variable_length: false,
        num_modes: 2,
        peaks: vec![1.0],
        tau: vec![0.6],
        floor: 0.02,
        radius: 0,
        num_prompts: 1,
        seed,
    }
    .build()?;
    let mut init = rng::stream(seed, &[7, 0]);
    let mut policy = Policy::new_tabular_random(env.space, 1.0, &mut init);
    let rewards = env.enumerate_rewards(0, 1 << 20)?;
    let beta = init.gen_range(0.5..6.0);
    let log_z = init.gen_range(-2.0..2.0);
    prop1_discrepancy(
        &mut policy,
        &env.prompts[0],
        &rewards,
        beta,
        log_z,
        factor,
        PROP1_TOLERANCE,
    )
}

/// Decomposition identity on random policy, reference, temperature, and
/// normalizer draws. Odd seeds use a frozen random MLP reference.
pub fn prop2_random(seed: u64) -> Result<Prop2Report> {
    let (vocab, len) = prop_space(seed);
    let env = ModalConfig {
        vocab_size: vocab,
        length: len,
        variable_length: false,
        num_modes: 2,
        peaks: vec![1.0],
        tau: vec![0.6],
        floor: 0.02,
        radius: 0,
        num_prompts: 1,
        seed: seed.wrapping_add(1),
    }
    .build()?;
    let mut init = rng::stream(seed, &[6, 0]);
    let policy = Policy::new_tabular_random(env.space, 1.0, &mut init);
    let reference = if seed % 2 == 1 {
        ReferencePolicy::Frozen(Box::new(Policy::new_mlp(
            env.space,
            MlpDims {
                prompt_dim: env.prompts[0].embedding.len(),
                token_embed_dim: 4,
                hidden_dim: 5,
            },
            &mut rng::stream(seed, &[6, 1]),
        )))
    } else {
        ReferencePolicy::Uniform
    };
    let rewards = env.enumerate_rewards(0, 1 << 20)?;
    let beta = init.gen_range(0.5..6.0);
    let log_z = init.gen_range(-4.0..4.0);
    prop2_check(
        &policy,
        &reference,
        &env.prompts[0],
        &rewards,
        beta,
        log_z,
        PROP2_TOLERANCE,
    )
}

/// The `check` verb's suite: a sample of every self-check with one table
/// line each. Returns the lines; the caller prints them and maps any
/// failure to a numeric-failure exit.
pub fn run_all(seed: u64) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();

    let report = dense_net_fd(seed)?;
    lines.push(CheckLine {
        name: "gradient: dense net".into(),
        pass: report.pass,
        detail: format!(
            "max rel err {:.2e} (tol {:.0e})",
            report.max_rel_error, report.tolerance
        ),
    });

    for algorithm in [
        Algorithm::Flowrl,
        Algorithm::Tb,
        Algorithm::Grpo,
        Algorithm::Ppo,
        Algorithm::Rpp,
    ] {
        let report = loss_fd(algorithm, seed)?;
        lines.push(CheckLine {
            name: format!("gradient: {} loss", algorithm.as_str()),
            pass: report.pass,
            detail: format!(
                "max rel err {:.2e} (tol {:.0e})",
                report.max_rel_error, report.tolerance
            ),
        });
    }

    let report = prop1_random(seed, 2.0)?;
    lines.push(CheckLine {
        name: "gradient equivalence (factor 2)".into(),
        pass: report.pass,
        detail: format!(
            "rel discrepancy {:.2e} over {} sequences",
            report.rel_discrepancy, report.num_sequences
        ),
    });
    let control = prop1_random(seed, 4.0)?;
    lines.push(CheckLine {
        name: "gradient equivalence negative control (factor 4)".into(),
        pass: !control.pass,
        detail: format!(
            "rel discrepancy {:.2e} (must fail)",
            control.rel_discrepancy
        ),
    });

    let report = prop2_random(seed)?;
    lines.push(CheckLine {
        name: "objective decomposition identity".into(),
        pass: report.pass,
        detail: format!(
            "|lhs - rhs| = {:.2e} (tol {:.0e})",
            report.abs_diff, report.tolerance
        ),
    });

    Ok(lines)
}

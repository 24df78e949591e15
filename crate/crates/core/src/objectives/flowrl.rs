//! Squared-residual distribution-matching losses.
//!
//! The policy is pushed toward the reward-tilted reference by penalizing,
//! per trajectory, the squared mismatch between the learned log-partition
//! plus the policy log-probability and the tilted target's log-mass. Two
//! reward modes change what "log-mass" means:
//!
//! * `Raw`: `(log_z + ln pi(y) - beta r(y) - ln ref(y))^2` on whole-sequence
//!   quantities. At the exact tilted target with the true log-partition the
//!   residual is identically zero, which makes this the mode for
//!   convergence studies on enumerable spaces.
//! * `Group`: log-probabilities are divided by sequence length and the raw
//!   reward is replaced by the collector's standardized `reward_norm`, which
//!   trades the exact fixed point for scale-free comparability across
//!   lengths and reward offsets.
//!
//! Each squared residual is multiplied by a clipped sequence-level
//! importance weight computed off the tape (see
//! [`super::importance_weight`]): stale micro-batch
//! shards are damped without contributing a gradient path of their own.
//!
//! The plain trajectory-balance variant drops the reference term and the
//! importance weight: `(log_z + ln pi(y) - beta r(y))^2` on raw rewards.

use super::{
    batch_size, importance_weight, FlowModel, LossBreakdown, RewardNormMode, RolloutGroup,
};
use crate::error::Result;
use crate::grad::{Binder, ParamBlock, Tape, Var};

/// Knobs for [`flowrl_loss`].
#[derive(Debug, Clone, Copy)]
pub struct FlowrlSettings {
    /// Reward scale in the tilted target `ref(y) exp(beta r(y))`.
    pub beta: f64,
    /// Importance-weight clip half-width.
    pub epsilon: f64,
    pub norm_mode: RewardNormMode,
    /// When false every weight is 1 (ablation switch).
    pub use_importance_weights: bool,
}

/// Mean weighted squared residual over all trajectories in the batch.
pub fn flowrl_loss(
    tape: &mut Tape,
    bind: &mut Binder,
    model: &FlowModel,
    groups: &[RolloutGroup],
    settings: &FlowrlSettings,
) -> Result<(Var, LossBreakdown)> {
    flowrl_loss_weighted(tape, bind, model, groups, settings, None)
}

/// [`flowrl_loss`] with externally pinned importance weights (flat, in
/// batch order). Finite-difference probes use this to hold the weights at
/// their unperturbed values, which is exactly the function the analytic
/// gradient differentiates.
pub fn flowrl_loss_weighted(
    tape: &mut Tape,
    bind: &mut Binder,
    model: &FlowModel,
    groups: &[RolloutGroup],
    settings: &FlowrlSettings,
    weight_override: Option<&[f64]>,
) -> Result<(Var, LossBreakdown)> {
    let n = batch_size(groups)? as f64;
    let n_policy_slots = model.policy.params().len();
    let mut terms = Vec::new();
    let mut bd = LossBreakdown::default();
    let mut k = 0usize;
    for group in groups {
        let lz_var =
            model
                .partition
                .log_partition_tape(tape, bind, n_policy_slots, &group.prompt)?;
        let lz = tape.value(lz_var);
        bd.log_z += lz / groups.len() as f64;
        for t in &group.trajectories {
            let lp_var = model
                .policy
                .logprob_tape(tape, bind, &group.prompt, &t.tokens)?;
            let lp = tape.value(lp_var);
            let len = t.tokens.len() as f64;
            // Residual = log_z + scaled logp - (beta-weighted reward + scaled
            // reference logp); the subtrahend is a constant on the tape.
            let (scaled_lp_var, ref_scaled, beta_r) = match settings.norm_mode {
                RewardNormMode::Group => (
                    tape.mul_const(lp_var, 1.0 / len),
                    t.logp_ref / len,
                    settings.beta * t.reward_norm,
                ),
                RewardNormMode::Raw => (lp_var, t.logp_ref, settings.beta * t.reward),
            };
            let partial = tape.add(lz_var, scaled_lp_var);
            let residual_var = tape.add_const(partial, -(beta_r + ref_scaled));
            let w = match weight_override {
                Some(ws) => ws[k],
                None if settings.use_importance_weights => {
                    importance_weight(lp, t.logp_old, settings.epsilon)
                }
                None => 1.0,
            };
            let sq = tape.square(residual_var);
            terms.push(tape.mul_const(sq, w));
            bd.residuals.push(tape.value(residual_var));
            bd.weights.push(w);
            bd.mean_residual += tape.value(residual_var) / n;
            bd.mean_w += w / n;
            bd.mean_logp_norm += lp / len / n;
            bd.mean_ref_logp_norm += t.logp_ref / len / n;
            bd.mean_beta_r += beta_r / n;
            k += 1;
        }
    }
    let loss = tape.mean(&terms);
    bd.loss = tape.value(loss);
    Ok((loss, bd))
}

/// The importance weights [`flowrl_loss`] would apply right now, flat in
/// batch order. Useful for freezing them across finite-difference probes.
pub fn current_weights(
    model: &FlowModel,
    groups: &[RolloutGroup],
    settings: &FlowrlSettings,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for group in groups {
        for t in &group.trajectories {
            let lp = model.policy.logprob(&group.prompt, &t.tokens)?;
            out.push(if settings.use_importance_weights {
                importance_weight(lp, t.logp_old, settings.epsilon)
            } else {
                1.0
            });
        }
    }
    Ok(out)
}

/// Mean squared trajectory-balance residual
/// `(log_z + ln pi(y) - beta r(y))^2`: no reference term, raw rewards, no
/// importance weighting.
pub fn trajectory_balance_loss(
    tape: &mut Tape,
    bind: &mut Binder,
    model: &FlowModel,
    groups: &[RolloutGroup],
    beta: f64,
) -> Result<(Var, LossBreakdown)> {
    let n = batch_size(groups)? as f64;
    let n_policy_slots = model.policy.params().len();
    let mut terms = Vec::new();
    let mut bd = LossBreakdown {
        mean_w: 1.0,
        ..LossBreakdown::default()
    };
    for group in groups {
        let lz_var =
            model
                .partition
                .log_partition_tape(tape, bind, n_policy_slots, &group.prompt)?;
        bd.log_z += tape.value(lz_var) / groups.len() as f64;
        for t in &group.trajectories {
            let lp_var = model
                .policy
                .logprob_tape(tape, bind, &group.prompt, &t.tokens)?;
            let lp = tape.value(lp_var);
            let len = t.tokens.len() as f64;
            let beta_r = beta * t.reward;
            let partial = tape.add(lz_var, lp_var);
            let residual_var = tape.add_const(partial, -beta_r);
            terms.push(tape.square(residual_var));
            bd.residuals.push(tape.value(residual_var));
            bd.weights.push(1.0);
            bd.mean_residual += tape.value(residual_var) / n;
            bd.mean_logp_norm += lp / len / n;
            bd.mean_beta_r += beta_r / n;
        }
    }
    let loss = tape.mean(&terms);
    bd.loss = tape.value(loss);
    Ok((loss, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::ModalConfig;
    use crate::grad::check::{analytic_gradient, fd_gradient, finite_diff_compare};
    use crate::metrics::target_distribution;
    use crate::objectives::PartitionNet;
    use crate::policy::{
        sample_trajectory, Policy, Prompt, ReferencePolicy, TabularPolicy, TokenSpace, Trajectory,
    };
    use crate::rng;

    /// Tabular policy over one token whose first-token probability is
    /// exactly `exp(lp0)`: row logits `[lp0, ln(1 - exp(lp0))]`.
    fn single_token_policy(lp0: f64) -> Policy {
        let space = TokenSpace::fixed(2, 1);
        let mut pol = TabularPolicy::zeros(space);
        pol.logits.values[0] = lp0;
        pol.logits.values[1] = (1.0 - lp0.exp()).ln();
        Policy::Tabular(pol)
    }

    fn traj(tokens: Vec<u16>, lp: f64, reward: f64, reward_norm: f64, logp_ref: f64) -> Trajectory {
        Trajectory {
            prompt_id: 0,
            tokens,
            reward,
            reward_norm,
            logp_current: lp,
            logp_old: lp,
            logp_old_tokens: vec![],
            logp_ref,
        }
    }

    fn settings(norm_mode: RewardNormMode) -> FlowrlSettings {
        FlowrlSettings {
            beta: 1.0,
            epsilon: 0.2,
            norm_mode,
            use_importance_weights: true,
        }
    }

    #[test]
    fn raw_residual_arithmetic() {
        // log_z = 0, logp = -1, beta r = 0.5, ref logp = -1.2:
        // residual -0.3, squared term 0.09, weight 1 (on-policy).
        let model = FlowModel {
            policy: single_token_policy(-1.0),
            partition: PartitionNet::constant(1, 4, 0.0),
        };
        let groups = vec![RolloutGroup::new(
            Prompt::one_hot(0, 1),
            vec![traj(vec![0], -1.0, 0.5, 0.0, -1.2)],
        )];
        let mut tape = Tape::new();
        let mut bind = Binder::for_block(&model);
        let (loss, bd) = flowrl_loss(
            &mut tape,
            &mut bind,
            &model,
            &groups,
            &settings(RewardNormMode::Raw),
        )
        .unwrap();
        assert!(
            (tape.value(loss) - 0.09).abs() < 1e-9,
            "loss {}",
            tape.value(loss)
        );
        assert!((bd.mean_residual + 0.3).abs() < 1e-9);
        assert_eq!(bd.mean_w, 1.0);
        tape.backward(loss).unwrap();
    }

    #[test]
    fn group_mode_normalizes_by_length() {
        // Two length-2 trajectories on the same tokens, rewards [2, 0]
        // standardized to [1, -1] with beta = 0.5. Per-token logp is -1, ref
        // logp -2.4, log_z = 0:
        //   residual_0 = -1 - 0.5 + 1.2 = -0.3 -> 0.09
        //   residual_1 = -1 + 0.5 + 1.2 =  0.7 -> 0.49
        let space = TokenSpace::fixed(2, 2);
        let mut pol = TabularPolicy::zeros(space);
        for prefix in [vec![], vec![0u16]] {
            let row = space.prefix_index(&prefix).unwrap();
            let (a, b) = (pol.logits.at(row, 0), pol.logits.at(row, 1));
            pol.logits.values[a] = -1.0;
            pol.logits.values[b] = (1.0 - (-1.0f64).exp()).ln();
        }
        let model = FlowModel {
            policy: Policy::Tabular(pol),
            partition: PartitionNet::constant(1, 4, 0.0),
        };
        let norms = crate::objectives::group_normalize(&[2.0, 0.0]).unwrap();
        let groups = vec![RolloutGroup::new(
            Prompt::one_hot(0, 1),
            vec![
                traj(vec![0, 0], -2.0, 2.0, norms[0], -2.4),
                traj(vec![0, 0], -2.0, 0.0, norms[1], -2.4),
            ],
        )];
        let mut tape = Tape::new();
        let mut bind = Binder::for_block(&model);
        let mut s = settings(RewardNormMode::Group);
        s.beta = 0.5;
        let (loss, bd) = flowrl_loss(&mut tape, &mut bind, &model, &groups, &s).unwrap();
        assert!(
            (tape.value(loss) - 0.29).abs() < 1e-9,
            "loss {}",
            tape.value(loss)
        );
        assert!((bd.mean_logp_norm + 1.0).abs() < 1e-9);
        assert!((bd.mean_ref_logp_norm + 1.2).abs() < 1e-9);
        assert!((bd.mean_residual - 0.2).abs() < 1e-9);
        assert_eq!(bd.mean_beta_r, 0.0); // standardized rewards average out
    }

    #[test]
    fn raw_mode_is_zero_at_the_exact_target() {
        let env = ModalConfig {
            vocab_size: 3,
            length: 3,
            variable_length: false,
            num_modes: 2,
            peaks: vec![1.0],
            tau: vec![0.7],
            floor: 0.01,
            radius: 0,
            num_prompts: 1,
            seed: 11,
        }
        .build()
        .unwrap();
        let prompt = env.prompts[0].clone();
        let rewards = env.enumerate_rewards(0, 1 << 20).unwrap();
        let beta = 2.0;
        let target = target_distribution(
            &rewards,
            &env.space,
            &prompt,
            beta,
            &ReferencePolicy::Uniform,
        )
        .unwrap();
        let entries: Vec<(Vec<u16>, f64)> = target
            .table
            .sequences
            .iter()
            .cloned()
            .zip(target.table.probs.iter().copied())
            .collect();
        let policy =
            Policy::Tabular(TabularPolicy::from_distribution(env.space, &entries).unwrap());
        let model = FlowModel {
            policy,
            partition: PartitionNet::constant(1, 4, target.log_partition),
        };
        // batch = the whole support, each trajectory carrying its true
        // reward and reference log-probability
        let lref = -(env.space.max_len as f64) * (env.space.vocab_size as f64).ln();
        let trajectories: Vec<Trajectory> = rewards
            .sequences
            .iter()
            .zip(&rewards.rewards)
            .map(|(seq, &r)| {
                let lp = model.policy.logprob(&prompt, seq).unwrap();
                traj(seq.clone(), lp, r, 0.0, lref)
            })
            .collect();
        let groups = vec![RolloutGroup::new(prompt, trajectories)];
        let mut tape = Tape::new();
        let mut bind = Binder::for_block(&model);
        let mut s = settings(RewardNormMode::Raw);
        s.beta = beta;
        let (loss, _) = flowrl_loss(&mut tape, &mut bind, &model, &groups, &s).unwrap();
        assert!(
            tape.value(loss).abs() < 1e-9,
            "loss at the exact target: {}",
            tape.value(loss)
        );
    }

    #[test]
    fn group_mode_residual_ignores_length_for_constant_per_token_logps() {
        // Per-token log-probability c = -1 at every state and per-token
        // reference d = -1.2: after length normalization the residual is
        // log_z + c - beta r_hat - d for every sequence length.
        let mut residuals = Vec::new();
        for len in [1usize, 2, 4] {
            let space = TokenSpace::fixed(2, len);
            let mut pol = TabularPolicy::zeros(space);
            for row in 0..space.prefix_count() {
                let (a, b) = (pol.logits.at(row, 0), pol.logits.at(row, 1));
                pol.logits.values[a] = -1.0;
                pol.logits.values[b] = (1.0 - (-1.0f64).exp()).ln();
            }
            let model = FlowModel {
                policy: Policy::Tabular(pol),
                partition: PartitionNet::constant(1, 4, 0.25),
            };
            let tokens = vec![0u16; len];
            let lp = model
                .policy
                .logprob(&Prompt::one_hot(0, 1), &tokens)
                .unwrap();
            let norms = crate::objectives::group_normalize(&[1.0, 0.0]).unwrap();
            let groups = vec![RolloutGroup::new(
                Prompt::one_hot(0, 1),
                vec![
                    traj(tokens.clone(), lp, 1.0, norms[0], -1.2 * len as f64),
                    traj(tokens.clone(), lp, 0.0, norms[1], -1.2 * len as f64),
                ],
            )];
            let mut tape = Tape::new();
            let mut bind = Binder::for_block(&model);
            let mut s = settings(RewardNormMode::Group);
            s.beta = 0.7;
            let (_, bd) = flowrl_loss(&mut tape, &mut bind, &model, &groups, &s).unwrap();
            residuals.push(bd.residuals.clone());
        }
        for other in &residuals[1..] {
            for (a, b) in residuals[0].iter().zip(other) {
                assert!(
                    (a - b).abs() < 1e-9,
                    "residuals differ across lengths: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn loss_is_the_mean_of_weighted_squared_residuals() {
        let (model, groups, s) = off_policy_fixture();
        let mut tape = Tape::new();
        let mut bind = Binder::for_block(&model);
        let (loss, bd) = flowrl_loss(&mut tape, &mut bind, &model, &groups, &s).unwrap();
        let recomputed: f64 = bd
            .residuals
            .iter()
            .zip(&bd.weights)
            .map(|(r, w)| w * r * r)
            .sum::<f64>()
            / bd.residuals.len() as f64;
        assert!((tape.value(loss) - recomputed).abs() < 1e-12);
        assert!(
            bd.weights.iter().any(|&w| w != 1.0),
            "fixture should be off-policy"
        );
    }

    #[test]
    fn trajectory_balance_arithmetic() {
        // log_z = 1, logp = -2, beta r = 0: residual -1, loss 1.
        let model = FlowModel {
            policy: single_token_policy(-2.0),
            partition: PartitionNet::constant(1, 4, 1.0),
        };
        let groups = vec![RolloutGroup::new(
            Prompt::one_hot(0, 1),
            vec![traj(vec![0], -2.0, 0.0, 0.0, 0.0)],
        )];
        let mut tape = Tape::new();
        let mut bind = Binder::for_block(&model);
        let (loss, _) =
            trajectory_balance_loss(&mut tape, &mut bind, &model, &groups, 1.0).unwrap();
        assert!((tape.value(loss) - 1.0).abs() < 1e-9);
    }

    /// Off-policy batch with importance ratios strictly inside the clip
    /// band, so the weights vary smoothly with the parameters.
    fn off_policy_fixture() -> (FlowModel, Vec<RolloutGroup>, FlowrlSettings) {
        let space = TokenSpace::fixed(3, 2);
        let mut init = rng::stream(77, &[0]);
        let policy = Policy::new_tabular_random(space, 0.5, &mut init);
        let prompt = Prompt::one_hot(0, 1);
        let mut sampler = rng::stream(77, &[1]);
        let mut trajectories = Vec::new();
        for i in 0..4 {
            let mut t = sample_trajectory(&policy, &prompt, &mut sampler);
            t.reward = 0.2 + 0.1 * i as f64;
            t.reward_norm = 0.0;
            t.logp_ref = -(2.0) * 3.0f64.ln();
            // pretend the snapshot was slightly different: ratio e^0.05
            t.logp_old = t.logp_current - 0.05;
            trajectories.push(t);
        }
        let model = FlowModel {
            policy,
            partition: PartitionNet::new(1, 4, &mut rng::stream(77, &[2])),
        };
        let groups = vec![RolloutGroup::new(prompt, trajectories)];
        let mut s = settings(RewardNormMode::Raw);
        s.beta = 1.5;
        (model, groups, s)
    }

    #[test]
    fn weights_are_gradient_opaque() {
        let (mut model, groups, s) = off_policy_fixture();
        let frozen = current_weights(&model, &groups, &s).unwrap();
        assert!(
            frozen.iter().all(|&w| w > 0.81 && w < 1.19),
            "fixture must keep ratios strictly inside the clip band: {frozen:?}"
        );

        let live_loss = {
            let groups = groups.clone();
            let s2 = s;
            move |tape: &mut Tape, bind: &mut Binder, m: &FlowModel| {
                Ok(flowrl_loss(tape, bind, m, &groups, &s2)?.0)
            }
        };
        let frozen_loss = {
            let groups = groups.clone();
            let s2 = s;
            let frozen = frozen.clone();
            move |tape: &mut Tape, bind: &mut Binder, m: &FlowModel| {
                Ok(flowrl_loss_weighted(tape, bind, m, &groups, &s2, Some(&frozen))?.0)
            }
        };

        // The tape gradient differentiates the frozen-weight function...
        let analytic = analytic_gradient(&mut model, &live_loss).unwrap();
        let report = finite_diff_compare(&mut model, &frozen_loss, &analytic, 1e-5).unwrap();
        assert!(report.pass, "frozen-weight FD: {}", report.max_rel_error);

        // ...and measurably not the live-weight function.
        let live_fd = fd_gradient(&mut model, &live_loss).unwrap();
        let mut max_gap = 0.0f64;
        for (a_slot, f_slot) in analytic.iter().zip(&live_fd) {
            for (&a, &f) in a_slot.iter().zip(f_slot) {
                max_gap = max_gap.max((a - f).abs() / a.abs().max(f.abs()).max(1e-4));
            }
        }
        assert!(
            max_gap > 1e-3,
            "live-weight FD should disagree, max rel gap {max_gap}"
        );
    }

    #[test]
    fn disabled_weights_are_exactly_one() {
        let (model, groups, mut s) = off_policy_fixture();
        s.use_importance_weights = false;
        let mut tape = Tape::new();
        let mut bind = Binder::for_block(&model);
        let (_, bd) = flowrl_loss(&mut tape, &mut bind, &model, &groups, &s).unwrap();
        assert_eq!(bd.mean_w, 1.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (model, _, s) = off_policy_fixture();
        let mut tape = Tape::new();
        let mut bind = Binder::for_block(&model);
        assert!(flowrl_loss(&mut tape, &mut bind, &model, &[], &s).is_err());
    }
}

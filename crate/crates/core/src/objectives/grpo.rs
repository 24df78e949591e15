//! Group-relative clipped surrogate.
//!
//! Token-level PPO-style objective with the per-sequence standardized
//! reward (`reward_norm`, filled per group by the collector) broadcast to
//! every token as the advantage, plus a reference-KL penalty estimated per
//! sequence by the nonnegative estimator `exp(d) - d - 1` with
//! `d = ln ref(y) - ln pi(y)`.

use super::{batch_size, LossBreakdown, RolloutGroup, LOG_RATIO_CLAMP};
use crate::error::{Error, Result};
use crate::grad::{Binder, Tape, Var};
use crate::policy::Policy;

/// `-mean_y mean_t min(ratio_t A, clip(ratio_t) A) + kl_coef * mean_y k3(y)`.
pub fn grpo_loss(
    tape: &mut Tape,
    bind: &mut Binder,
    policy: &Policy,
    groups: &[RolloutGroup],
    epsilon: f64,
    kl_coef: f64,
) -> Result<(Var, LossBreakdown)> {
    let n = batch_size(groups)? as f64;
    let mut per_traj = Vec::new();
    let mut bd = LossBreakdown::default();
    for group in groups {
        for t in &group.trajectories {
            let lp_tokens = policy.logprob_tokens_tape(tape, bind, &group.prompt, &t.tokens)?;
            if t.logp_old_tokens.len() != lp_tokens.len() {
                return Err(Error::Contract(format!(
                    "trajectory has {} tokens but {} stored old log-probabilities",
                    lp_tokens.len(),
                    t.logp_old_tokens.len()
                )));
            }
            let adv = t.reward_norm;
            let mut token_objs = Vec::with_capacity(lp_tokens.len());
            for (&lp_t, &lp_old_t) in lp_tokens.iter().zip(&t.logp_old_tokens) {
                let d = tape.add_const(lp_t, -lp_old_t);
                let d = tape.clamp(d, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
                let ratio = tape.exp(d);
                bd.mean_w += tape.value(ratio) / n / lp_tokens.len() as f64;
                let unclipped = tape.mul_const(ratio, adv);
                let clipped_ratio = tape.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
                let clipped = tape.mul_const(clipped_ratio, adv);
                token_objs.push(tape.min(unclipped, clipped));
            }
            let objective = tape.mean(&token_objs);
            let k3 = k3_penalty(tape, &lp_tokens, t.logp_ref);
            let neg_obj = tape.neg(objective);
            let penalty = tape.mul_const(k3, kl_coef);
            per_traj.push(tape.add(neg_obj, penalty));

            let len = t.tokens.len() as f64;
            let lp: f64 = lp_tokens.iter().map(|&v| tape.value(v)).sum();
            bd.mean_logp_norm += lp / len / n;
            bd.mean_ref_logp_norm += t.logp_ref / len / n;
        }
    }
    let loss = tape.mean(&per_traj);
    bd.loss = tape.value(loss);
    Ok((loss, bd))
}

/// Nonnegative sequence-level KL estimator `exp(d) - d - 1`,
/// `d = ln ref(y) - ln pi(y)`; zero exactly when the policy matches the
/// reference on `y`.
pub(crate) fn k3_penalty(tape: &mut Tape, lp_tokens: &[Var], logp_ref: f64) -> Var {
    let lp_seq = tape.sum(lp_tokens);
    let neg_lp = tape.neg(lp_seq);
    let d = tape.add_const(neg_lp, logp_ref);
    let e = tape.exp(d);
    let e_minus_d = tape.sub(e, d);
    tape.add_const(e_minus_d, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::check::finite_diff_check;
    use crate::grad::ParamBlock;
    use crate::policy::{sample_trajectory, Prompt, TabularPolicy, TokenSpace, Trajectory};
    use crate::rng;

    /// One-token trajectory whose stored old log-probabilities give the
    /// requested current/old ratio under `policy`.
    fn ratio_fixture(ratio: f64, reward_norm: f64) -> (Policy, Vec<RolloutGroup>) {
        let policy = Policy::new_tabular(TokenSpace::fixed(2, 1));
        let prompt = Prompt::one_hot(0, 1);
        let lp = policy.logprob(&prompt, &[0]).unwrap();
        let t = Trajectory {
            prompt_id: 0,
            tokens: vec![0],
            reward: 0.0,
            reward_norm,
            logp_current: lp,
            logp_old: lp - ratio.ln(),
            logp_old_tokens: vec![lp - ratio.ln()],
            logp_ref: lp,
        };
        (policy, vec![RolloutGroup::new(prompt, vec![t])])
    }

    #[test]
    fn positive_advantage_clips_high_ratios() {
        // A = +1, ratio 1.5, eps 0.2: surrogate min(1.5, 1.2) = 1.2
        let (policy, groups) = ratio_fixture(1.5, 1.0);
        let mut tape = Tape::new();
        let mut bind = Binder::for_block(&policy);
        let (loss, _) = grpo_loss(&mut tape, &mut bind, &policy, &groups, 0.2, 0.0).unwrap();
        assert!(
            (tape.value(loss) + 1.2).abs() < 1e-9,
            "loss {}",
            tape.value(loss)
        );
    }

    #[test]
    fn negative_advantage_clips_low_ratios() {
        // A = -1, ratio 0.5: surrogate min(-0.5, -0.8) = -0.8
        let (policy, groups) = ratio_fixture(0.5, -1.0);
        let mut tape = Tape::new();
        let mut bind = Binder::for_block(&policy);
        let (loss, _) = grpo_loss(&mut tape, &mut bind, &policy, &groups, 0.2, 0.0).unwrap();
        assert!((tape.value(loss) - 0.8).abs() < 1e-9);
    }

    #[test]
    fn kl_penalty_vanishes_on_policy() {
        // policy == reference and zero advantage: only the penalty term
        // remains and it must be exactly zero
        let policy = Policy::new_tabular(TokenSpace::fixed(2, 2));
        let prompt = Prompt::one_hot(0, 1);
        let lp = policy.logprob(&prompt, &[0, 1]).unwrap();
        let t = Trajectory {
            prompt_id: 0,
            tokens: vec![0, 1],
            reward: 0.0,
            reward_norm: 0.0,
            logp_current: lp,
            logp_old: lp,
            logp_old_tokens: policy.logprob_tokens(&prompt, &[0, 1]).unwrap(),
            logp_ref: lp,
        };
        let groups = vec![RolloutGroup::new(prompt, vec![t])];
        let mut tape = Tape::new();
        let mut bind = Binder::for_block(&policy);
        let (loss, _) = grpo_loss(&mut tape, &mut bind, &policy, &groups, 0.2, 7.0).unwrap();
        assert_eq!(tape.value(loss), 0.0);
    }

    #[test]
    fn positive_advantage_pushes_probability_toward_the_sampled_token() {
        // single-token vocabulary-2 policy, A = +1, on-policy: a gradient
        // step along -grad must increase the sampled token's probability
        let mut policy = Policy::new_tabular(TokenSpace::fixed(2, 1));
        let prompt = Prompt::one_hot(0, 1);
        let lp = policy.logprob(&prompt, &[0]).unwrap();
        let t = Trajectory {
            prompt_id: 0,
            tokens: vec![0],
            reward: 1.0,
            reward_norm: 1.0,
            logp_current: lp,
            logp_old: lp,
            logp_old_tokens: vec![lp],
            logp_ref: lp,
        };
        let groups = vec![RolloutGroup::new(prompt.clone(), vec![t])];
        let mut tape = Tape::new();
        let mut bind = Binder::for_block(&policy);
        let (loss, _) = grpo_loss(&mut tape, &mut bind, &policy, &groups, 0.2, 0.0).unwrap();
        tape.backward(loss).unwrap();
        policy.zero_grad();
        bind.accumulate(&tape, &mut policy);
        let before = policy.logprob(&prompt, &[0]).unwrap();
        let grads: Vec<f64> = policy.params()[0].grad.clone();
        for (v, g) in policy.params_mut()[0].values.iter_mut().zip(&grads) {
            *v -= 0.1 * g;
        }
        let after = policy.logprob(&prompt, &[0]).unwrap();
        assert!(after > before, "p(token 0): {before} -> {after}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let space = TokenSpace::fixed(3, 3);
        let mut init = rng::stream(81, &[0]);
        let mut policy = Policy::new_tabular_random(space, 0.6, &mut init);
        let prompt = Prompt::one_hot(0, 1);
        let mut sampler = rng::stream(81, &[1]);
        let snapshot = policy.snapshot();
        let mut trajectories = Vec::new();
        for i in 0..5 {
            let mut t = sample_trajectory(&snapshot, &prompt, &mut sampler);
            t.reward_norm = [-1.2, 0.3, 0.9, -0.4, 1.1][i];
            t.logp_ref = -(3.0) * 3.0f64.ln();
            trajectories.push(t);
        }
        // make the batch off-policy so the ratios are not identically 1
        if let Policy::Tabular(TabularPolicy { logits, .. }) = &mut policy {
            let mut jitter = rng::stream(81, &[2]);
            for v in &mut logits.values {
                use rand::Rng;
                *v += jitter.gen_range(-0.02..0.02);
            }
        }
        let groups = vec![RolloutGroup::new(prompt, trajectories)];
        let loss = move |tape: &mut Tape, bind: &mut Binder, p: &Policy| {
            Ok(grpo_loss(tape, bind, p, &groups, 0.2, 0.5)?.0)
        };
        let report = finite_diff_check(&mut policy, &loss, 1e-5).unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }
}

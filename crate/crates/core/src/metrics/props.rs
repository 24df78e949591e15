//! Structural self-checks computed by exact enumeration.
//!
//! Two relationships are verified numerically rather than assumed:
//!
//! 1. With the log-partition estimate held fixed, the expected gradient of
//!    the squared trajectory-balance residual equals exactly twice the
//!    gradient of the reverse KL to the reward-tilted target. We build the
//!    left side analytically (tape gradients, summed over the whole
//!    support) and the right side by central finite differences of the
//!    enumerated KL objective, then compare. A `factor` other than 2 serves
//!    as a negative control: the check must fail with it.
//!
//! 2. For any log-partition value `c`, the divergence between the policy
//!    and the unnormalized tilted reference decomposes as
//!    `-E[beta r - c + ln ref] - H(policy)`. Both sides are accumulated in
//!    different orders so agreement is a numerical statement, not an
//!    algebraic tautology of the code.

use crate::envs::RewardTable;
use crate::error::{Error, Result};
use crate::grad::check::FD_STEP;
use crate::grad::{Binder, ParamBlock, Tape};
use crate::policy::{enumerate_support, Policy, Prompt, ReferencePolicy, DEFAULT_ENUMERATION_CAP};

/// Floor for the relative-discrepancy denominator, so an exactly-zero
/// gradient pair does not divide by zero. At a true fixed point both
/// gradient norms vanish; judge that case by the norms in the report, not
/// by the relative discrepancy.
const NORM_FLOOR: f64 = 1e-12;

/// Outcome of the gradient-equivalence check.
#[derive(Debug, Clone)]
pub struct Prop1Report {
    pub num_sequences: usize,
    /// L2 norm of the enumerated trajectory-balance gradient.
    pub tb_grad_norm: f64,
    /// L2 norm of the finite-difference KL gradient.
    pub kl_grad_norm: f64,
    /// `|g_tb - factor * g_kl| / max(|g_tb|, floor)`.
    pub rel_discrepancy: f64,
    pub factor: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Outcome of the divergence-decomposition check.
#[derive(Debug, Clone)]
pub struct Prop2Report {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Gradient-equivalence check with the canonical factor of two.
pub fn prop1_check(
    policy: &mut Policy,
    prompt: &Prompt,
    rewards: &RewardTable,
    beta: f64,
    log_z: f64,
    tolerance: f64,
) -> Result<Prop1Report> {
    prop1_discrepancy(policy, prompt, rewards, beta, log_z, 2.0, tolerance)
}

/// Compare the enumerated trajectory-balance gradient against `factor`
/// times the finite-difference KL gradient. `rewards` must cover the
/// policy's entire support in canonical order.
pub fn prop1_discrepancy(
    policy: &mut Policy,
    prompt: &Prompt,
    rewards: &RewardTable,
    beta: f64,
    log_z: f64,
    factor: f64,
    tolerance: f64,
) -> Result<Prop1Report> {
    check_alignment(policy, prompt, rewards)?;
    let n_params = policy.num_values();

    // Left side: sum_y pi(y) * 2 * (log_z + ln pi(y) - beta r(y)) * grad ln pi(y),
    // each per-sequence gradient taken off the tape.
    let mut g_tb = vec![0.0; n_params];
    for (seq, &r) in rewards.sequences.iter().zip(&rewards.rewards) {
        policy.zero_grad();
        let mut tape = Tape::new();
        let mut bind = Binder::for_block(policy);
        let out = policy.logprob_tape(&mut tape, &mut bind, prompt, seq)?;
        let logp = tape.value(out);
        tape.backward(out)?;
        bind.accumulate(&tape, policy);
        let coef = logp.exp() * 2.0 * (log_z + logp - beta * r);
        let mut off = 0;
        for p in policy.params() {
            for (acc, &g) in g_tb[off..off + p.len()].iter_mut().zip(&p.grad) {
                *acc += coef * g;
            }
            off += p.len();
        }
    }

    // Right side: central differences of the enumerated objective
    // D(theta) = sum_y pi(y) (ln pi(y) + log_z - beta r(y)).
    let mut g_kl = Vec::with_capacity(n_params);
    let slots = policy.params().len();
    for slot in 0..slots {
        let len = policy.params()[slot].len();
        for idx in 0..len {
            let orig = policy.params()[slot].values[idx];
            policy.params_mut()[slot].values[idx] = orig + FD_STEP;
            let plus = tilted_divergence(policy, prompt, rewards, beta, log_z)?;
            policy.params_mut()[slot].values[idx] = orig - FD_STEP;
            let minus = tilted_divergence(policy, prompt, rewards, beta, log_z)?;
            policy.params_mut()[slot].values[idx] = orig;
            g_kl.push((plus - minus) / (2.0 * FD_STEP));
        }
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = g_tb
        .iter()
        .zip(&g_kl)
        .map(|(a, b)| a - factor * b)
        .collect();
    let tb_grad_norm = norm(&g_tb);
    let kl_grad_norm = norm(&g_kl);
    let rel_discrepancy = norm(&diff) / tb_grad_norm.max(NORM_FLOOR);
    Ok(Prop1Report {
        num_sequences: rewards.len(),
        tb_grad_norm,
        kl_grad_norm,
        rel_discrepancy,
        factor,
        tolerance,
        pass: rel_discrepancy < tolerance,
    })
}

/// `D(theta) = sum_y pi(y) (ln pi(y) + log_z - beta r(y))`: the reverse KL
/// to the tilted target, shifted by a theta-independent constant when
/// `log_z` is not the true log-partition.
fn tilted_divergence(
    policy: &Policy,
    prompt: &Prompt,
    rewards: &RewardTable,
    beta: f64,
    log_z: f64,
) -> Result<f64> {
    let support = enumerate_support(policy, prompt, DEFAULT_ENUMERATION_CAP)?;
    Ok(support
        .iter()
        .zip(&rewards.rewards)
        .map(|((_, lp), &r)| lp.exp() * (lp + log_z - beta * r))
        .sum())
}

/// Divergence-decomposition check: for any `log_z`,
/// `sum pi (ln pi - beta r - ln ref + log_z)` must equal
/// `-E_pi[beta r - log_z + ln ref] - H(pi)` to within `tolerance`.
pub fn prop2_check(
    policy: &Policy,
    reference: &ReferencePolicy,
    prompt: &Prompt,
    rewards: &RewardTable,
    beta: f64,
    log_z: f64,
    tolerance: f64,
) -> Result<Prop2Report> {
    check_alignment(policy, prompt, rewards)?;
    let space = *policy.space();
    let support = enumerate_support(policy, prompt, DEFAULT_ENUMERATION_CAP)?;
    let mut ref_logps = Vec::with_capacity(support.len());
    for (seq, _) in &support {
        ref_logps.push(reference.logprob(&space, prompt, seq)?);
    }

    // Left side in one pass.
    let lhs: f64 = support
        .iter()
        .zip(&rewards.rewards)
        .zip(&ref_logps)
        .map(|(((_, lp), &r), &lref)| lp.exp() * (lp - beta * r - lref + log_z))
        .sum();

    // Right side from two independent accumulations.
    let expectation: f64 = support
        .iter()
        .zip(&rewards.rewards)
        .zip(&ref_logps)
        .map(|(((_, lp), &r), &lref)| lp.exp() * (beta * r - log_z + lref))
        .sum();
    let entropy: f64 = -support.iter().map(|(_, lp)| lp.exp() * lp).sum::<f64>();
    let rhs = -expectation - entropy;

    let abs_diff = (lhs - rhs).abs();
    Ok(Prop2Report {
        lhs,
        rhs,
        abs_diff,
        tolerance,
        pass: abs_diff < tolerance,
    })
}

/// The reward table must list the policy's entire support in canonical
/// enumeration order.
fn check_alignment(policy: &Policy, prompt: &Prompt, rewards: &RewardTable) -> Result<()> {
    let n = policy.space().num_sequences();
    if rewards.len() as u128 != n {
        return Err(Error::Contract(format!(
            "reward table has {} rows, support has {n}",
            rewards.len()
        )));
    }
    // Spot-check ordering against a fresh enumeration of the space.
    let seqs = crate::policy::enumerate_sequences(policy.space(), DEFAULT_ENUMERATION_CAP)?;
    if seqs != rewards.sequences {
        return Err(Error::Contract(
            "reward table is not in canonical sequence order".into(),
        ));
    }
    let _ = prompt;
    Ok(())
}

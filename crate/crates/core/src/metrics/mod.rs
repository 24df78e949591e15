//! Exact evaluation on enumerable supports.
//!
//! Everything here is computed by enumeration: the reward-tilted target
//! distribution `p*(y) = ref(y) exp(beta r(y)) / Z` with its true
//! log-partition, KL divergence and entropy with the `0 ln 0 = 0`
//! convention, and per-mode coverage (policy mass inside each declared
//! Hamming ball). Two self-checks live in [`props`]: the factor-two
//! relationship between the enumerated trajectory-balance gradient and the
//! exact KL gradient, and the KL/entropy decomposition identity.

pub mod props;

pub use props::{prop1_check, prop1_discrepancy, prop2_check, Prop1Report, Prop2Report};

use crate::envs::{padded_hamming, Mode, RewardTable};
use crate::error::{Error, Result};
use crate::policy::{
    enumerate_support, sample_trajectory, Policy, Prompt, ReferencePolicy, TokenSpace,
};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// A probability distribution over an explicit list of sequences.
#[derive(Debug, Clone)]
pub struct DistributionTable {
    pub sequences: Vec<Vec<u16>>,
    pub probs: Vec<f64>,
    index: HashMap<Vec<u16>, usize>,
}

impl DistributionTable {
    /// Build and validate: probabilities must be non-negative, finite, and
    /// sum to one within 1e-9.
    pub fn new(sequences: Vec<Vec<u16>>, probs: Vec<f64>) -> Result<Self> {
        if sequences.len() != probs.len() {
            return Err(Error::Contract(format!(
                "{} sequences vs {} probabilities",
                sequences.len(),
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Numeric(format!("invalid probability {bad}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        let index = sequences
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(Self {
            sequences,
            probs,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn prob(&self, tokens: &[u16]) -> Option<f64> {
        self.index.get(tokens).map(|&i| self.probs[i])
    }

    /// Exact policy distribution by support enumeration.
    pub fn from_policy(policy: &Policy, prompt: &Prompt, cap: usize) -> Result<Self> {
        let support = enumerate_support(policy, prompt, cap)?;
        let (sequences, probs) = support.into_iter().map(|(s, lp)| (s, lp.exp())).unzip();
        Self::new(sequences, probs)
    }

    /// Empirical policy distribution from `n` samples, sequences sorted
    /// lexicographically for determinism.
    pub fn from_samples(policy: &Policy, prompt: &Prompt, n: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(n > 0, "need at least one sample");
        let mut counts: HashMap<Vec<u16>, usize> = HashMap::new();
        for _ in 0..n {
            let t = sample_trajectory(policy, prompt, rng);
            *counts.entry(t.tokens).or_insert(0) += 1;
        }
        let mut entries: Vec<(Vec<u16>, usize)> = counts.into_iter().collect();
        entries.sort();
        let sequences: Vec<Vec<u16>> = entries.iter().map(|(s, _)| s.clone()).collect();
        let probs: Vec<f64> = entries.iter().map(|(_, c)| *c as f64 / n as f64).collect();
        let index = sequences
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self {
            sequences,
            probs,
            index,
        }
    }
}

/// The reward-tilted target and its exact normalizer.
#[derive(Debug, Clone)]
pub struct TargetDistribution {
    pub table: DistributionTable,
    /// `ln sum_y ref(y) exp(beta r(y))` - what the partition net estimates.
    pub log_partition: f64,
}

/// Exact target `p*(y) = ref(y) exp(beta r(y)) / Z` over an enumerated
/// reward table, computed in log space.
pub fn target_distribution(
    rewards: &RewardTable,
    space: &TokenSpace,
    prompt: &Prompt,
    beta: f64,
    reference: &ReferencePolicy,
) -> Result<TargetDistribution> {
    let mut log_weights = Vec::with_capacity(rewards.len());
    for (seq, &r) in rewards.sequences.iter().zip(&rewards.rewards) {
        let lref = reference.logprob(space, prompt, seq)?;
        log_weights.push(lref + beta * r);
    }
    let m = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = log_weights.iter().map(|lw| (lw - m).exp()).sum();
    let log_partition = m + total.ln();
    let probs: Vec<f64> = log_weights
        .iter()
        .map(|lw| (lw - log_partition).exp())
        .collect();
    Ok(TargetDistribution {
        table: DistributionTable::new(rewards.sequences.clone(), probs)?,
        log_partition,
    })
}

/// `KL(p || q) = sum p ln(p/q)` with `0 ln 0 = 0`. Errors when `p` puts mass
/// where `q` has none (support violation), or where `q` is undefined.
pub fn kl_divergence(p: &DistributionTable, q: &DistributionTable) -> Result<f64> {
    let mut total = 0.0;
    for (seq, &pi) in p.sequences.iter().zip(&p.probs) {
        if pi == 0.0 {
            continue;
        }
        match q.prob(seq) {
            Some(qi) if qi > 0.0 => total += pi * (pi / qi).ln(),
            _ => {
                return Err(Error::Domain(format!(
                    "support violation: p({seq:?}) = {pi} but q is zero there"
                )))
            }
        }
    }
    Ok(total)
}

/// Shannon entropy `-sum p ln p` in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &DistributionTable) -> f64 {
    -p.probs
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Per-mode mass and the count of modes whose Hamming ball holds at least
/// `mass_threshold` of the distribution.
#[derive(Debug, Clone)]
pub struct CoverageReport {
    pub per_mode_mass: Vec<f64>,
    pub covered: usize,
    pub mass_threshold: f64,
}

/// Default coverage threshold: `1 / (4 K)` for `K` declared modes.
pub fn default_coverage_threshold(num_modes: usize) -> f64 {
    1.0 / (4.0 * num_modes as f64)
}

/// Mass of `dist` within each mode's Hamming ball (padded fixed-length
/// views), and how many balls meet the threshold.
pub fn mode_coverage(
    dist: &DistributionTable,
    modes: &[Mode],
    max_len: usize,
    mass_threshold: f64,
) -> CoverageReport {
    let per_mode_mass: Vec<f64> = modes
        .iter()
        .map(|mode| {
            dist.sequences
                .iter()
                .zip(&dist.probs)
                .filter(|(seq, _)| padded_hamming(seq, &mode.tokens, max_len) <= mode.radius)
                .map(|(_, &p)| p)
                .sum()
        })
        .collect();
    let covered = per_mode_mass
        .iter()
        .filter(|&&m| m >= mass_threshold)
        .count();
    CoverageReport {
        per_mode_mass,
        covered,
        mass_threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::ModalConfig;
    use crate::rng;
    use rand::Rng;

    fn table(probs: &[f64]) -> DistributionTable {
        let seqs: Vec<Vec<u16>> = (0..probs.len()).map(|i| vec![i as u16, 0]).collect();
        DistributionTable::new(seqs, probs.to_vec()).unwrap()
    }

    #[test]
    fn construction_validates_normalization() {
        assert!(DistributionTable::new(vec![vec![0], vec![1]], vec![0.6, 0.6]).is_err());
        assert!(DistributionTable::new(vec![vec![0], vec![1]], vec![0.5, -0.5]).is_err());
        assert!(DistributionTable::new(vec![vec![0]], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn equal_rewards_give_the_reference_back() {
        let env = ModalConfig {
            vocab_size: 3,
            length: 2,
            variable_length: false,
            num_modes: 1,
            peaks: vec![1.0],
            tau: vec![1.0],
            floor: 0.01,
            radius: 0,
            num_prompts: 1,
            seed: 3,
        }
        .build()
        .unwrap();
        let rewards = env.enumerate_rewards(0, 1 << 20).unwrap();
        // constant rewards: overwrite with 0.4 everywhere
        let flat = RewardTable::new(0, rewards.sequences.clone(), vec![0.4; rewards.len()]);
        let target = target_distribution(
            &flat,
            &env.space,
            &env.prompts[0],
            2.5,
            &ReferencePolicy::Uniform,
        )
        .unwrap();
        for &p in &target.table.probs {
            assert!((p - 1.0 / 9.0).abs() < 1e-12);
        }
        // log Z = beta * r + ln sum ref = 2.5 * 0.4 + ln(1) = 1.0
        assert!((target.log_partition - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_sequence_tilt_matches_hand_computation() {
        // beta r = [ln 2, 0] under a uniform reference -> [2/3, 1/3].
        let rewards = RewardTable::new(0, vec![vec![0], vec![1]], vec![2.0f64.ln(), 0.0]);
        let space = TokenSpace::fixed(2, 1);
        let prompt = Prompt::one_hot(0, 1);
        let target =
            target_distribution(&rewards, &space, &prompt, 1.0, &ReferencePolicy::Uniform).unwrap();
        assert!((target.table.probs[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((target.table.probs[1] - 1.0 / 3.0).abs() < 1e-12);
        // Z = (2 + 1)/2
        assert!((target.log_partition - 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_beta_returns_the_reference() {
        let rewards = RewardTable::new(0, vec![vec![0], vec![1]], vec![0.9, 0.1]);
        let space = TokenSpace::fixed(2, 1);
        let prompt = Prompt::one_hot(0, 1);
        let target =
            target_distribution(&rewards, &space, &prompt, 0.0, &ReferencePolicy::Uniform).unwrap();
        assert_eq!(target.table.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn kl_hand_case_and_zero_case() {
        let p = table(&[0.5, 0.5]);
        let q = table(&[0.25, 0.75]);
        let kl = kl_divergence(&p, &q).unwrap();
        assert!((kl - 0.14384103622589045).abs() < 1e-12);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_support_violation_is_an_error() {
        let p = table(&[0.5, 0.5]);
        let q = table(&[1.0, 0.0]);
        assert!(matches!(kl_divergence(&p, &q), Err(Error::Domain(_))));
        // but q can shrink p's support when p is zero there
        let p0 = table(&[1.0, 0.0]);
        assert!(kl_divergence(&p0, &q).is_ok());
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut stream = rng::stream(17, &[0]);
        for _ in 0..1000 {
            let draw = |r: &mut ChaCha8Rng| {
                let mut v: Vec<f64> = (0..6).map(|_| r.gen_range(1e-4..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                // renormalize exactly enough for the constructor
                v
            };
            let p = table(&draw(&mut stream));
            let q = table(&draw(&mut stream));
            let kl = kl_divergence(&p, &q).unwrap();
            assert!(kl >= -1e-12, "kl {kl}");
        }
    }

    #[test]
    fn entropy_known_values() {
        assert!((entropy(&table(&[0.25; 4])) - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&table(&[1.0, 0.0, 0.0])), 0.0);
        // uniform over a product space: L * ln V
        let policy = Policy::new_tabular(TokenSpace::fixed(3, 4));
        let prompt = Prompt::one_hot(0, 1);
        let dist = DistributionTable::from_policy(&policy, &prompt, 1 << 20).unwrap();
        assert!((entropy(&dist) - 4.0 * 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn coverage_counts_balls_over_threshold() {
        let env = ModalConfig {
            vocab_size: 4,
            length: 4,
            variable_length: false,
            num_modes: 2,
            peaks: vec![1.0],
            tau: vec![1.0],
            floor: 0.01,
            radius: 1,
            num_prompts: 1,
            seed: 5,
        }
        .build()
        .unwrap();
        let prompt = &env.prompts[0];
        // point mass on the first mode
        let mut pol = crate::policy::TabularPolicy::zeros(env.space);
        let m0 = env.modes[0][0].tokens.clone();
        for (i, &t) in m0.iter().enumerate() {
            let row = env.space.prefix_index(&m0[..i]).unwrap();
            let at = pol.logits.at(row, t as usize);
            pol.logits.values[at] = 80.0;
        }
        let dist = DistributionTable::from_policy(&Policy::Tabular(pol), prompt, 1 << 20).unwrap();
        let report = mode_coverage(&dist, &env.modes[0], 4, default_coverage_threshold(2));
        assert_eq!(report.covered, 1);
        assert!(report.per_mode_mass[0] > 0.999);
        assert!(report.per_mode_mass[1] < 1e-6);

        // uniform policy: each radius-1 ball holds 13/256
        let uniform = Policy::new_tabular(env.space);
        let dist = DistributionTable::from_policy(&uniform, prompt, 1 << 20).unwrap();
        let report = mode_coverage(&dist, &env.modes[0], 4, 1e-9);
        for &mass in &report.per_mode_mass {
            assert!((mass - 13.0 / 256.0).abs() < 1e-12);
        }
        assert_eq!(report.covered, 2);
    }

    #[test]
    fn empirical_distribution_is_deterministic_and_normalized() {
        let space = TokenSpace::fixed(3, 2);
        let mut init = rng::stream(23, &[0]);
        let policy = Policy::new_tabular_random(space, 1.0, &mut init);
        let prompt = Prompt::one_hot(0, 1);
        let a = DistributionTable::from_samples(&policy, &prompt, 5000, &mut rng::stream(1, &[7]));
        let b = DistributionTable::from_samples(&policy, &prompt, 5000, &mut rng::stream(1, &[7]));
        assert_eq!(a.sequences, b.sequences);
        assert_eq!(a.probs, b.probs);
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

//! Enumerable generation environments with deterministic rewards.
//!
//! Every environment owns a token space, a prompt list, a declared mode list
//! per prompt (for coverage metrics), and a pure reward function over
//! complete sequences. Rewards are deterministic, finite, and bounded away
//! from zero by a floor, so `exp(beta * r)` targets are always well defined.
//!
//! Families:
//! * `modal_seq` - rewards decay exponentially with Hamming distance from a
//!   set of well-separated mode sequences.
//! * `conditional` - the same kernel with several prompts, each carrying its
//!   own disjoint mode set.
//! * `hypergrid` - increment/stop tokens walk a `dims`-dimensional grid;
//!   reward is banded and peaks near the corners.

mod hypergrid;
mod modal;

pub use hypergrid::HypergridConfig;
pub use modal::ModalConfig;

use crate::error::{Error, Result};
use crate::policy::{enumerate_sequences, Prompt, TokenSpace};
use std::collections::HashMap;

/// A declared high-reward sequence and the Hamming ball it owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mode {
    pub tokens: Vec<u16>,
    pub radius: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum EnvKind {
    /// Per-prompt kernel parameters, aligned with `Environment::modes`.
    Modal {
        peaks: Vec<Vec<f64>>,
        taus: Vec<Vec<f64>>,
        floor: f64,
    },
    Hypergrid {
        dims: usize,
        side: usize,
        r0: f64,
        r1: f64,
        r2: f64,
    },
}

/// A fully constructed environment; see the module docs.
#[derive(Debug, Clone)]
pub struct Environment {
    pub family: String,
    pub space: TokenSpace,
    pub prompts: Vec<Prompt>,
    /// Declared modes, one list per prompt.
    pub modes: Vec<Vec<Mode>>,
    kind: EnvKind,
}

/// Hamming distance on padded fixed-length views: both sequences are padded
/// to `max_len` with a sentinel, then positions are compared.
pub fn padded_hamming(a: &[u16], b: &[u16], max_len: usize) -> usize {
    const PAD: u16 = u16::MAX;
    (0..max_len)
        .filter(|&i| {
            let x = a.get(i).copied().unwrap_or(PAD);
            let y = b.get(i).copied().unwrap_or(PAD);
            x != y
        })
        .count()
}

impl Environment {
    /// Deterministic reward of a complete sequence under `prompt_id`.
    pub fn reward(&self, prompt_id: usize, tokens: &[u16]) -> Result<f64> {
        self.space.validate_complete(tokens)?;
        if prompt_id >= self.prompts.len() {
            return Err(Error::Domain(format!(
                "prompt {prompt_id} out of range ({} prompts)",
                self.prompts.len()
            )));
        }
        match &self.kind {
            EnvKind::Modal { peaks, taus, floor } => {
                let mut best = f64::NEG_INFINITY;
                for (k, mode) in self.modes[prompt_id].iter().enumerate() {
                    let d = padded_hamming(tokens, &mode.tokens, self.space.max_len) as f64;
                    let r = peaks[prompt_id][k] * (-d / taus[prompt_id][k]).exp();
                    best = best.max(r);
                }
                Ok(best.max(*floor))
            }
            EnvKind::Hypergrid {
                dims,
                side,
                r0,
                r1,
                r2,
            } => Ok(hypergrid::reward(tokens, *dims, *side, *r0, *r1, *r2)),
        }
    }

    /// Reward table over the full support, in canonical enumeration order.
    pub fn enumerate_rewards(&self, prompt_id: usize, cap: usize) -> Result<RewardTable> {
        let sequences = enumerate_sequences(&self.space, cap)?;
        let rewards = sequences
            .iter()
            .map(|s| self.reward(prompt_id, s))
            .collect::<Result<Vec<f64>>>()?;
        Ok(RewardTable::new(prompt_id, sequences, rewards))
    }
}

/// Exact reward lookup over an enumerated support.
#[derive(Debug, Clone)]
pub struct RewardTable {
    pub prompt_id: usize,
    pub sequences: Vec<Vec<u16>>,
    pub rewards: Vec<f64>,
    index: HashMap<Vec<u16>, usize>,
}

impl RewardTable {
    pub fn new(prompt_id: usize, sequences: Vec<Vec<u16>>, rewards: Vec<f64>) -> Self {
        let index = sequences
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self {
            prompt_id,
            sequences,
            rewards,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn lookup(&self, tokens: &[u16]) -> Option<f64> {
        self.index.get(tokens).map(|&i| self.rewards[i])
    }

    /// CSV rendering: `sequence,reward`, tokens joined with `-`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,reward\n");
        for (seq, r) in self.sequences.iter().zip(&self.rewards) {
            out.push_str(&format_sequence(seq));
            out.push(',');
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }
}

/// Canonical text form of a token sequence: ids joined with `-`.
pub fn format_sequence(tokens: &[u16]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_modal() -> Environment {
        ModalConfig {
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
        .unwrap()
    }

    #[test]
    fn reward_at_mode_equals_peak() {
        let env = small_modal();
        for mode in &env.modes[0] {
            let r = env.reward(0, &mode.tokens).unwrap();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reward_decays_with_hamming_distance() {
        let env = small_modal();
        let mode = env.modes[0][0].tokens.clone();
        // flip two positions to tokens that differ from BOTH modes' entries
        let other = &env.modes[0][1].tokens;
        let mut seq = mode.clone();
        let mut flipped = 0;
        for i in 0..seq.len() {
            if flipped == 2 {
                break;
            }
            for cand in 0..4u16 {
                if cand != mode[i] && cand != other[i] {
                    seq[i] = cand;
                    flipped += 1;
                    break;
                }
            }
        }
        assert_eq!(flipped, 2);
        let d_other = padded_hamming(&seq, other, 4);
        // distance 2 from its mode, further from the other (separation > 2)
        assert!(d_other > 2);
        let r = env.reward(0, &seq).unwrap();
        let want: f64 = (-2.0f64).exp().max((-(d_other as f64)).exp());
        assert!((r - want).abs() < 1e-12, "r {r} want {want}");
        assert!((0.1353352832366127 - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn far_sequences_hit_the_floor() {
        // One mode, tiny tau: everything off-mode decays below the floor.
        let env = ModalConfig {
            vocab_size: 4,
            length: 4,
            variable_length: false,
            num_modes: 1,
            peaks: vec![1.0],
            tau: vec![0.2],
            floor: 0.01,
            radius: 1,
            num_prompts: 1,
            seed: 2,
        }
        .build()
        .unwrap();
        let mode = env.modes[0][0].tokens.clone();
        let mut far: Vec<u16> = mode.iter().map(|&t| (t + 1) % 4).collect();
        assert_eq!(padded_hamming(&far, &mode, 4), 4);
        let r = env.reward(0, &far).unwrap();
        assert_eq!(r, 0.01, "distance 4 at tau 0.2 decays below the floor");
        far[0] = mode[0];
        assert_eq!(env.reward(0, &far).unwrap(), 0.01);
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let build = || small_modal();
        let (a, b) = (build(), build());
        assert_eq!(a.modes[0], b.modes[0]);
        let seq = [0u16, 1, 2, 3];
        assert_eq!(a.reward(0, &seq).unwrap(), b.reward(0, &seq).unwrap());
    }

    #[test]
    fn reward_table_matches_pointwise_rewards() {
        let env = small_modal();
        let table = env.enumerate_rewards(0, 1 << 20).unwrap();
        assert_eq!(table.len(), 256);
        let mut probe = rng::stream(9, &[0]);
        for _ in 0..100 {
            let seq: Vec<u16> = (0..4).map(|_| probe.gen_range(0..4u16)).collect();
            assert_eq!(table.lookup(&seq).unwrap(), env.reward(0, &seq).unwrap());
        }
        assert!(table.rewards.iter().all(|&r| (0.01..=1.0).contains(&r)));
    }

    #[test]
    fn reward_table_csv_has_header_and_all_rows() {
        let env = ModalConfig {
            vocab_size: 2,
            length: 3,
            variable_length: false,
            num_modes: 1,
            peaks: vec![1.0],
            tau: vec![1.0],
            floor: 0.01,
            radius: 0,
            num_prompts: 1,
            seed: 0,
        }
        .build()
        .unwrap();
        let csv = env.enumerate_rewards(0, 64).unwrap().to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 9);
        assert_eq!(lines[0], "sequence,reward");
        assert!(lines[1].starts_with("0-0-0,"));
    }

    #[test]
    fn conditional_prompts_have_disjoint_modes() {
        let env = ModalConfig {
            vocab_size: 4,
            length: 4,
            variable_length: false,
            num_modes: 2,
            peaks: vec![1.0],
            tau: vec![1.0],
            floor: 0.01,
            radius: 1,
            num_prompts: 4,
            seed: 11,
        }
        .build()
        .unwrap();
        assert_eq!(env.prompts.len(), 4);
        assert_eq!(env.modes.len(), 4);
        let mut all: Vec<&Vec<u16>> = Vec::new();
        for prompt_modes in &env.modes {
            for m in prompt_modes {
                assert!(!all.contains(&&m.tokens), "mode shared across prompts");
                all.push(&m.tokens);
            }
        }
        // prompt embeddings are one-hot over prompt ids
        for (i, p) in env.prompts.iter().enumerate() {
            assert_eq!(p.embedding.len(), 4);
            assert_eq!(p.embedding[i], 1.0);
        }
    }

    #[test]
    fn impossible_separation_is_a_config_error() {
        // 2-sequence space cannot hold 3 separated modes.
        let err = ModalConfig {
            vocab_size: 2,
            length: 1,
            variable_length: false,
            num_modes: 3,
            peaks: vec![1.0],
            tau: vec![1.0],
            floor: 0.01,
            radius: 0,
            num_prompts: 1,
            seed: 0,
        }
        .build()
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn modes_are_pairwise_separated(seed in 0u64..500) {
            let env = ModalConfig {
                vocab_size: 5,
                length: 5,
                variable_length: seed % 2 == 0,
                num_modes: 3,
                peaks: vec![1.0],
                tau: vec![1.0],
                floor: 0.01,
                radius: 1,
                num_prompts: 1,
                seed,
            }
            .build()
            .unwrap();
            let modes = &env.modes[0];
            for i in 0..modes.len() {
                for j in (i + 1)..modes.len() {
                    let d = padded_hamming(&modes[i].tokens, &modes[j].tokens, 5);
                    prop_assert!(d > modes[i].radius + modes[j].radius);
                }
            }
        }

        #[test]
        fn rewards_are_positive_and_bounded(seed in 0u64..200) {
            let env = ModalConfig {
                vocab_size: 3,
                length: 4,
                variable_length: false,
                num_modes: 2,
                peaks: vec![0.9, 0.6],
                tau: vec![1.3, 0.7],
                floor: 0.05,
                radius: 1,
                num_prompts: 1,
                seed,
            }
            .build()
            .unwrap();
            let table = env.enumerate_rewards(0, 1 << 20).unwrap();
            for &r in &table.rewards {
                prop_assert!((0.05..=0.9).contains(&r) && r.is_finite());
            }
        }
    }
}

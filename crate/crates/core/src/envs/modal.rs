//! Mode-kernel environments (`modal_seq` and `conditional`).
//!
//! Reward: `max(floor, max_k peak_k * exp(-hamming(y, m_k) / tau_k))` where
//! the distance is taken on padded fixed-length views. Mode sequences are
//! drawn uniformly from the space and the whole set is redrawn from a fresh
//! substream until all pairs satisfy `distance > radius_i + radius_j`, so
//! declared Hamming balls never overlap. With several prompts, each prompt
//! gets its own mode set and sets are disjoint across prompts.

use super::{padded_hamming, EnvKind, Environment, Mode};
use crate::error::{Error, Result};
use crate::policy::{Prompt, TokenSpace};
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Parameters for the modal families. `peaks` and `tau` hold either one
/// shared value or one value per mode.
#[derive(Debug, Clone)]
pub struct ModalConfig {
    pub vocab_size: usize,
    pub length: usize,
    pub variable_length: bool,
    pub num_modes: usize,
    pub peaks: Vec<f64>,
    pub tau: Vec<f64>,
    pub floor: f64,
    pub radius: usize,
    pub num_prompts: usize,
    pub seed: u64,
}

const MAX_PLACEMENT_ATTEMPTS: u64 = 1000;

impl ModalConfig {
    fn per_mode(&self, values: &[f64], what: &str) -> Result<Vec<f64>> {
        match values.len() {
            1 => Ok(vec![values[0]; self.num_modes]),
            n if n == self.num_modes => Ok(values.to_vec()),
            n => Err(Error::Config(format!(
                "{what} has {n} entries; expected 1 or num_modes ({})",
                self.num_modes
            ))),
        }
    }

    pub fn build(&self) -> Result<Environment> {
        if self.num_modes == 0 {
            return Err(Error::Config("num_modes must be at least 1".into()));
        }
        if self.num_prompts == 0 {
            return Err(Error::Config("num_prompts must be at least 1".into()));
        }
        if !self.floor.is_finite() || self.floor <= 0.0 {
            return Err(Error::Config(format!(
                "reward floor must be positive, got {}",
                self.floor
            )));
        }
        let peaks = self.per_mode(&self.peaks, "peaks")?;
        let taus = self.per_mode(&self.tau, "tau")?;
        if let Some(bad) = peaks.iter().find(|&&p| p <= self.floor) {
            return Err(Error::Config(format!(
                "peak {bad} must exceed the floor {}",
                self.floor
            )));
        }
        if let Some(bad) = taus.iter().find(|&&t| t <= 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {bad}")));
        }
        let space = if self.variable_length {
            TokenSpace::variable(self.vocab_size, self.length)
        } else {
            TokenSpace::fixed(self.vocab_size, self.length)
        };

        let mut modes: Vec<Vec<Mode>> = Vec::with_capacity(self.num_prompts);
        let mut taken: Vec<Vec<u16>> = Vec::new();
        for prompt_id in 0..self.num_prompts {
            let set = place_modes(
                &space,
                self.num_modes,
                self.radius,
                &taken,
                self.seed,
                prompt_id as u64,
            )?;
            taken.extend(set.iter().map(|m| m.tokens.clone()));
            modes.push(set);
        }

        let prompts = (0..self.num_prompts)
            .map(|id| Prompt::one_hot(id, self.num_prompts))
            .collect();
        Ok(Environment {
            family: if self.num_prompts > 1 {
                "conditional".to_string()
            } else {
                "modal_seq".to_string()
            },
            space,
            prompts,
            modes,
            kind: EnvKind::Modal {
                peaks: vec![peaks; self.num_prompts],
                taus: vec![taus; self.num_prompts],
                floor: self.floor,
            },
        })
    }
}

/// Draw one uniform complete sequence by unranking a uniform index.
///
/// Fixed-length: base-`branching` digits, most significant first.
/// Variable-length: blocks by inner length (`k` inner tokens + end token for
/// `k < max_len`, then full-length sequences).
fn unrank_uniform(space: &TokenSpace, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let n = space.num_sequences() as u64;
    let mut idx = rng.gen_range(0..n) as usize;
    let b = space.branching();
    let digits = |mut x: usize, len: usize| -> Vec<u16> {
        let mut out = vec![0u16; len];
        for slot in (0..len).rev() {
            out[slot] = (x % b) as u16;
            x /= b;
        }
        out
    };
    match space.eos {
        None => digits(idx, space.max_len),
        Some(eos) => {
            let mut block = 1usize;
            for inner_len in 0..space.max_len {
                if idx < block {
                    let mut seq = digits(idx, inner_len);
                    seq.push(eos);
                    return seq;
                }
                idx -= block;
                block *= b;
            }
            digits(idx, space.max_len)
        }
    }
}

/// Sample `count` modes separated by more than the sum of their radii, also
/// avoiding exact collisions with `taken` (modes of earlier prompts). The
/// whole set is redrawn from `stream(seed, [prompt, attempt])` until it fits.
fn place_modes(
    space: &TokenSpace,
    count: usize,
    radius: usize,
    taken: &[Vec<u16>],
    seed: u64,
    prompt: u64,
) -> Result<Vec<Mode>> {
    for attempt in 0..MAX_PLACEMENT_ATTEMPTS {
        let mut stream = rng::stream(seed, &[prompt, attempt]);
        let cands: Vec<Vec<u16>> = (0..count)
            .map(|_| unrank_uniform(space, &mut stream))
            .collect();
        let separated = (0..count).all(|i| {
            (i + 1..count).all(|j| padded_hamming(&cands[i], &cands[j], space.max_len) > 2 * radius)
        });
        let fresh = cands.iter().all(|c| !taken.contains(c));
        if separated && fresh {
            return Ok(cands
                .into_iter()
                .map(|tokens| Mode { tokens, radius })
                .collect());
        }
    }
    Err(Error::Config(format!(
        "could not place {count} modes with pairwise separation > {} in {} attempts",
        2 * radius,
        MAX_PLACEMENT_ATTEMPTS
    )))
}

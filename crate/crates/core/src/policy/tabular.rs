//! Tabular policy: one independent logit row per reachable prefix.

use super::TokenSpace;
use crate::error::{Error, Result};
use crate::grad::{Binder, ParamBlock, Parameter, Tape, Var};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Logit table addressed by prefix rank. Row `space.prefix_index(prefix)`
/// holds the logits over the full vocabulary at that state, so the policy
/// can represent any autoregressive distribution over the space exactly.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    pub space: TokenSpace,
    pub logits: Parameter,
}

impl TabularPolicy {
    /// All-zero logits: uniform next-token distribution everywhere.
    pub fn zeros(space: TokenSpace) -> Self {
        Self {
            space,
            logits: Parameter::zeros("logits", space.prefix_count(), space.vocab_size),
        }
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(space: TokenSpace, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            space,
            logits: Parameter::uniform(
                "logits",
                space.prefix_count(),
                space.vocab_size,
                scale,
                rng,
            ),
        }
    }

    /// Exact autoregressive factorization of a full-support distribution:
    /// each row's logits are the log masses of the corresponding subtrees,
    /// so the policy reproduces `probs` up to rounding. `entries` must list
    /// every complete sequence of the space with strictly positive mass.
    pub fn from_distribution(space: TokenSpace, entries: &[(Vec<u16>, f64)]) -> Result<Self> {
        if entries.len() as u128 != space.num_sequences() {
            return Err(Error::Contract(format!(
                "distribution lists {} sequences, space has {}",
                entries.len(),
                space.num_sequences()
            )));
        }
        // Subtree mass for every prefix (proper prefixes and full sequences).
        let mut mass: HashMap<Vec<u16>, f64> = HashMap::new();
        for (seq, p) in entries {
            space.validate_complete(seq)?;
            if !p.is_finite() || *p <= 0.0 {
                return Err(Error::Domain(format!(
                    "sequence {seq:?} has non-positive mass {p}"
                )));
            }
            for k in 0..=seq.len() {
                *mass.entry(seq[..k].to_vec()).or_insert(0.0) += p;
            }
        }
        let mut pol = Self::zeros(space);
        let mut prefix: Vec<u16> = Vec::with_capacity(space.max_len);
        fill_rows(&space, &mass, &mut prefix, &mut pol.logits)?;
        Ok(pol)
    }

    pub fn next_logits(&self, prefix: &[u16]) -> Result<Vec<f64>> {
        let row = self.space.prefix_index(prefix)?;
        let start = row * self.space.vocab_size;
        Ok(self.logits.values[start..start + self.space.vocab_size].to_vec())
    }

    /// Recorded per-token log-probabilities. Binder slot 0 is the logit table.
    pub fn logprob_tokens_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        tokens: &[u16],
    ) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            let row = self.space.prefix_index(&tokens[..i])?;
            let logit_vars: Vec<Var> = (0..self.space.vocab_size)
                .map(|c| bind.var(tape, 0, &self.logits, self.logits.at(row, c)))
                .collect();
            let log_probs = tape.log_softmax(&logit_vars);
            out.push(log_probs[t as usize]);
        }
        Ok(out)
    }
}

/// Depth-first walk over proper prefixes writing `ln(subtree mass)` logits.
/// Softmax then yields the exact conditional `mass(child) / mass(prefix)`.
fn fill_rows(
    space: &TokenSpace,
    mass: &HashMap<Vec<u16>, f64>,
    prefix: &mut Vec<u16>,
    logits: &mut Parameter,
) -> Result<()> {
    let row = space.prefix_index(prefix)?;
    for t in 0..space.vocab_size as u16 {
        prefix.push(t);
        let m = *mass
            .get(prefix.as_slice())
            .ok_or_else(|| Error::Contract(format!("no mass recorded under prefix {prefix:?}")))?;
        let at = logits.at(row, t as usize);
        logits.values[at] = m.ln();
        if !space.completes(prefix.len() - 1, t) {
            fill_rows(space, mass, prefix, logits)?;
        }
        prefix.pop();
    }
    Ok(())
}

impl ParamBlock for TabularPolicy {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.logits]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.logits]
    }
}

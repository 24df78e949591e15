//! Autoregressive policies over small token spaces.
//!
//! A policy maps `(prompt, prefix)` to a logit vector over the whole
//! vocabulary; next-token probabilities are the softmax of that vector and
//! sum to one at every state. Two parameterizations share the interface:
//!
//! * [`TabularPolicy`] - one logit row per reachable prefix, addressed by a
//!   ranking of the prefix tree. Can represent any distribution over the
//!   space exactly; the workhorse for enumeration-based checks.
//! * [`MlpPolicy`] - sum of token and position embeddings over the prefix,
//!   concatenated with the prompt embedding, fed through a small dense head.
//!
//! Sequences are complete when they reach `max_len`, or (in variable-length
//! spaces) when the end-of-sequence token is emitted; the end token counts
//! toward sequence length. Sampling, scoring, enumeration, and the recorded
//! (tape) scoring path all run through the same logit and log-softmax
//! routines, so recomputing the log-probability of a sampled trajectory
//! reproduces the recorded value bit for bit.

pub mod checkpoint;
mod mlp;
mod tabular;

pub use checkpoint::{load_policy, save_policy, PolicyCheckpoint};
pub use mlp::{MlpDims, MlpPolicy};
pub use tabular::TabularPolicy;

use crate::error::{Error, Result};
use crate::grad::{log_softmax_values, Binder, ParamBlock, Parameter, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Default cap on support enumeration (2^20 sequences).
pub const DEFAULT_ENUMERATION_CAP: usize = 1 << 20;

/// Shape of the generation problem: vocabulary plus termination rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpace {
    /// Tokens are `0..vocab_size`.
    pub vocab_size: usize,
    /// End-of-sequence token id; `None` means fixed-length generation.
    pub eos: Option<u16>,
    /// Hard length cap; sequences reaching it are complete.
    pub max_len: usize,
}

impl TokenSpace {
    /// Fixed-length space: every sequence has exactly `max_len` tokens.
    pub fn fixed(vocab_size: usize, max_len: usize) -> Self {
        assert!(vocab_size >= 2 && max_len >= 1);
        Self {
            vocab_size,
            eos: None,
            max_len,
        }
    }

    /// Variable-length space: the last vocabulary id terminates a sequence.
    pub fn variable(vocab_size: usize, max_len: usize) -> Self {
        assert!(vocab_size >= 2 && max_len >= 1);
        Self {
            vocab_size,
            eos: Some((vocab_size - 1) as u16),
            max_len,
        }
    }

    /// Number of distinct tokens that can appear inside a prefix.
    pub fn branching(&self) -> usize {
        match self.eos {
            Some(_) => self.vocab_size - 1,
            None => self.vocab_size,
        }
    }

    /// Does appending `token` to a prefix of length `len` finish a sequence?
    pub fn completes(&self, len_before: usize, token: u16) -> bool {
        len_before + 1 == self.max_len || self.eos == Some(token)
    }

    /// Check that `tokens` is a well-formed complete sequence.
    pub fn validate_complete(&self, tokens: &[u16]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.max_len {
            return Err(Error::Domain(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.max_len
            )));
        }
        for &t in tokens {
            if (t as usize) >= self.vocab_size {
                return Err(Error::Domain(format!(
                    "token {t} outside vocabulary of size {}",
                    self.vocab_size
                )));
            }
        }
        match self.eos {
            None => {
                if tokens.len() != self.max_len {
                    return Err(Error::Domain(format!(
                        "fixed-length space requires length {}, got {}",
                        self.max_len,
                        tokens.len()
                    )));
                }
            }
            Some(eos) => {
                let (last, inner) = tokens.split_last().unwrap();
                if inner.contains(&eos) {
                    return Err(Error::Domain(
                        "end token inside the sequence body".to_string(),
                    ));
                }
                if *last != eos && tokens.len() != self.max_len {
                    return Err(Error::Domain(format!(
                        "unterminated sequence of length {} < {}",
                        tokens.len(),
                        self.max_len
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of reachable prefixes (including the empty one):
    /// `sum_{k=0}^{max_len-1} branching^k`.
    pub fn prefix_count(&self) -> usize {
        let b = self.branching();
        let mut total = 0usize;
        let mut pow = 1usize;
        for _ in 0..self.max_len {
            total += pow;
            pow = pow.saturating_mul(b);
        }
        total
    }

    /// Rank of a prefix among all reachable prefixes: shorter prefixes first,
    /// lexicographic within a length.
    pub fn prefix_index(&self, prefix: &[u16]) -> Result<usize> {
        let b = self.branching();
        if prefix.len() >= self.max_len {
            return Err(Error::Domain(format!(
                "prefix of length {} is already complete (max_len {})",
                prefix.len(),
                self.max_len
            )));
        }
        let mut offset = 0usize;
        let mut pow = 1usize;
        for _ in 0..prefix.len() {
            offset += pow;
            pow *= b;
        }
        let mut rank = 0usize;
        for &t in prefix {
            if (t as usize) >= b {
                return Err(Error::Domain(format!(
                    "token {t} cannot appear inside a prefix (branching {b})"
                )));
            }
            rank = rank * b + t as usize;
        }
        Ok(offset + rank)
    }

    /// Exact number of complete sequences.
    pub fn num_sequences(&self) -> u128 {
        let b = self.branching() as u128;
        match self.eos {
            None => b.pow(self.max_len as u32),
            Some(_) => {
                // eos after k inner tokens (k < max_len), plus full-length
                // sequences of inner tokens.
                let mut total = 0u128;
                let mut pow = 1u128;
                for _ in 0..self.max_len {
                    total += pow;
                    pow *= b;
                }
                total + pow
            }
        }
    }
}

/// A conditioning context: identity plus a fixed embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub embedding: Vec<f64>,
}

impl Prompt {
    /// One-hot embedding of `id` in `dim` slots.
    pub fn one_hot(id: usize, dim: usize) -> Self {
        let mut embedding = vec![0.0; dim];
        embedding[id % dim] = 1.0;
        Self { id, embedding }
    }
}

/// One sampled generation with everything losses need attached.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub prompt_id: usize,
    pub tokens: Vec<u16>,
    /// Raw environment reward.
    pub reward: f64,
    /// Reward actually fed to the loss (group-normalized or raw).
    pub reward_norm: f64,
    /// Sequence log-probability under the policy that generated it.
    pub logp_current: f64,
    /// Sequence log-probability under the rollout snapshot.
    pub logp_old: f64,
    /// Per-token log-probabilities under the rollout snapshot.
    pub logp_old_tokens: Vec<f64>,
    /// Sequence log-probability under the reference policy.
    pub logp_ref: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Policy parameterization selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Tabular,
    Mlp,
}

/// An autoregressive policy; see the module docs for the two variants.
#[derive(Debug, Clone)]
pub enum Policy {
    Tabular(TabularPolicy),
    Mlp(MlpPolicy),
}

impl Policy {
    /// Tabular policy with all-zero logits, i.e. uniform at every state.
    pub fn new_tabular(space: TokenSpace) -> Self {
        Policy::Tabular(TabularPolicy::zeros(space))
    }

    /// Tabular policy with logits drawn uniformly from `[-scale, scale]`.
    pub fn new_tabular_random(space: TokenSpace, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Policy::Tabular(TabularPolicy::random(space, scale, rng))
    }

    /// Embedding + dense-head policy.
    pub fn new_mlp(space: TokenSpace, dims: MlpDims, rng: &mut ChaCha8Rng) -> Self {
        Policy::Mlp(MlpPolicy::new(space, dims, rng))
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Tabular(_) => PolicyKind::Tabular,
            Policy::Mlp(_) => PolicyKind::Mlp,
        }
    }

    pub fn space(&self) -> &TokenSpace {
        match self {
            Policy::Tabular(p) => &p.space,
            Policy::Mlp(p) => &p.space,
        }
    }

    /// Logits over the full vocabulary at `(prompt, prefix)`.
    pub fn next_logits(&self, prompt: &Prompt, prefix: &[u16]) -> Result<Vec<f64>> {
        match self {
            Policy::Tabular(p) => p.next_logits(prefix),
            Policy::Mlp(p) => p.next_logits(prompt, prefix),
        }
    }

    /// Log of the next-token distribution; exponentials sum to one.
    pub fn next_log_probs(&self, prompt: &Prompt, prefix: &[u16]) -> Result<Vec<f64>> {
        Ok(log_softmax_values(&self.next_logits(prompt, prefix)?))
    }

    /// Per-token log-probabilities of a complete sequence.
    pub fn logprob_tokens(&self, prompt: &Prompt, tokens: &[u16]) -> Result<Vec<f64>> {
        self.space().validate_complete(tokens)?;
        let mut out = Vec::with_capacity(tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            let lp = self.next_log_probs(prompt, &tokens[..i])?;
            out.push(lp[t as usize]);
        }
        Ok(out)
    }

    /// Sequence log-probability of a complete sequence.
    pub fn logprob(&self, prompt: &Prompt, tokens: &[u16]) -> Result<f64> {
        Ok(self.logprob_tokens(prompt, tokens)?.iter().sum())
    }

    /// Recorded per-token log-probabilities for gradient computation. The
    /// binder must have been created for this policy.
    pub fn logprob_tokens_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        prompt: &Prompt,
        tokens: &[u16],
    ) -> Result<Vec<Var>> {
        self.space().validate_complete(tokens)?;
        match self {
            Policy::Tabular(p) => p.logprob_tokens_tape(tape, bind, tokens),
            Policy::Mlp(p) => p.logprob_tokens_tape(tape, bind, prompt, tokens),
        }
    }

    /// Recorded sequence log-probability.
    pub fn logprob_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        prompt: &Prompt,
        tokens: &[u16],
    ) -> Result<Var> {
        let per_token = self.logprob_tokens_tape(tape, bind, prompt, tokens)?;
        Ok(tape.sum(&per_token))
    }

    /// Deep frozen copy; the original keeps training, the snapshot stays put.
    pub fn snapshot(&self) -> Policy {
        self.clone()
    }
}

impl ParamBlock for Policy {
    fn params(&self) -> Vec<&Parameter> {
        match self {
            Policy::Tabular(p) => p.params(),
            Policy::Mlp(p) => p.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Policy::Tabular(p) => p.params_mut(),
            Policy::Mlp(p) => p.params_mut(),
        }
    }
}

/// Fixed reference distribution for KL regularization and targets.
#[derive(Debug, Clone)]
pub enum ReferencePolicy {
    /// Exact uniform over next tokens at every state.
    Uniform,
    /// A frozen policy (e.g. a random MLP).
    Frozen(Box<Policy>),
}

impl ReferencePolicy {
    /// Sequence log-probability under the reference.
    pub fn logprob(&self, space: &TokenSpace, prompt: &Prompt, tokens: &[u16]) -> Result<f64> {
        match self {
            ReferencePolicy::Uniform => {
                space.validate_complete(tokens)?;
                Ok(-(tokens.len() as f64) * (space.vocab_size as f64).ln())
            }
            ReferencePolicy::Frozen(p) => p.logprob(prompt, tokens),
        }
    }
}

/// Draw one token index from a log-probability vector by inverse CDF.
fn sample_categorical(log_probs: &[f64], rng: &mut ChaCha8Rng) -> u16 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i as u16;
        }
    }
    (log_probs.len() - 1) as u16
}

/// Sample one complete trajectory, recording per-token log-probabilities as
/// it goes. `logp_old` mirrors `logp_current` (the sampler is the rollout
/// snapshot); `logp_ref`, `reward`, and `reward_norm` are filled by the
/// collection pipeline.
pub fn sample_trajectory(policy: &Policy, prompt: &Prompt, rng: &mut ChaCha8Rng) -> Trajectory {
    let space = *policy.space();
    let mut tokens: Vec<u16> = Vec::with_capacity(space.max_len);
    let mut step_logps: Vec<f64> = Vec::with_capacity(space.max_len);
    loop {
        let lp = policy
            .next_log_probs(prompt, &tokens)
            .expect("prefix built by the sampler is always valid");
        let t = sample_categorical(&lp, rng);
        step_logps.push(lp[t as usize]);
        let done = space.completes(tokens.len(), t);
        tokens.push(t);
        if done {
            break;
        }
    }
    let logp: f64 = step_logps.iter().sum();
    Trajectory {
        prompt_id: prompt.id,
        tokens,
        reward: 0.0,
        reward_norm: 0.0,
        logp_current: logp,
        logp_old: logp,
        logp_old_tokens: step_logps,
        logp_ref: 0.0,
    }
}

/// Exact distribution over all complete sequences, in canonical order
/// (depth-first, token ids ascending). Errors when the support exceeds `cap`.
pub fn enumerate_support(
    policy: &Policy,
    prompt: &Prompt,
    cap: usize,
) -> Result<Vec<(Vec<u16>, f64)>> {
    let space = *policy.space();
    let n = space.num_sequences();
    if n > cap as u128 {
        return Err(Error::EnumerationTooLarge(format!(
            "support has {n} sequences, cap is {cap}"
        )));
    }
    let mut out = Vec::with_capacity(n as usize);
    let mut prefix: Vec<u16> = Vec::with_capacity(space.max_len);
    enumerate_rec(policy, prompt, &space, &mut prefix, 0.0, &mut out)?;
    Ok(out)
}

fn enumerate_rec(
    policy: &Policy,
    prompt: &Prompt,
    space: &TokenSpace,
    prefix: &mut Vec<u16>,
    logp_acc: f64,
    out: &mut Vec<(Vec<u16>, f64)>,
) -> Result<()> {
    let lp = policy.next_log_probs(prompt, prefix)?;
    for t in 0..space.vocab_size as u16 {
        // In variable-length spaces, inner continuation tokens are < eos.
        let step = logp_acc + lp[t as usize];
        if space.completes(prefix.len(), t) {
            let mut seq = prefix.clone();
            seq.push(t);
            out.push((seq, step));
        } else if (t as usize) < space.branching() {
            prefix.push(t);
            enumerate_rec(policy, prompt, space, prefix, step, out)?;
            prefix.pop();
        } else {
            // eos is handled by `completes`; nothing else reaches here.
            unreachable!("non-terminal token outside branching range");
        }
    }
    Ok(())
}

/// Canonical enumeration of all complete sequences of a space, without
/// probabilities. Same order as [`enumerate_support`].
pub fn enumerate_sequences(space: &TokenSpace, cap: usize) -> Result<Vec<Vec<u16>>> {
    let n = space.num_sequences();
    if n > cap as u128 {
        return Err(Error::EnumerationTooLarge(format!(
            "space has {n} sequences, cap is {cap}"
        )));
    }
    let mut out = Vec::with_capacity(n as usize);
    let mut prefix: Vec<u16> = Vec::with_capacity(space.max_len);
    fn rec(space: &TokenSpace, prefix: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
        for t in 0..space.vocab_size as u16 {
            if space.completes(prefix.len(), t) {
                let mut seq = prefix.clone();
                seq.push(t);
                out.push(seq);
            } else if (t as usize) < space.branching() {
                prefix.push(t);
                rec(space, prefix, out);
                prefix.pop();
            }
        }
    }
    rec(space, &mut prefix, &mut out);
    Ok(out)
}

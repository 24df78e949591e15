//! Embedding + dense-head policy.
//!
//! The prefix is encoded as the sum of token and position embeddings over
//! its tokens (the empty prefix encodes to zero), concatenated with the
//! prompt embedding, and passed through a three-layer dense head producing
//! one logit per vocabulary entry.

use super::{Prompt, TokenSpace};
use crate::error::{Error, Result};
use crate::grad::{Activation, Binder, DenseNet, ParamBlock, Parameter, Tape, Var};
use rand_chacha::ChaCha8Rng;

/// Width settings for [`MlpPolicy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpDims {
    /// Length of the prompt embedding vectors this policy accepts.
    pub prompt_dim: usize,
    /// Token/position embedding width.
    pub token_embed_dim: usize,
    /// Hidden width of the dense head.
    pub hidden_dim: usize,
}

#[derive(Debug, Clone)]
pub struct MlpPolicy {
    pub space: TokenSpace,
    pub dims: MlpDims,
    /// One embedding row per vocabulary entry.
    pub token_embed: Parameter,
    /// One embedding row per prefix position.
    pub pos_embed: Parameter,
    /// `[embed + prompt] -> hidden -> hidden -> vocab` with tanh hidden layers.
    pub head: DenseNet,
}

impl MlpPolicy {
    pub fn new(space: TokenSpace, dims: MlpDims, rng: &mut ChaCha8Rng) -> Self {
        let d = dims.token_embed_dim;
        let embed_bound = |rows: usize| (6.0 / (rows + d) as f64).sqrt();
        let token_embed = Parameter::uniform(
            "token_embed",
            space.vocab_size,
            d,
            embed_bound(space.vocab_size),
            rng,
        );
        let pos_embed = Parameter::uniform(
            "pos_embed",
            space.max_len,
            d,
            embed_bound(space.max_len),
            rng,
        );
        let head = DenseNet::new(
            &[
                d + dims.prompt_dim,
                dims.hidden_dim,
                dims.hidden_dim,
                space.vocab_size,
            ],
            &[Activation::Tanh, Activation::Tanh, Activation::Identity],
            rng,
        );
        Self {
            space,
            dims,
            token_embed,
            pos_embed,
            head,
        }
    }

    fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        if prompt.embedding.len() != self.dims.prompt_dim {
            return Err(Error::Shape(format!(
                "prompt embedding has {} entries, policy expects {}",
                prompt.embedding.len(),
                self.dims.prompt_dim
            )));
        }
        Ok(())
    }

    /// Prefix encoding: sum over positions of token + position embeddings.
    fn encode_prefix(&self, prefix: &[u16]) -> Vec<f64> {
        let d = self.dims.token_embed_dim;
        let mut enc = vec![0.0; d];
        for (i, &t) in prefix.iter().enumerate() {
            for (k, e) in enc.iter_mut().enumerate() {
                *e += self.token_embed.values[self.token_embed.at(t as usize, k)]
                    + self.pos_embed.values[self.pos_embed.at(i, k)];
            }
        }
        enc
    }

    pub fn next_logits(&self, prompt: &Prompt, prefix: &[u16]) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        self.space.prefix_index(prefix)?; // validates prefix shape
        let mut input = self.encode_prefix(prefix);
        input.extend_from_slice(&prompt.embedding);
        self.head.forward(&input)
    }

    /// Recorded per-token log-probabilities. Binder slots: 0 token embeddings,
    /// 1 position embeddings, 2.. the dense head.
    ///
    /// The prefix encoding is built incrementally, in the same order as the
    /// value path, so forward values agree bitwise with `next_logits`.
    pub fn logprob_tokens_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        prompt: &Prompt,
        tokens: &[u16],
    ) -> Result<Vec<Var>> {
        self.check_prompt(prompt)?;
        let d = self.dims.token_embed_dim;
        let prompt_vars: Vec<Var> = prompt.embedding.iter().map(|&x| tape.leaf(x)).collect();
        let mut enc: Vec<Var> = (0..d).map(|_| tape.leaf(0.0)).collect();
        let mut out = Vec::with_capacity(tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            let mut input = enc.clone();
            input.extend_from_slice(&prompt_vars);
            let logits = self.head.forward_tape(tape, bind, 2, &input)?;
            let log_probs = tape.log_softmax(&logits);
            out.push(log_probs[t as usize]);
            // extend the encoding for the next position (skipped after the
            // final token; terminal states are never scored)
            if i + 1 < tokens.len() {
                for (k, e) in enc.iter_mut().enumerate() {
                    let te = bind.var(
                        tape,
                        0,
                        &self.token_embed,
                        self.token_embed.at(t as usize, k),
                    );
                    let pe = bind.var(tape, 1, &self.pos_embed, self.pos_embed.at(i, k));
                    let s = tape.add(te, pe);
                    *e = tape.add(*e, s);
                }
            }
        }
        Ok(out)
    }
}

impl ParamBlock for MlpPolicy {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.token_embed, &self.pos_embed];
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.token_embed, &mut self.pos_embed];
        out.extend(self.head.params_mut());
        out
    }
}

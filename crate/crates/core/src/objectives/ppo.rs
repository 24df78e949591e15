//! Clipped surrogate with a learned value baseline.
//!
//! The critic scores every prefix state; advantages are computed against
//! the rollout-time critic (`old_values`, recorded by the collector), so
//! they are constants of the optimization step exactly like `logp_old`.
//! The live critic is trained by squared-error regression to the terminal
//! reward, weighted 0.5 in the total loss. Rewards are terminal-only and
//! undiscounted, so every state along a trajectory regresses to the same
//! return.

use super::{batch_size, ActorCritic, LossBreakdown, RolloutGroup, LOG_RATIO_CLAMP};
use crate::error::{Error, Result};
use crate::grad::{Activation, Binder, DenseNet, ParamBlock, Parameter, Tape, Var};
use crate::policy::{MlpDims, Prompt, TokenSpace};
use rand_chacha::ChaCha8Rng;

/// Weight of the value-regression term in the total loss.
pub const VALUE_LOSS_COEF: f64 = 0.5;

/// State-value network: the same sum-of-embeddings prefix encoding as the
/// dense policy, with a scalar head.
#[derive(Debug, Clone)]
pub struct Critic {
    pub space: TokenSpace,
    pub dims: MlpDims,
    pub token_embed: Parameter,
    pub pos_embed: Parameter,
    /// `[embed + prompt] -> hidden -> hidden -> 1`, tanh hidden layers.
    pub head: DenseNet,
}

impl Critic {
    pub fn new(space: TokenSpace, dims: MlpDims, rng: &mut ChaCha8Rng) -> Self {
        let d = dims.token_embed_dim;
        let embed_bound = |rows: usize| (6.0 / (rows + d) as f64).sqrt();
        let token_embed = Parameter::uniform(
            "critic.token_embed",
            space.vocab_size,
            d,
            embed_bound(space.vocab_size),
            rng,
        );
        let pos_embed = Parameter::uniform(
            "critic.pos_embed",
            space.max_len,
            d,
            embed_bound(space.max_len),
            rng,
        );
        let head = DenseNet::new(
            &[d + dims.prompt_dim, dims.hidden_dim, dims.hidden_dim, 1],
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

    /// All-zero weights with the final bias set to `value`: scores every
    /// state as `value`. Useful for pinning the baseline in tests.
    pub fn constant(space: TokenSpace, dims: MlpDims, value: f64) -> Self {
        let mut rng = crate::rng::stream(0, &[0]);
        let mut critic = Self::new(space, dims, &mut rng);
        for p in critic.params_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut params = critic.params_mut();
        let last = params.len() - 1;
        params[last].values[0] = value;
        critic
    }

    fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        if prompt.embedding.len() != self.dims.prompt_dim {
            return Err(Error::Shape(format!(
                "prompt embedding has {} entries, critic expects {}",
                prompt.embedding.len(),
                self.dims.prompt_dim
            )));
        }
        Ok(())
    }

    /// Value of the state reached by `prefix`.
    pub fn value(&self, prompt: &Prompt, prefix: &[u16]) -> Result<f64> {
        self.check_prompt(prompt)?;
        let d = self.dims.token_embed_dim;
        let mut enc = vec![0.0; d];
        for (i, &t) in prefix.iter().enumerate() {
            for (k, e) in enc.iter_mut().enumerate() {
                *e += self.token_embed.values[self.token_embed.at(t as usize, k)]
                    + self.pos_embed.values[self.pos_embed.at(i, k)];
            }
        }
        enc.extend_from_slice(&prompt.embedding);
        Ok(self.head.forward(&enc)?[0])
    }

    /// Values of every prefix state along a trajectory (position `t` scores
    /// the state before token `t`). Binder slots start at `slot_offset`:
    /// token embeddings, position embeddings, then the head.
    pub fn values_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        slot_offset: usize,
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
            out.push(
                self.head
                    .forward_tape(tape, bind, slot_offset + 2, &input)?[0],
            );
            if i + 1 < tokens.len() {
                for (k, e) in enc.iter_mut().enumerate() {
                    let te = bind.var(
                        tape,
                        slot_offset,
                        &self.token_embed,
                        self.token_embed.at(t as usize, k),
                    );
                    let pe = bind.var(
                        tape,
                        slot_offset + 1,
                        &self.pos_embed,
                        self.pos_embed.at(i, k),
                    );
                    let s = tape.add(te, pe);
                    *e = tape.add(*e, s);
                }
            }
        }
        Ok(out)
    }
}

impl ParamBlock for Critic {
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

/// `-mean_y mean_t min(ratio_t A_t, clip(ratio_t) A_t)
///  + 0.5 * mean_y mean_t (V(s_t) - r)^2`
/// with `A_t = r - V_old(s_t)` from the rollout snapshot.
pub fn ppo_loss(
    tape: &mut Tape,
    bind: &mut Binder,
    model: &ActorCritic,
    groups: &[RolloutGroup],
    epsilon: f64,
) -> Result<(Var, LossBreakdown)> {
    let n = batch_size(groups)? as f64;
    let n_policy_slots = model.policy.params().len();
    let mut per_traj = Vec::new();
    let mut bd = LossBreakdown::default();
    for group in groups {
        if group.old_values.len() != group.trajectories.len() {
            return Err(Error::Contract(format!(
                "group has {} trajectories but {} rollout value rows",
                group.trajectories.len(),
                group.old_values.len()
            )));
        }
        for (t, old_vals) in group.trajectories.iter().zip(&group.old_values) {
            let lp_tokens =
                model
                    .policy
                    .logprob_tokens_tape(tape, bind, &group.prompt, &t.tokens)?;
            if old_vals.len() != lp_tokens.len() || t.logp_old_tokens.len() != lp_tokens.len() {
                return Err(Error::Contract(format!(
                    "trajectory of {} tokens has {} rollout values and {} old log-probabilities",
                    lp_tokens.len(),
                    old_vals.len(),
                    t.logp_old_tokens.len()
                )));
            }
            let values =
                model
                    .critic
                    .values_tape(tape, bind, n_policy_slots, &group.prompt, &t.tokens)?;
            let mut token_objs = Vec::with_capacity(lp_tokens.len());
            let mut value_terms = Vec::with_capacity(lp_tokens.len());
            for ((&lp_t, &lp_old_t), (&v_live, &v_old)) in lp_tokens
                .iter()
                .zip(&t.logp_old_tokens)
                .zip(values.iter().zip(old_vals))
            {
                let adv = t.reward - v_old;
                let d = tape.add_const(lp_t, -lp_old_t);
                let d = tape.clamp(d, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
                let ratio = tape.exp(d);
                bd.mean_w += tape.value(ratio) / n / lp_tokens.len() as f64;
                let unclipped = tape.mul_const(ratio, adv);
                let clipped_ratio = tape.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
                let clipped = tape.mul_const(clipped_ratio, adv);
                token_objs.push(tape.min(unclipped, clipped));
                let err = tape.add_const(v_live, -t.reward);
                value_terms.push(tape.square(err));
            }
            let objective = tape.mean(&token_objs);
            let value_loss = tape.mean(&value_terms);
            let neg_obj = tape.neg(objective);
            let weighted_value = tape.mul_const(value_loss, VALUE_LOSS_COEF);
            per_traj.push(tape.add(neg_obj, weighted_value));

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

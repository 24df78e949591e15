//! Learned per-prompt log-partition estimate.

use crate::error::{Error, Result};
use crate::grad::{Activation, Binder, DenseNet, ParamBlock, Parameter, Tape, Var};
use crate::policy::Prompt;
use rand_chacha::ChaCha8Rng;

/// Small dense network mapping a prompt embedding directly to a scalar
/// interpreted as the log-partition of that prompt's tilted target. Trained
/// jointly with the policy, typically at a higher learning rate.
#[derive(Debug, Clone)]
pub struct PartitionNet {
    pub prompt_dim: usize,
    /// `[prompt_dim] -> hidden -> hidden -> 1`, tanh hidden layers.
    pub net: DenseNet,
}

impl PartitionNet {
    pub fn new(prompt_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let net = DenseNet::new(
            &[prompt_dim, hidden_dim, hidden_dim, 1],
            &[Activation::Tanh, Activation::Tanh, Activation::Identity],
            rng,
        );
        Self { prompt_dim, net }
    }

    /// All-zero weights with the final bias set to `value`: outputs `value`
    /// for every prompt. Useful for pinning the estimate in tests.
    pub fn constant(prompt_dim: usize, hidden_dim: usize, value: f64) -> Self {
        let mut rng = crate::rng::stream(0, &[0]);
        let mut net = Self::new(prompt_dim, hidden_dim, &mut rng);
        for p in net.net.params_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut params = net.net.params_mut();
        let last = params.len() - 1;
        params[last].values[0] = value;
        net
    }

    fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        if prompt.embedding.len() != self.prompt_dim {
            return Err(Error::Shape(format!(
                "prompt embedding has {} entries, partition net expects {}",
                prompt.embedding.len(),
                self.prompt_dim
            )));
        }
        Ok(())
    }

    /// Current estimate for one prompt.
    pub fn log_partition(&self, prompt: &Prompt) -> Result<f64> {
        self.check_prompt(prompt)?;
        Ok(self.net.forward(&prompt.embedding)?[0])
    }

    /// Recorded estimate; binder slots start at `slot_offset`.
    pub fn log_partition_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        slot_offset: usize,
        prompt: &Prompt,
    ) -> Result<Var> {
        self.check_prompt(prompt)?;
        let input: Vec<Var> = prompt.embedding.iter().map(|&x| tape.leaf(x)).collect();
        Ok(self.net.forward_tape(tape, bind, slot_offset, &input)?[0])
    }
}

impl ParamBlock for PartitionNet {
    fn params(&self) -> Vec<&Parameter> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.net.params_mut()
    }
}

//! Plain SGD and Adam over a parameter block.
//!
//! Moments are stored per parameter slot in the block's declaration order,
//! so the same optimizer instance serves composite models (policy plus
//! partition net or critic) with a per-slot learning rate.

use crate::error::{Error, Result};
use crate::grad::ParamBlock;
use serde::{Deserialize, Serialize};

/// First-moment decay for Adam.
pub const ADAM_BETA1: f64 = 0.9;
/// Second-moment decay for Adam.
pub const ADAM_BETA2: f64 = 0.999;
/// Denominator fuzz for Adam.
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Stateful optimizer bound to a fixed parameter layout.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Global step count for bias correction.
    t: u64,
    moments: Vec<Moments>,
}

impl Optimizer {
    /// `sizes` are the flat lengths of the block's parameters, in order.
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        let moments = sizes
            .iter()
            .map(|&n| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            })
            .collect();
        Self {
            kind,
            t: 0,
            moments,
        }
    }

    /// Apply one update from the gradients accumulated in `block`, with one
    /// learning rate per parameter slot.
    pub fn step<B: ParamBlock>(&mut self, block: &mut B, lrs: &[f64]) -> Result<()> {
        let mut params = block.params_mut();
        if params.len() != self.moments.len() || params.len() != lrs.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} parameter slots, got {} params and {} rates",
                self.moments.len(),
                params.len(),
                lrs.len()
            )));
        }
        self.t += 1;
        for ((p, mom), &lr) in params.iter_mut().zip(&mut self.moments).zip(lrs) {
            if p.values.len() != mom.m.len() {
                return Err(Error::Contract(format!(
                    "parameter {} has {} values, optimizer slot has {}",
                    p.name,
                    p.values.len(),
                    mom.m.len()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, &g) in p.values.iter_mut().zip(&p.grad) {
                        *v -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                    for (i, (v, &g)) in p.values.iter_mut().zip(&p.grad).enumerate() {
                        mom.m[i] = ADAM_BETA1 * mom.m[i] + (1.0 - ADAM_BETA1) * g;
                        mom.v[i] = ADAM_BETA2 * mom.v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = mom.m[i] / bc1;
                        let v_hat = mom.v[i] / bc2;
                        *v -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! All quantities are `f64` scalars. A [`Tape`] records primitive operations
//! as they execute; [`Tape::backward`] runs a single reverse sweep that
//! accumulates `d(out)/d(node)` for every node. Model parameters live outside
//! the tape in [`net::Parameter`] buffers; a [`Binder`] lazily creates one
//! leaf node per parameter element actually touched and, after the sweep,
//! adds the leaf adjoints into the parameter gradient buffers. Gradients are
//! therefore accumulated (never overwritten): two backward passes on
//! independent losses leave `grad = dL1 + dL2`.
//!
//! The operation set is deliberately small - arithmetic, `exp`/`ln`/`tanh`/
//! `relu`, a piecewise `min`/`clamp` pair for clipped surrogates, and a
//! numerically stable `log_softmax`. Everything else is composed from these.

pub mod check;
pub mod net;

pub use check::{finite_diff_check, finite_diff_compare, FdReport};
pub use net::{Activation, DenseNet, Layer, ParamBlock, Parameter};

use crate::error::{Error, Result};
use std::collections::HashMap;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Ln(u32),
    Tanh(u32),
    Relu(u32),
    /// Picks the smaller input; ties route the gradient to the first.
    Min(u32, u32),
    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the band.
    Clamp(u32, f64, f64),
    AddConst(u32),
    MulConst(u32, f64),
}

/// Wengert tape: append-only operation record plus value/adjoint arrays.
#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<f64>,
    grads: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, val: f64) -> Var {
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.vals.push(val);
        Var(id)
    }

    /// New leaf node holding `v`. Used for constants and parameter bindings.
    pub fn leaf(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, v)
    }

    /// Current forward value of a node.
    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.0 as usize]
    }

    /// Adjoint of a node after [`Tape::backward`]; zero before any sweep.
    pub fn grad(&self, v: Var) -> f64 {
        self.grads.get(v.0 as usize).copied().unwrap_or(0.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(Op::Div(a.0, b.0), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(Op::Neg(a.0), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(Op::Exp(a.0), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).ln();
        self.push(Op::Ln(a.0), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.push(Op::Tanh(a.0), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).max(0.0);
        self.push(Op::Relu(a.0), v)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).min(self.value(b));
        self.push(Op::Min(a.0, b.0), v)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).clamp(lo, hi);
        self.push(Op::Clamp(a.0, lo, hi), v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(Op::AddConst(a.0), v)
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(Op::MulConst(a.0, c), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Left fold of adds; the empty sum is a fresh zero leaf.
    pub fn sum(&mut self, vars: &[Var]) -> Var {
        match vars.split_first() {
            None => self.leaf(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &v| self.add(acc, v)),
        }
    }

    /// Arithmetic mean of `vars`; the empty mean is a zero leaf.
    pub fn mean(&mut self, vars: &[Var]) -> Var {
        if vars.is_empty() {
            return self.leaf(0.0);
        }
        let m = 1.0 / vars.len() as f64;
        let s = self.sum(vars);
        self.mul_const(s, m)
    }

    /// Numerically stable log-softmax over a logit vector.
    ///
    /// Uses the max-shift trick: `lse = m + ln(sum exp(x_i - m))` with the
    /// shift `m` held constant. The result is exact for any constant shift,
    /// so the gradient (`d out_i / d x_j = [i==j] - softmax_j`) is unaffected.
    pub fn log_softmax(&mut self, logits: &[Var]) -> Vec<Var> {
        assert!(!logits.is_empty(), "log_softmax needs at least one logit");
        let m = logits
            .iter()
            .map(|&v| self.value(v))
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<Var> = logits
            .iter()
            .map(|&x| {
                let shifted = self.add_const(x, -m);
                self.exp(shifted)
            })
            .collect();
        let total = self.sum(&exps);
        let ln_total = self.ln(total);
        let lse = self.add_const(ln_total, m);
        logits.iter().map(|&x| self.sub(x, lse)).collect()
    }

    /// Reverse sweep from the scalar `out`. Resets node adjoints, seeds
    /// `d(out)/d(out) = 1`, and walks the record backwards. Parameter-level
    /// gradients are harvested separately via [`Binder::accumulate`].
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let n = self.ops.len();
        if (out.0 as usize) >= n {
            return Err(Error::Contract(format!(
                "backward target {} is not a node on this tape (len {n})",
                out.0
            )));
        }
        self.grads.clear();
        self.grads.resize(n, 0.0);
        self.grads[out.0 as usize] = 1.0;
        for i in (0..n).rev() {
            let g = self.grads[i];
            if g == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.grads[a as usize] += g;
                    self.grads[b as usize] += g;
                }
                Op::Sub(a, b) => {
                    self.grads[a as usize] += g;
                    self.grads[b as usize] -= g;
                }
                Op::Mul(a, b) => {
                    self.grads[a as usize] += g * self.vals[b as usize];
                    self.grads[b as usize] += g * self.vals[a as usize];
                }
                Op::Div(a, b) => {
                    let vb = self.vals[b as usize];
                    self.grads[a as usize] += g / vb;
                    self.grads[b as usize] -= g * self.vals[i] / vb;
                }
                Op::Neg(a) => self.grads[a as usize] -= g,
                Op::Exp(a) => self.grads[a as usize] += g * self.vals[i],
                Op::Ln(a) => self.grads[a as usize] += g / self.vals[a as usize],
                Op::Tanh(a) => {
                    let t = self.vals[i];
                    self.grads[a as usize] += g * (1.0 - t * t);
                }
                Op::Relu(a) => {
                    if self.vals[a as usize] > 0.0 {
                        self.grads[a as usize] += g;
                    }
                }
                Op::Min(a, b) => {
                    if self.vals[a as usize] <= self.vals[b as usize] {
                        self.grads[a as usize] += g;
                    } else {
                        self.grads[b as usize] += g;
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let va = self.vals[a as usize];
                    if va > lo && va < hi {
                        self.grads[a as usize] += g;
                    }
                }
                Op::AddConst(a) => self.grads[a as usize] += g,
                Op::MulConst(a, c) => self.grads[a as usize] += g * c,
            }
        }
        Ok(())
    }

    /// Backward through a slice that must hold exactly one scalar output.
    ///
    /// Differentiation is defined for scalar losses only; vector-valued
    /// records must be reduced before the sweep.
    pub fn backward_on(&mut self, outs: &[Var]) -> Result<()> {
        match outs {
            [single] => self.backward(*single),
            _ => Err(Error::Contract(format!(
                "backward requires a scalar output, got {} outputs",
                outs.len()
            ))),
        }
    }
}

/// Value-space twin of [`Tape::log_softmax`], used on sampling paths where no
/// gradient is needed. Same shift, same operation order, so the two paths
/// agree bit for bit.
pub fn log_softmax_values(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "log_softmax needs at least one logit");
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().fold(0.0, |acc, &x| acc + (x - m).exp());
    let lse = total.ln() + m;
    logits.iter().map(|&x| x - lse).collect()
}

/// Lazily binds parameter elements of one [`ParamBlock`] to tape leaves.
///
/// One binder per block per tape. Repeated requests for the same element
/// return the same leaf, so each element appears once and the reverse sweep
/// sums every use. After `backward`, [`Binder::accumulate`] adds the leaf
/// adjoints into the block's gradient buffers.
#[derive(Debug)]
pub struct Binder {
    maps: Vec<HashMap<u32, Var>>,
}

impl Binder {
    /// Binder for a block exposing `slots` parameters.
    pub fn new(slots: usize) -> Self {
        Self {
            maps: vec![HashMap::new(); slots],
        }
    }

    pub fn for_block<B: ParamBlock>(block: &B) -> Self {
        Self::new(block.params().len())
    }

    /// Leaf for element `idx` of the parameter in `slot`, creating it on
    /// first use with the parameter's current value.
    pub fn var(&mut self, tape: &mut Tape, slot: usize, param: &Parameter, idx: usize) -> Var {
        *self.maps[slot]
            .entry(idx as u32)
            .or_insert_with(|| tape.leaf(param.values[idx]))
    }

    /// Add tape adjoints into the block's gradient buffers (`grad +=`).
    pub fn accumulate<B: ParamBlock>(&self, tape: &Tape, block: &mut B) {
        let mut params = block.params_mut();
        assert_eq!(params.len(), self.maps.len(), "binder/block slot mismatch");
        for (slot, map) in self.maps.iter().enumerate() {
            for (&idx, &var) in map {
                params[slot].grad[idx as usize] += tape.grad(var);
            }
        }
    }
}

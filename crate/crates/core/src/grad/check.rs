//! Finite-difference verification of tape gradients.
//!
//! The reference gradient is a central difference with step `h = 1e-6`:
//! `(f(p + h) - f(p - h)) / 2h`, evaluated element by element over every
//! parameter of a block. A check passes when the worst relative error stays
//! below the caller's tolerance. The error is scaled by
//! `max(|analytic|, |fd|, 1e-4)` so that elements with (near-)zero gradient
//! are judged by a small absolute scale instead of blowing up the ratio.

use super::{Binder, ParamBlock, Tape, Var};
use crate::error::{Error, Result};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Scale floor in the relative-error denominator.
const ERROR_SCALE_FLOOR: f64 = 1e-4;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Number of parameter elements compared.
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat element index of the worst mismatch.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    pub pass: bool,
}

/// A loss expressed on the tape: given a fresh tape and a binder for `model`,
/// record the computation and return the scalar output node.
pub trait TapeLoss<M: ParamBlock>: Fn(&mut Tape, &mut Binder, &M) -> Result<Var> {}
impl<M: ParamBlock, F: Fn(&mut Tape, &mut Binder, &M) -> Result<Var>> TapeLoss<M> for F {}

/// Evaluate the loss value only (fresh tape, no sweep).
fn eval<M: ParamBlock>(model: &M, loss: &impl TapeLoss<M>) -> Result<f64> {
    let mut tape = Tape::new();
    let mut bind = Binder::for_block(model);
    let out = loss(&mut tape, &mut bind, model)?;
    let v = tape.value(out);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Tape gradient of `loss` at the current parameters, one vector per
/// parameter, leaving the accumulated values in the block's `grad` buffers.
pub fn analytic_gradient<M: ParamBlock>(
    model: &mut M,
    loss: &impl TapeLoss<M>,
) -> Result<Vec<Vec<f64>>> {
    model.zero_grad();
    let mut tape = Tape::new();
    let mut bind = Binder::for_block(model);
    let out = loss(&mut tape, &mut bind, model)?;
    let v = tape.value(out);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    tape.backward(out)?;
    bind.accumulate(&tape, model);
    Ok(model.params().iter().map(|p| p.grad.clone()).collect())
}

/// Central-difference gradient of `loss`, one vector per parameter.
/// Parameters are restored exactly after probing.
pub fn fd_gradient<M: ParamBlock>(model: &mut M, loss: &impl TapeLoss<M>) -> Result<Vec<Vec<f64>>> {
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (slot, &len) in shapes.iter().enumerate() {
        let mut grads = Vec::with_capacity(len);
        for idx in 0..len {
            let orig = model.params()[slot].values[idx];
            model.params_mut()[slot].values[idx] = orig + FD_STEP;
            let plus = eval(&*model, loss)?;
            model.params_mut()[slot].values[idx] = orig - FD_STEP;
            let minus = eval(&*model, loss)?;
            model.params_mut()[slot].values[idx] = orig;
            grads.push((plus - minus) / (2.0 * FD_STEP));
        }
        out.push(grads);
    }
    Ok(out)
}

/// Compare externally supplied gradients against central differences.
pub fn finite_diff_compare<M: ParamBlock>(
    model: &mut M,
    loss: &impl TapeLoss<M>,
    analytic: &[Vec<f64>],
    tolerance: f64,
) -> Result<FdReport> {
    let fd = fd_gradient(model, loss)?;
    if fd.len() != analytic.len() {
        return Err(Error::Contract(format!(
            "gradient has {} parameter slots, block has {}",
            analytic.len(),
            fd.len()
        )));
    }
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut report = FdReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance,
        pass: true,
    };
    for (slot, (a_vec, fd_vec)) in analytic.iter().zip(&fd).enumerate() {
        if a_vec.len() != fd_vec.len() {
            return Err(Error::Contract(format!(
                "slot {slot}: gradient has {} entries, parameter has {}",
                a_vec.len(),
                fd_vec.len()
            )));
        }
        for (idx, (&a, &f)) in a_vec.iter().zip(fd_vec).enumerate() {
            let scale = a.abs().max(f.abs()).max(ERROR_SCALE_FLOOR);
            let rel = (a - f).abs() / scale;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((names[slot].clone(), idx));
            }
        }
    }
    report.pass = report.max_rel_error < tolerance;
    Ok(report)
}

/// Full check: tape gradient vs central differences over every element.
pub fn finite_diff_check<M: ParamBlock>(
    model: &mut M,
    loss: &impl TapeLoss<M>,
    tolerance: f64,
) -> Result<FdReport> {
    let analytic = analytic_gradient(model, loss)?;
    finite_diff_compare(model, loss, &analytic, tolerance)
}

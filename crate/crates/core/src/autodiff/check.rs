//! Central finite-difference gradient oracle.

use alloc::vec::Vec;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// A tensor-to-scalar function that can be built on a tape of either precision.
pub trait ScalarFn {
    fn eval<S: Real>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Linear index of the element with the largest relative error.
    pub worst_index: usize,
    pub analytic: Tensor<f32>,
    pub numeric: Vec<f64>,
}

fn scalar_of<S: Real>(tape: &Tape<S>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item().as_f64())
}

/// Compare the `f32` reverse-mode gradient of `f` at `x` against central
/// differences `(f(x+eps·e) − f(x−eps·e)) / (2·eps)`.
///
/// The differences are evaluated on an `f64` tape so rounding in the loss
/// does not swamp small gradient entries. Relative error per element is
/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn finite_diff_check<F: ScalarFn>(f: &F, x: &Tensor<f32>, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::arg("finite_diff_check: eps must be positive"));
    }
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x.clone());
    let out = f.eval(&mut tape, xv)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic = match tape.grad(xv) {
        Some(g) => g.clone(),
        None => x.zeros_like(),
    };

    let base: Tensor<f64> = x.cast();
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = base.clone();
    for i in 0..x.len() {
        let orig = base.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_f64(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_f64(f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let mut max_rel_err = 0.0f64;
    let mut max_abs_err = 0.0f64;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
        let a = a as f64;
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(1e-6);
        max_abs_err = max_abs_err.max(abs);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        max_abs_err,
        worst_index,
        analytic,
        numeric,
    })
}

fn eval_f64<F: ScalarFn>(f: &F, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let out = f.eval(&mut tape, xv)?;
    scalar_of(&tape, out)
}

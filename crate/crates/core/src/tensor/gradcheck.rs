//! Central finite-difference verification of tape gradients.

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn eval<T: Real, F>(f: &F, x: &Tensor<T>) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("finite_diff_check", "function must be scalar-valued"));
    }
    Ok(tape.item(out).as_f64())
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over the
/// elements of `x`.
pub fn finite_diff_check<T: Real, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, step, &all)
}

/// As [`finite_diff_check`], restricted to the listed element indices.
pub fn finite_diff_check_at<T: Real, F>(f: F, x: &Tensor<T>, step: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let base = tape.item(out).as_f64();
    if eval(&f, x)?.to_bits() != base.to_bits() {
        return Err(Error::GradCheck("function is not deterministic".into()));
    }

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::lit(orig.as_f64() + step);
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = T::lit(orig.as_f64() - step);
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i].as_f64();
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

//! Composite training objective.
//!
//! Every term is recorded on a [`Tape`], so gradients come from the same
//! graph that computes the value. Per-pixel means run over every element of
//! the operands, which makes a batch of equal-sized samples equivalent to the
//! mean of per-sample losses.

use crate::error::{Error, Result};
use crate::tensor::{Real, SsimConstants, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_b: f64,
    pub w_a: f64,
    pub w_p: f64,
    pub w_c: f64,
    pub lambda_circ: f64,
    pub lambda_g: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_b: 1.0, w_a: 1.0, w_p: 1.3, w_c: 0.1, lambda_circ: 0.6, lambda_g: 0.12, lambda_s: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_b, self.w_a, self.w_p, self.w_c, self.lambda_circ, self.lambda_g, self.lambda_s];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!("loss weights must be finite and nonnegative: {self:?}")))
        }
    }
}

/// Pixel metric used by the base term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BaseMetric {
    #[default]
    Mse,
    Mae,
}

/// Scalar values of every term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub base: f64,
    pub amp: f64,
    pub phase: f64,
    pub cons: f64,
    pub circular: f64,
    pub grad_amp: f64,
    pub ssim_amp: f64,
    pub grad_phase: f64,
    pub ssim_phase: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 10] =
        ["base", "amp", "phase", "cons", "circular", "grad_amp", "ssim_amp", "grad_phase", "ssim_phase", "total"];

    pub fn values(&self) -> [f64; 10] {
        [
            self.base,
            self.amp,
            self.phase,
            self.cons,
            self.circular,
            self.grad_amp,
            self.ssim_amp,
            self.grad_phase,
            self.ssim_phase,
            self.total,
        ]
    }

    pub fn from_values(v: [f64; 10]) -> Self {
        LossBreakdown {
            base: v[0],
            amp: v[1],
            phase: v[2],
            cons: v[3],
            circular: v[4],
            grad_amp: v[5],
            ssim_amp: v[6],
            grad_phase: v[7],
            ssim_phase: v[8],
            total: v[9],
        }
    }

    /// Elementwise running mean helper: `self + (other − self)/n`.
    pub fn accumulate(&mut self, other: &LossBreakdown, n: usize) {
        let mut v = self.values();
        for (a, b) in v.iter_mut().zip(other.values()) {
            *a += (b - *a) / n as f64;
        }
        *self = LossBreakdown::from_values(v);
    }
}

pub fn mse<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    let d = tape.sub(x, x_hat)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

pub fn mae<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    let d = tape.sub(x, x_hat)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

pub fn pixel_loss<T: Real>(tape: &mut Tape<T>, metric: BaseMetric, x: Var, x_hat: Var) -> Result<Var> {
    match metric {
        BaseMetric::Mse => mse(tape, x, x_hat),
        BaseMetric::Mae => mae(tape, x, x_hat),
    }
}

/// `ℓ(A,Â) + ℓ(c,ĉ) + ℓ(s,ŝ)`.
#[allow(clippy::too_many_arguments)]
pub fn base_loss<T: Real>(
    tape: &mut Tape<T>,
    metric: BaseMetric,
    a: Var,
    a_hat: Var,
    c: Var,
    c_hat: Var,
    s: Var,
    s_hat: Var,
) -> Result<Var> {
    let la = pixel_loss(tape, metric, a, a_hat)?;
    let lc = pixel_loss(tape, metric, c, c_hat)?;
    let ls = pixel_loss(tape, metric, s, s_hat)?;
    tape.weighted_sum(&[(1.0, la), (1.0, lc), (1.0, ls)])
}

/// Mean absolute mismatch of horizontal plus vertical forward differences.
pub fn grad_loss<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    let (h, w) = tape.value(x).hw();
    if h < 2 || w < 2 {
        return Err(Error::shape("grad_loss", format!("needs at least 2x2, got {h}x{w}")));
    }
    let gx = tape.diff_x(x)?;
    let gx_hat = tape.diff_x(x_hat)?;
    let horizontal = mae(tape, gx, gx_hat)?;
    let gy = tape.diff_y(x)?;
    let gy_hat = tape.diff_y(x_hat)?;
    let vertical = mae(tape, gy, gy_hat)?;
    tape.add(horizontal, vertical)
}

/// Gaussian-window SSIM on data range 1.
pub fn ssim<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    tape.ssim(x, x_hat, SsimConstants::default())
}

pub fn ssim_loss<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    let s = ssim(tape, x, x_hat)?;
    let neg = tape.scale(s, -1.0)?;
    tape.offset(neg, 1.0)
}

/// `mean(1 − (c·ĉ + s·ŝ))`, i.e. `mean(1 − cos Δφ)` for unit-norm inputs.
pub fn circular_loss<T: Real>(tape: &mut Tape<T>, c: Var, c_hat: Var, s: Var, s_hat: Var) -> Result<Var> {
    let cc = tape.mul(c, c_hat)?;
    let ss = tape.mul(s, s_hat)?;
    let dot = tape.add(cc, ss)?;
    let m = tape.mean(dot)?;
    let neg = tape.scale(m, -1.0)?;
    tape.offset(neg, 1.0)
}

/// `mean((ĉ² + ŝ² − 1)²)` on pre-projection outputs.
pub fn consistency_loss<T: Real>(tape: &mut Tape<T>, c_hat: Var, s_hat: Var) -> Result<Var> {
    let c2 = tape.square(c_hat)?;
    let s2 = tape.square(s_hat)?;
    let r2 = tape.add(c2, s2)?;
    let dev = tape.offset(r2, -1.0)?;
    let sq = tape.square(dev)?;
    tape.mean(sq)
}

/// Network outputs for the circular representation.
#[derive(Clone, Copy, Debug)]
pub struct CircularOutputs {
    pub amp: Var,
    pub c_pre: Var,
    pub s_pre: Var,
    /// Projected coordinates (equal to the pre-projection ones when the
    /// projection is disabled).
    pub c: Var,
    pub s: Var,
}

/// Ground truth registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TargetVars {
    pub amp: Var,
    pub phase: Var,
    pub c: Var,
    pub s: Var,
}

impl TargetVars {
    pub fn register<T: Real>(tape: &mut Tape<T>, amp: Tensor<T>, phase: Tensor<T>, c: Tensor<T>, s: Tensor<T>) -> Self {
        TargetVars { amp: tape.constant(amp), phase: tape.constant(phase), c: tape.constant(c), s: tape.constant(s) }
    }
}

/// Every term as a tape variable; `total` is the node to differentiate.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub base: Var,
    pub amp: Var,
    pub phase: Var,
    pub cons: Var,
    pub circular: Var,
    pub grad_amp: Var,
    pub ssim_amp: Var,
    pub grad_phase: Var,
    pub ssim_phase: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Var| tape.item(x).as_f64();
        LossBreakdown {
            base: v(self.base),
            amp: v(self.amp),
            phase: v(self.phase),
            cons: v(self.cons),
            circular: v(self.circular),
            grad_amp: v(self.grad_amp),
            ssim_amp: v(self.ssim_amp),
            grad_phase: v(self.grad_phase),
            ssim_phase: v(self.ssim_phase),
            total: v(self.total),
        }
    }
}

fn amp_terms<T: Real>(tape: &mut Tape<T>, w: &LossWeights, a: Var, a_hat: Var) -> Result<(Var, Var, Var)> {
    let grad_amp = grad_loss(tape, a, a_hat)?;
    let ssim_amp = ssim_loss(tape, a, a_hat)?;
    let amp = tape.weighted_sum(&[(w.lambda_g, grad_amp), (w.lambda_s, ssim_amp)])?;
    Ok((amp, grad_amp, ssim_amp))
}

/// Full objective for the circular representation.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: &CircularOutputs,
    target: &TargetVars,
    w: &LossWeights,
    metric: BaseMetric,
) -> Result<LossTerms> {
    let base = base_loss(tape, metric, target.amp, pred.amp, target.c, pred.c_pre, target.s, pred.s_pre)?;
    let (amp, grad_amp, ssim_amp) = amp_terms(tape, w, target.amp, pred.amp)?;
    let gc = grad_loss(tape, target.c, pred.c)?;
    let gs = grad_loss(tape, target.s, pred.s)?;
    let grad_phase = tape.add(gc, gs)?;
    let sc = ssim_loss(tape, target.c, pred.c)?;
    let ss = ssim_loss(tape, target.s, pred.s)?;
    let ssim_phase = tape.add(sc, ss)?;
    let circular = circular_loss(tape, target.c, pred.c, target.s, pred.s)?;
    let phase = tape.weighted_sum(&[(w.lambda_g, grad_phase), (w.lambda_s, ssim_phase), (w.lambda_circ, circular)])?;
    let cons = consistency_loss(tape, pred.c_pre, pred.s_pre)?;
    let total = tape.weighted_sum(&[(w.w_b, base), (w.w_a, amp), (w.w_p, phase), (w.w_c, cons)])?;
    Ok(LossTerms { base, amp, phase, cons, circular, grad_amp, ssim_amp, grad_phase, ssim_phase, total })
}

/// Objective for the scalar-phase baseline: Euclidean loss on the raw phase
/// inside the base term, amplitude terms as usual, no circular terms.
pub fn scalar_phase_loss<T: Real>(
    tape: &mut Tape<T>,
    amp_hat: Var,
    phase_hat: Var,
    target: &TargetVars,
    w: &LossWeights,
    metric: BaseMetric,
) -> Result<LossTerms> {
    let la = pixel_loss(tape, metric, target.amp, amp_hat)?;
    let lp = pixel_loss(tape, metric, target.phase, phase_hat)?;
    let base = tape.add(la, lp)?;
    let (amp, grad_amp, ssim_amp) = amp_terms(tape, w, target.amp, amp_hat)?;
    let zero = tape.constant(Tensor::scalar(T::zero()));
    let total = tape.weighted_sum(&[(w.w_b, base), (w.w_a, amp)])?;
    Ok(LossTerms {
        base,
        amp,
        phase: zero,
        cons: zero,
        circular: zero,
        grad_amp,
        ssim_amp,
        grad_phase: zero,
        ssim_phase: zero,
        total,
    })
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StitchConfig {
    pub patch: usize,
    pub step: usize,
    pub weight_floor: f64,
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig { patch: 32, step: 8, weight_floor: 1e-6 }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step == 0 || self.step > self.patch || !(self.weight_floor >= 0.0) {
            return Err(Error::invalid(format!("invalid stitch config {self:?}")));
        }
        Ok(())
    }
}

/// `(1 − d/d_max)² + floor` with `d` measured from the patch centre and
/// `d_max` the centre-to-corner distance, so corner pixels carry only the floor.
pub fn stitch_kernel(n: usize, floor: f64) -> Tensor<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let d_max = c * std::f64::consts::SQRT_2;
    Tensor::from_fn(&[n, n], |i| {
        let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
        let base = if d_max > 0.0 { (1.0 - y.hypot(x) / d_max).max(0.0).powi(2) } else { 1.0 };
        base + floor
    })
}

/// Weighted full-field assembly. Unobserved pixels are zero with coverage 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Stitched {
    pub amplitude: Tensor,
    pub phase: Tensor,
    /// 1 where at least one patch contributed positive weight, else 0.
    pub coverage: Tensor,
}

impl Stitched {
    pub fn covered(&self) -> impl Iterator<Item = usize> + '_ {
        self.coverage.data().iter().enumerate().filter(|(_, &c)| c > 0.0).map(|(i, _)| i)
    }

    /// Inclusive-exclusive `(y0, y1, x0, x1)` bounds of the covered region.
    pub fn coverage_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let (_, w) = self.coverage.hw();
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for i in self.covered() {
            let (y, x) = (i / w, i % w);
            b = Some(match b {
                None => (y, y + 1, x, x + 1),
                Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y + 1), x0.min(x), x1.max(x + 1)),
            });
        }
        b
    }
}

/// Blends `(amplitude, phase)` patches placed with their top-left corner at
/// `positions` (`(y, x)`) into an `h×w` canvas. Phase is averaged as unit
/// vectors and recovered with `atan2`.
pub fn stitch(
    patches: &[(&Tensor, &Tensor)],
    positions: &[(usize, usize)],
    (h, w): (usize, usize),
    cfg: &StitchConfig,
) -> Result<Stitched> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::Empty("stitch"));
    }
    if patches.len() != positions.len() {
        return Err(Error::shape("stitch", format!("{} patches, {} positions", patches.len(), positions.len())));
    }
    let n = cfg.patch;
    let kernel = stitch_kernel(n, cfg.weight_floor);
    let mut acc_a = vec![0.0f64; h * w];
    let mut acc_c = vec![0.0f64; h * w];
    let mut acc_s = vec![0.0f64; h * w];
    let mut acc_w = vec![0.0f64; h * w];
    for (&(amp, phase), &(y0, x0)) in patches.iter().zip(positions) {
        if amp.shape() != [n, n] || phase.shape() != [n, n] {
            return Err(Error::shape("stitch", format!("patch {:?}/{:?}, expected {n}x{n}", amp.shape(), phase.shape())));
        }
        if y0 + n > h || x0 + n > w {
            return Err(Error::invalid(format!("patch at ({y0},{x0}) leaves the {h}x{w} canvas")));
        }
        for py in 0..n {
            for px in 0..n {
                let k = py * n + px;
                let wt = kernel.data()[k];
                let o = (y0 + py) * w + x0 + px;
                let p = phase.data()[k] as f64;
                acc_a[o] += wt * amp.data()[k] as f64;
                acc_c[o] += wt * p.cos();
                acc_s[o] += wt * p.sin();
                acc_w[o] += wt;
            }
        }
    }
    let mut amplitude = vec![0.0f32; h * w];
    let mut phase = vec![0.0f32; h * w];
    let mut coverage = vec![0.0f32; h * w];
    for i in 0..h * w {
        if acc_w[i] > 0.0 {
            amplitude[i] = (acc_a[i] / acc_w[i]) as f32;
            phase[i] = crate::circphase::wrap(acc_s[i].atan2(acc_c[i])) as f32;
            coverage[i] = 1.0;
        }
    }
    Ok(Stitched {
        amplitude: Tensor::new(&[h, w], amplitude)?,
        phase: Tensor::new(&[h, w], phase)?,
        coverage: Tensor::new(&[h, w], coverage)?,
    })
}

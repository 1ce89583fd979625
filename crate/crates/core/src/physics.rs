//! Far-field forward model: probe synthesis, exit waves, orthonormal 2-D FFT
//! and detector noise.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2-D complex field stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    height: usize,
    width: usize,
    re: Vec<f32>,
    im: Vec<f32>,
}

impl ComplexGrid {
    pub fn new(height: usize, width: usize, re: Vec<f32>, im: Vec<f32>) -> Result<Self> {
        if re.len() != height * width || im.len() != height * width {
            return Err(Error::shape("complex_grid", format!("{height}x{width} vs {}/{}", re.len(), im.len())));
        }
        if !re.iter().chain(&im).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("complex_grid".into()));
        }
        Ok(ComplexGrid { height, width, re, im })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ComplexGrid { height, width, re: vec![0.0; height * width], im: vec![0.0; height * width] }
    }

    /// `A·exp(iφ)` from amplitude and phase planes of equal shape.
    pub fn from_polar(amplitude: &Tensor, phase: &Tensor) -> Result<Self> {
        if amplitude.shape() != phase.shape() || amplitude.shape().len() != 2 {
            return Err(Error::shape("from_polar", format!("{:?} vs {:?}", amplitude.shape(), phase.shape())));
        }
        let (h, w) = amplitude.hw();
        let (re, im) = amplitude
            .data()
            .iter()
            .zip(phase.data())
            .map(|(&a, &p)| {
                let (a, p) = (a as f64, p as f64);
                ((a * p.cos()) as f32, (a * p.sin()) as f32)
            })
            .unzip();
        ComplexGrid::new(h, w, re, im)
    }

    pub(crate) fn from_complex(height: usize, width: usize, values: &[Complex64]) -> Result<Self> {
        let re = values.iter().map(|c| c.re as f32).collect();
        let im = values.iter().map(|c| c.im as f32).collect();
        ComplexGrid::new(height, width, re, im)
    }

    pub(crate) fn to_complex(&self) -> Vec<Complex64> {
        self.re.iter().zip(&self.im).map(|(&r, &i)| Complex64::new(r as f64, i as f64)).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn re(&self) -> &[f32] {
        &self.re
    }

    pub fn im(&self) -> &[f32] {
        &self.im
    }

    pub fn get(&self, y: usize, x: usize) -> Complex64 {
        let i = y * self.width + x;
        Complex64::new(self.re[i] as f64, self.im[i] as f64)
    }

    /// `Σ |z|²` in `f64`.
    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(&r, &i)| (r as f64).powi(2) + (i as f64).powi(2)).sum()
    }

    pub fn amplitude(&self) -> Tensor {
        let d = self.re.iter().zip(&self.im).map(|(&r, &i)| (r as f64).hypot(i as f64) as f32).collect();
        Tensor::new(&[self.height, self.width], d).expect("shape")
    }

    pub fn phase(&self) -> Tensor {
        let d = self.re.iter().zip(&self.im).map(|(&r, &i)| (i as f64).atan2(r as f64) as f32).collect();
        Tensor::new(&[self.height, self.width], d).expect("shape")
    }

    /// Copies the `h×w` window whose top-left corner is `(y, x)`.
    pub fn window(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::shape("window", format!("{h}x{w} at ({y},{x}) outside {}x{}", self.height, self.width)));
        }
        let mut re = Vec::with_capacity(h * w);
        let mut im = Vec::with_capacity(h * w);
        for r in y..y + h {
            re.extend_from_slice(&self.re[r * self.width + x..][..w]);
            im.extend_from_slice(&self.im[r * self.width + x..][..w]);
        }
        Ok(ComplexGrid { height: h, width: w, re, im })
    }

    /// `H×W×2` real tensor holding (re, im) pairs.
    pub fn to_tensor(&self) -> Tensor {
        let d = self.re.iter().zip(&self.im).flat_map(|(&r, &i)| [r, i]).collect();
        Tensor::new(&[self.height, self.width, 2], d).expect("shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [h, w, 2] = *t.shape() else {
            return Err(Error::shape("complex_grid", format!("expected HxWx2, got {:?}", t.shape())));
        };
        let (re, im) = t.data().chunks(2).map(|p| (p[0], p[1])).unzip();
        ComplexGrid::new(h, w, re, im)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FftDirection {
    Forward,
    Inverse,
}

/// Reusable row/column plans for one grid size; orthonormal scaling.
pub struct Fft2Plan {
    height: usize,
    width: usize,
    rows: [Arc<dyn Fft<f64>>; 2],
    cols: [Arc<dyn Fft<f64>>; 2],
}

impl Fft2Plan {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Empty("fft2_ortho"));
        }
        let mut planner = FftPlanner::new();
        Ok(Fft2Plan {
            height,
            width,
            rows: [planner.plan_fft_forward(width), planner.plan_fft_inverse(width)],
            cols: [planner.plan_fft_forward(height), planner.plan_fft_inverse(height)],
        })
    }

    /// In-place transform of a row-major `height×width` buffer.
    pub fn process(&self, data: &mut [Complex64], direction: FftDirection) {
        assert_eq!(data.len(), self.height * self.width);
        let d = direction as usize;
        self.rows[d].process(data);
        let mut column = vec![Complex64::default(); self.height];
        for x in 0..self.width {
            for (y, c) in column.iter_mut().enumerate() {
                *c = data[y * self.width + x];
            }
            self.cols[d].process(&mut column);
            for (y, c) in column.iter().enumerate() {
                data[y * self.width + x] = *c;
            }
        }
        let norm = 1.0 / ((self.height * self.width) as f64).sqrt();
        data.iter_mut().for_each(|v| *v *= norm);
    }
}

/// Orthonormal 2-D DFT (`1/sqrt(H·W)` in both directions).
pub fn fft2_ortho(field: &ComplexGrid, direction: FftDirection) -> Result<ComplexGrid> {
    let plan = Fft2Plan::new(field.height, field.width)?;
    let mut buf = field.to_complex();
    plan.process(&mut buf, direction);
    ComplexGrid::from_complex(field.height, field.width, &buf)
}

/// Shape parameters of the synthetic probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeParams {
    pub size: usize,
    /// Hard aperture radius in pixels.
    pub radius: f64,
    /// Gaussian amplitude apodisation in pixels.
    pub sigma: f64,
    /// Quadratic phase coefficient in rad/pixel².
    pub curvature: f64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams { size: 32, radius: 13.0, sigma: 10.0, curvature: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub grid: ComplexGrid,
    pub params: ProbeParams,
}

impl Probe {
    pub fn size(&self) -> usize {
        self.grid.height
    }

    pub fn intensity(&self) -> Vec<f64> {
        self.grid.re.iter().zip(&self.grid.im).map(|(&r, &i)| (r as f64).powi(2) + (i as f64).powi(2)).collect()
    }

    /// Rebuilds a probe from a stored field; parameters are unknown for
    /// imported probes and default to zeros.
    pub fn from_grid(grid: ComplexGrid) -> Result<Self> {
        if grid.height != grid.width {
            return Err(Error::invalid("probe grid must be square"));
        }
        if grid.energy() <= 0.0 {
            return Err(Error::invalid("probe has zero intensity"));
        }
        let size = grid.height;
        Ok(Probe { grid, params: ProbeParams { size, radius: 0.0, sigma: 0.0, curvature: 0.0 } })
    }
}

/// Apodised circular aperture with quadratic phase:
/// `P(r) = [r ≤ radius]·exp(-r²/(2σ²))·exp(i·curvature·r²)`, `r` measured from
/// the grid centre. `_seed` is reserved for optional speckle.
pub fn make_probe(params: ProbeParams, _seed: u64) -> Result<Probe> {
    let ProbeParams { size, radius, sigma, curvature } = params;
    if size == 0 || !(radius > 0.0) {
        return Err(Error::invalid(format!("degenerate probe radius {radius} for size {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("probe sigma must be positive, got {sigma}")));
    }
    let c = (size as f64 - 1.0) / 2.0;
    let mut re = Vec::with_capacity(size * size);
    let mut im = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let amp = if r2.sqrt() <= radius { (-r2 / (2.0 * sigma * sigma)).exp() } else { 0.0 };
            let ph = curvature * r2;
            re.push((amp * ph.cos()) as f32);
            im.push((amp * ph.sin()) as f32);
        }
    }
    let grid = ComplexGrid::new(size, size, re, im)?;
    if grid.energy() <= 0.0 {
        return Err(Error::invalid("probe has zero intensity"));
    }
    Ok(Probe { grid, params })
}

/// `ψ = P·O` elementwise.
pub fn exit_wave(object_patch: &ComplexGrid, probe: &Probe) -> Result<ComplexGrid> {
    let p = &probe.grid;
    if object_patch.height != p.height || object_patch.width != p.width {
        return Err(Error::shape(
            "exit_wave",
            format!("patch {}x{} vs probe {}x{}", object_patch.height, object_patch.width, p.height, p.width),
        ));
    }
    let (re, im) = (0..p.re.len())
        .map(|i| {
            let o = Complex64::new(object_patch.re[i] as f64, object_patch.im[i] as f64);
            let q = Complex64::new(p.re[i] as f64, p.im[i] as f64);
            let z = o * q;
            (z.re as f32, z.im as f32)
        })
        .unzip();
    ComplexGrid::new(p.height, p.width, re, im)
}

/// `I = |F{ψ}|²` under the orthonormal transform.
pub fn diffract(exit: &ComplexGrid) -> Result<Tensor> {
    let plan = Fft2Plan::new(exit.height, exit.width)?;
    diffract_with(&plan, exit)
}

pub(crate) fn diffract_with(plan: &Fft2Plan, exit: &ComplexGrid) -> Result<Tensor> {
    let mut buf = exit.to_complex();
    plan.process(&mut buf, FftDirection::Forward);
    let data = buf.iter().map(|z| z.norm_sqr() as f32).collect();
    Tensor::new(&[exit.height, exit.width], data)
}

/// Photon shot noise plus Gaussian read noise.
///
/// The frame is scaled so that `reference_max` (the dataset-wide maximum)
/// maps to `peak_photons` expected counts, Poisson-sampled, scaled back, and
/// then perturbed by zero-mean Gaussian noise of std `read_sigma` in the
/// original intensity units. Results are clamped at zero.
pub fn add_noise(intensity: &Tensor, reference_max: f64, peak_photons: f64, read_sigma: f64, seed: u64) -> Result<Tensor> {
    if !(peak_photons > 0.0) || !(read_sigma >= 0.0) {
        return Err(Error::invalid(format!("peak_photons {peak_photons} / read_sigma {read_sigma}")));
    }
    if intensity.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("intensity must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if reference_max > 0.0 { peak_photons / reference_max } else { 0.0 };
    let read = (read_sigma > 0.0).then(|| Normal::new(0.0, read_sigma).expect("valid sigma"));
    let out = intensity
        .data()
        .iter()
        .map(|&v| {
            let lambda = v as f64 * scale;
            let counts = if lambda > 0.0 {
                Poisson::new(lambda).map(|p| p.sample(&mut rng)).unwrap_or(lambda)
            } else {
                0.0
            };
            let mut value = if scale > 0.0 { counts / scale } else { 0.0 };
            if let Some(n) = &read {
                value += n.sample(&mut rng);
            }
            value.max(0.0) as f32
        })
        .collect();
    Tensor::new(intensity.shape(), out)
}

/// Intensity-weighted support diameter `2·sqrt(2·⟨r²⟩)`; equals the diameter
/// for a uniform disc.
pub fn support_diameter(probe: &Probe) -> f64 {
    let n = probe.size();
    let c = (n as f64 - 1.0) / 2.0;
    let inten = probe.intensity();
    let (mut m0, mut m2) = (0.0, 0.0);
    for y in 0..n {
        for x in 0..n {
            let i = inten[y * n + x];
            m0 += i;
            m2 += i * ((y as f64 - c).powi(2) + (x as f64 - c).powi(2));
        }
    }
    2.0 * (2.0 * m2 / m0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_probe_rejected() {
        let p = ProbeParams { radius: 0.0, ..Default::default() };
        assert!(make_probe(p, 0).is_err());
        assert!(fft2_ortho(&ComplexGrid::zeros(0, 4), FftDirection::Forward).is_err());
    }

    #[test]
    fn exit_wave_size_mismatch() {
        let probe = make_probe(ProbeParams::default(), 0).unwrap();
        assert!(exit_wave(&ComplexGrid::zeros(16, 16), &probe).is_err());
    }
}

//! Known-probe ePIE: the classical iterative reference reconstruction.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::circphase::{circular_mean, wrap};
use crate::error::{Error, Result};
use crate::physics::{ComplexGrid, Fft2Plan, FftDirection};
use crate::tensor::Tensor;

/// Fourier moduli below this keep their value in the magnitude projection.
pub const MODULUS_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpieConfig {
    pub iters: usize,
    pub beta: f64,
    pub seed: u64,
    /// Draw a fresh visiting order every sweep instead of reusing one
    /// seeded permutation.
    pub reshuffle: bool,
}

impl Default for EpieConfig {
    fn default() -> Self {
        EpieConfig { iters: 300, beta: 0.9, seed: 0, reshuffle: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpieState {
    pub object: ComplexGrid,
    pub probe: ComplexGrid,
    pub iterations: usize,
    /// Normalised data error of each sweep.
    pub errors: Vec<f64>,
}

impl EpieState {
    pub fn error_history_text(&self) -> String {
        let mut s = String::from("# sweep data_error\n");
        for (i, e) in self.errors.iter().enumerate() {
            writeln!(s, "{} {e:e}", i + 1).unwrap();
        }
        s
    }
}

/// Replaces every modulus with `sqrt_i`, keeping the phase.
pub fn fourier_project(spectrum: &mut [Complex64], sqrt_i: &[f64]) {
    for (v, &m) in spectrum.iter_mut().zip(sqrt_i) {
        let a = v.norm();
        if a >= MODULUS_FLOOR {
            *v *= m / a;
        }
    }
}

/// Sequential object updates over randomly ordered scan positions (`(y, x)`
/// window corners), with the probe held fixed and the object starting at 1.
pub fn epie_reconstruct(
    frames: &[&Tensor],
    positions: &[(usize, usize)],
    probe: &ComplexGrid,
    (h, w): (usize, usize),
    cfg: &EpieConfig,
) -> Result<EpieState> {
    if !(cfg.beta > 0.0 && cfg.beta <= 1.0) {
        return Err(Error::invalid(format!("beta {} outside (0, 1]", cfg.beta)));
    }
    if frames.len() != positions.len() {
        return Err(Error::shape("epie", format!("{} frames, {} positions", frames.len(), positions.len())));
    }
    let n = probe.height();
    if probe.width() != n {
        return Err(Error::shape("epie", "probe must be square"));
    }
    let p = probe.to_complex();
    let max_p2 = p.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
    if max_p2 == 0.0 {
        return Err(Error::invalid("degenerate probe: max |P|^2 is zero"));
    }
    let mut sqrt_frames = Vec::with_capacity(frames.len());
    for (f, &(y, x)) in frames.iter().zip(positions) {
        if f.shape() != [n, n] {
            return Err(Error::shape("epie", format!("frame {:?} vs probe {n}x{n}", f.shape())));
        }
        if y + n > h || x + n > w {
            return Err(Error::invalid(format!("window at ({y},{x}) leaves the {h}x{w} canvas")));
        }
        if f.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::NonFinite("epie frame".into()));
        }
        sqrt_frames.push(f.data().iter().map(|&v| (v as f64).sqrt()).collect::<Vec<f64>>());
    }
    let plan = Fft2Plan::new(n, n)?;
    let mut obj = vec![Complex64::new(1.0, 0.0); h * w];
    let mut errors = Vec::with_capacity(cfg.iters);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut psi = vec![Complex64::default(); n * n];
    let mut spec = vec![Complex64::default(); n * n];
    let energy: f64 = sqrt_frames.iter().flatten().map(|v| v * v).sum();
    for sweep in 0..cfg.iters {
        if sweep == 0 || cfg.reshuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (sweep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);
        }
        for &j in &order {
            let (y0, x0) = positions[j];
            for py in 0..n {
                for px in 0..n {
                    psi[py * n + px] = p[py * n + px] * obj[(y0 + py) * w + x0 + px];
                }
            }
            spec.copy_from_slice(&psi);
            plan.process(&mut spec, FftDirection::Forward);
            fourier_project(&mut spec, &sqrt_frames[j]);
            plan.process(&mut spec, FftDirection::Inverse);
            for py in 0..n {
                for px in 0..n {
                    let k = py * n + px;
                    obj[(y0 + py) * w + x0 + px] += p[k].conj() * (cfg.beta / max_p2) * (spec[k] - psi[k]);
                }
            }
        }
        let misfit = data_misfit(&plan, &p, &obj, w, positions, &sqrt_frames, &mut spec);
        let e = if energy > 0.0 { misfit / energy } else { misfit };
        if !e.is_finite() {
            return Err(Error::NonFinite(format!("epie data error at sweep {}", sweep + 1)));
        }
        errors.push(e);
    }
    Ok(EpieState { object: ComplexGrid::from_complex(h, w, &obj)?, probe: probe.clone(), iterations: cfg.iters, errors })
}

/// `Σ_j ‖√I_j − |FFT(P·O_j)|‖²` for the current object.
fn data_misfit(
    plan: &Fft2Plan,
    p: &[Complex64],
    obj: &[Complex64],
    w: usize,
    positions: &[(usize, usize)],
    sqrt_frames: &[Vec<f64>],
    spec: &mut [Complex64],
) -> f64 {
    let n = plan_side(p);
    let mut misfit = 0.0;
    for (&(y0, x0), m) in positions.iter().zip(sqrt_frames) {
        for py in 0..n {
            for px in 0..n {
                spec[py * n + px] = p[py * n + px] * obj[(y0 + py) * w + x0 + px];
            }
        }
        plan.process(spec, FftDirection::Forward);
        misfit += spec.iter().zip(m).map(|(v, m)| (m - v.norm()).powi(2)).sum::<f64>();
    }
    misfit
}

fn plan_side(p: &[Complex64]) -> usize {
    (p.len() as f64).sqrt().round() as usize
}

/// Pixels whose accumulated probe intensity reaches `fraction` of its maximum.
pub fn illumination_mask(probe: &ComplexGrid, positions: &[(usize, usize)], (h, w): (usize, usize), fraction: f64) -> Result<Tensor> {
    let n = probe.height();
    let intensity: Vec<f64> = probe.to_complex().iter().map(|v| v.norm_sqr()).collect();
    let mut acc = vec![0.0f64; h * w];
    for &(y0, x0) in positions {
        if y0 + n > h || x0 + n > w {
            return Err(Error::invalid(format!("window at ({y0},{x0}) leaves the {h}x{w} canvas")));
        }
        for py in 0..n {
            for px in 0..n {
                acc[(y0 + py) * w + x0 + px] += intensity[py * n + px];
            }
        }
    }
    let max = acc.iter().copied().fold(0.0, f64::max);
    Tensor::new(&[h, w], acc.iter().map(|&a| if max > 0.0 && a >= fraction * max { 1.0 } else { 0.0 }).collect())
}

/// Agreement of a reconstruction with ground truth inside `mask`, after
/// removing the single global phase offset (circular mean of the residual).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpieComparison {
    pub phase_offset: f64,
    pub phase_mae: f64,
    pub amplitude_mse: f64,
    pub pixels: usize,
}

pub fn compare_to_truth(estimate: &ComplexGrid, amplitude: &Tensor, phase: &Tensor, mask: &Tensor) -> Result<EpieComparison> {
    let shape = [estimate.height(), estimate.width()];
    if amplitude.shape() != shape || phase.shape() != shape || mask.shape() != shape {
        return Err(Error::shape("compare_to_truth", format!("estimate {shape:?}, truth {:?}", amplitude.shape())));
    }
    let est_amp = estimate.amplitude();
    let est_phase = estimate.phase();
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i] > 0.0).collect();
    if idx.is_empty() {
        return Err(Error::Empty("illuminated region"));
    }
    let residual = |i: usize| wrap(est_phase.data()[i] as f64 - phase.data()[i] as f64);
    let offset = circular_mean(idx.iter().map(|&i| residual(i))).unwrap_or(0.0);
    let n = idx.len() as f64;
    let phase_mae = idx.iter().map(|&i| wrap(residual(i) - offset).abs()).sum::<f64>() / n;
    let amplitude_mse = idx.iter().map(|&i| (est_amp.data()[i] as f64 - amplitude.data()[i] as f64).powi(2)).sum::<f64>() / n;
    Ok(EpieComparison { phase_offset: offset, phase_mae, amplitude_mse, pixels: idx.len() })
}

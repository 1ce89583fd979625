use std::fmt::Write as _;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::physics::{Fft2Plan, FftDirection};
use crate::tensor::Tensor;

/// Percent of radius-weighted spectral energy per band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandEnergies {
    pub low: f64,
    pub mid: f64,
    pub high: f64,
}

impl BandEnergies {
    pub fn total(&self) -> f64 {
        self.low + self.mid + self.high
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Psd {
    /// Mean `|F|²` per integer radius bin, starting at 0.
    pub radial: Vec<f64>,
    pub bands: BandEnergies,
}

impl Psd {
    /// `radius_bin psd` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# radius_bin psd\n");
        for (r, p) in self.radial.iter().enumerate() {
            writeln!(s, "{r} {p:e}").unwrap();
        }
        s
    }
}

/// Radially averaged power spectrum of a mean-removed square grid and its
/// low/mid/high split at one and two thirds of Nyquist. Bins beyond Nyquist
/// (the spectrum corners) count as high.
pub fn radial_psd(x: &Tensor) -> Result<Psd> {
    let (h, w) = x.hw();
    if x.shape().len() != 2 || h != w || h == 0 {
        return Err(Error::shape("radial_psd", format!("needs a square grid, got {:?}", x.shape())));
    }
    let n = h;
    let mean = x.mean_f64();
    let mut buf: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v as f64 - mean, 0.0)).collect();
    Fft2Plan::new(n, n)?.process(&mut buf, FftDirection::Forward);
    let centred = |k: usize| if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
    let max_bin = ((n as f64 / 2.0) * std::f64::consts::SQRT_2).round() as usize;
    let mut sums = vec![0.0; max_bin + 1];
    let mut counts = vec![0usize; max_bin + 1];
    for ky in 0..n {
        for kx in 0..n {
            let r = centred(ky).hypot(centred(kx)).round() as usize;
            sums[r] += buf[ky * n + kx].norm_sqr();
            counts[r] += 1;
        }
    }
    let radial: Vec<f64> = sums.iter().zip(&counts).map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    let nyq = n as f64 / 2.0;
    let (mut low, mut mid, mut high) = (0.0, 0.0, 0.0);
    for (r, &p) in radial.iter().enumerate() {
        let e = p * r as f64;
        let rf = r as f64;
        if rf < nyq / 3.0 {
            low += e;
        } else if rf < 2.0 * nyq / 3.0 {
            mid += e;
        } else {
            high += e;
        }
    }
    let total = low + mid + high;
    let raw: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
    let bands = if !(total > 1e-24 * raw.max(1e-300)) {
        BandEnergies { low: 100.0, mid: 0.0, high: 0.0 }
    } else {
        BandEnergies { low: 100.0 * low / total, mid: 100.0 * mid / total, high: 100.0 * high / total }
    };
    Ok(Psd { radial, bands })
}

/// Largest square centred in `t`, for spectra of rectangular fields.
pub fn centre_square(t: &Tensor) -> Result<Tensor> {
    let (h, w) = t.hw();
    let n = h.min(w);
    let (y0, x0) = ((h - n) / 2, (w - n) / 2);
    super::metrics::crop(t, y0, y0 + n, x0, x0 + n)
}

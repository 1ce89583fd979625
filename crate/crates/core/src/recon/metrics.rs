use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::circphase::wrap;
use crate::error::{Error, Result};
use crate::tensor::window::{plane_ssim, SsimConstants};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Amplitude,
    Phase,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Amplitude, Modality::Phase];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Amplitude => "amplitude",
            Modality::Phase => "phase",
        }
    }

    pub fn data_range(self) -> f64 {
        match self {
            Modality::Amplitude => 1.0,
            Modality::Phase => 2.0 * PI,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::invalid(format!("unknown modality {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["mse", "mae", "psnr", "ssim"];

    pub fn values(&self) -> [f64; 4] {
        [self.mse, self.mae, self.psnr, self.ssim]
    }
}

pub fn psnr(mse: f64, data_range: f64) -> f64 {
    if mse < 1e-30 {
        PSNR_CAP_DB
    } else {
        (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn residual(kind: Modality, a: f32, b: f32) -> f64 {
    match kind {
        Modality::Amplitude => a as f64 - b as f64,
        Modality::Phase => wrap(a as f64 - b as f64),
    }
}

fn ssim_input(kind: Modality, v: f32) -> f64 {
    match kind {
        Modality::Amplitude => v as f64,
        Modality::Phase => (v as f64 + PI) / (2.0 * PI),
    }
}

/// Mean SSIM of two `H×W` maps (phase maps rescaled to `[0, 1]`).
pub fn ssim_map(kind: Modality, x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    let (h, w) = x.hw();
    if x.shape().len() != 2 || x.shape() != x_hat.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let a: Vec<f64> = x.data().iter().map(|&v| ssim_input(kind, v)).collect();
    let b: Vec<f64> = x_hat.data().iter().map(|&v| ssim_input(kind, v)).collect();
    let r = plane_ssim(&a, &b, h, w, SsimConstants::for_range(1.0), false);
    if r.windows == 0 {
        return Err(Error::shape("ssim", format!("{h}x{w} smaller than the SSIM window")));
    }
    Ok(r.sum / r.windows as f64)
}

/// MSE/MAE over `mask` (all pixels if `None`); phase residuals are wrapped.
fn error_stats(kind: Modality, x: &Tensor, x_hat: &Tensor, mask: Option<&Tensor>) -> Result<(f64, f64)> {
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (i, (&a, &b)) in x.data().iter().zip(x_hat.data()).enumerate() {
        if mask.is_some_and(|m| m.data()[i] <= 0.0) {
            continue;
        }
        let r = residual(kind, a, b);
        se += r * r;
        ae += r.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("metrics"));
    }
    Ok((se / n as f64, ae / n as f64))
}

pub fn metrics(x: &Tensor, x_hat: &Tensor, kind: Modality) -> Result<Metrics> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("metrics", format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let (mse, mae) = error_stats(kind, x, x_hat, None)?;
    Ok(Metrics { mse, mae, psnr: psnr(mse, kind.data_range()), ssim: ssim_map(kind, x, x_hat)? })
}

/// Largest rectangle of pixels with `mask > 0`, found by shrinking the mask's
/// bounding box one pixel per side at a time; `(y0, y1, x0, x1)`.
pub fn interior_rect(mask: &Tensor) -> Option<(usize, usize, usize, usize)> {
    let (_, w) = mask.hw();
    let m = mask.data();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for (i, &v) in m.iter().enumerate() {
        if v > 0.0 {
            y0 = y0.min(i / w);
            y1 = y1.max(i / w + 1);
            x0 = x0.min(i % w);
            x1 = x1.max(i % w + 1);
        }
    }
    while y0 < y1 && x0 < x1 {
        if (y0..y1).all(|y| m[y * w + x0..y * w + x1].iter().all(|&v| v > 0.0)) {
            return Some((y0, y1, x0, x1));
        }
        (y0, y1, x0, x1) = (y0 + 1, y1 - 1, x0 + 1, x1 - 1);
    }
    None
}

/// Metrics restricted to pixels where `mask > 0`; SSIM runs on
/// [`interior_rect`].
pub fn masked_metrics(x: &Tensor, x_hat: &Tensor, mask: &Tensor, kind: Modality) -> Result<Metrics> {
    if x.shape() != x_hat.shape() || x.shape() != mask.shape() || x.shape().len() != 2 {
        return Err(Error::shape("masked_metrics", format!("{:?} vs {:?} vs {:?}", x.shape(), x_hat.shape(), mask.shape())));
    }
    let (mse, mae) = error_stats(kind, x, x_hat, Some(mask))?;
    let (y0, y1, x0, x1) = interior_rect(mask).ok_or(Error::Empty("mask interior"))?;
    let ssim = ssim_map(kind, &crop(x, y0, y1, x0, x1)?, &crop(x_hat, y0, y1, x0, x1)?)?;
    Ok(Metrics { mse, mae, psnr: psnr(mse, kind.data_range()), ssim })
}

pub fn crop(t: &Tensor, y0: usize, y1: usize, x0: usize, x1: usize) -> Result<Tensor> {
    let (h, w) = t.hw();
    if y0 >= y1 || x0 >= x1 || y1 > h || x1 > w {
        return Err(Error::shape("crop", format!("[{y0},{y1})x[{x0},{x1}) of {h}x{w}")));
    }
    let (ch, cw) = (y1 - y0, x1 - x0);
    Ok(Tensor::from_fn(&[ch, cw], |i| t.data()[(y0 + i / cw) * w + x0 + i % cw]))
}

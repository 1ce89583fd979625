//! Gaussian-windowed SSIM statistics over valid window positions.

/// Side length of the SSIM window.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Stabilising constants `C1 = (k1·L)²`, `C2 = (k2·L)²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl SsimConstants {
    pub fn for_range(data_range: f64) -> Self {
        SsimConstants { c1: (0.01 * data_range).powi(2), c2: (0.03 * data_range).powi(2) }
    }
}

impl Default for SsimConstants {
    fn default() -> Self {
        Self::for_range(1.0)
    }
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode filter of one `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..SSIM_WINDOW).map(|k| g[k] * x[y * w + ox + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(oy + k) * ow + ox]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(d: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let v = d[oy * ow + ox];
            for k in 0..SSIM_WINDOW {
                rows[(oy + k) * ow + ox] += g[k] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for ox in 0..ow {
            let v = rows[y * ow + ox];
            for k in 0..SSIM_WINDOW {
                out[y * w + ox + k] += g[k] * v;
            }
        }
    }
    out
}

/// Per-plane SSIM statistics: the sum of the SSIM map and, optionally, the
/// gradient of that sum with respect to both planes.
pub(crate) struct PlaneSsim {
    pub sum: f64,
    pub windows: usize,
    pub grad: Option<(Vec<f64>, Vec<f64>)>,
}

pub(crate) fn plane_ssim(x: &[f64], y: &[f64], h: usize, w: usize, k: SsimConstants, want_grad: bool) -> PlaneSsim {
    let g = gaussian_window();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let sxx = filter_valid(&sq(x, x), h, w, &g);
    let syy = filter_valid(&sq(y, y), h, w, &g);
    let sxy = filter_valid(&sq(x, y), h, w, &g);
    let n = mx.len();
    let mut sum = 0.0;
    let mut d_mx = vec![0.0; if want_grad { n } else { 0 }];
    let mut d_my = d_mx.clone();
    let mut d_sxx = d_mx.clone();
    let mut d_syy = d_mx.clone();
    let mut d_sxy = d_mx.clone();
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let a1 = 2.0 * ux * uy + k.c1;
        let a2 = 2.0 * (sxy[i] - ux * uy) + k.c2;
        let b1 = ux * ux + uy * uy + k.c1;
        let b2 = (sxx[i] - ux * ux) + (syy[i] - uy * uy) + k.c2;
        let s = a1 * a2 / (b1 * b2);
        sum += s;
        if want_grad {
            let inv = 1.0 / (b1 * b2);
            let shrink = s * (1.0 / b1 - 1.0 / b2);
            d_mx[i] = 2.0 * uy * (a2 - a1) * inv - 2.0 * ux * shrink;
            d_my[i] = 2.0 * ux * (a2 - a1) * inv - 2.0 * uy * shrink;
            d_sxy[i] = 2.0 * a1 * inv;
            d_sxx[i] = -s / b2;
            d_syy[i] = -s / b2;
        }
    }
    let grad = want_grad.then(|| {
        let t_mx = filter_valid_adjoint(&d_mx, h, w, &g);
        let t_my = filter_valid_adjoint(&d_my, h, w, &g);
        let t_sxx = filter_valid_adjoint(&d_sxx, h, w, &g);
        let t_syy = filter_valid_adjoint(&d_syy, h, w, &g);
        let t_sxy = filter_valid_adjoint(&d_sxy, h, w, &g);
        let gx = (0..h * w).map(|q| t_mx[q] + 2.0 * x[q] * t_sxx[q] + y[q] * t_sxy[q]).collect();
        let gy = (0..h * w).map(|q| t_my[q] + 2.0 * y[q] * t_syy[q] + x[q] * t_sxy[q]).collect();
        (gx, gy)
    });
    PlaneSsim { sum, windows: n, grad }
}

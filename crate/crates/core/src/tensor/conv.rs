//! Batched 2-D cross-correlation via im2col + GEMM, and the bilinear 2x
//! upsampling kernels.

use super::Real;

/// Static description of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        (n, cin, h, w): (usize, usize, usize, usize),
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
    ) -> Option<Self> {
        if spec.stride == 0 || h + 2 * spec.padding < k || w + 2 * spec.padding < k {
            return None;
        }
        let ho = (h + 2 * spec.padding - k) / spec.stride + 1;
        let wo = (w + 2 * spec.padding - k) / spec.stride + 1;
        Some(ConvGeom { n, cin, h, w, cout, k, stride: spec.stride, pad: spec.padding, ho, wo })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    }

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies in `0..w`.
fn valid_range(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx { ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Visits every in-bounds `(col row, output row, input row, ox range, first ix)`
/// segment of one sample's im2col matrix.
fn for_each_segment(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, (usize, usize), usize)) {
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let (lo, hi) = valid_range(g, kx);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy >= 0 && iy < g.h as isize {
                        f(row, oy, ci * g.h * g.w + iy as usize * g.w, (lo, hi), ix0);
                    }
                }
            }
        }
    }
}

/// Writes one sample's `col[(ci, ky, kx), (oy, ox)]` block into a matrix with
/// row stride `ld`; padded taps are left untouched.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T], ld: usize) {
    for_each_segment(g, |row, oy, src, (lo, hi), ix0| {
        let d = &mut col[row * ld + oy * g.wo + lo..row * ld + oy * g.wo + hi];
        let s = &x[src + ix0..];
        if g.stride == 1 {
            d.copy_from_slice(&s[..hi - lo]);
        } else {
            for (v, s) in d.iter_mut().zip(s.iter().step_by(g.stride)) {
                *v = *s;
            }
        }
    });
}

fn col2im_add<T: Real>(g: &ConvGeom, col: &[T], ld: usize, dx: &mut [T]) {
    for_each_segment(g, |row, oy, dst, (lo, hi), ix0| {
        let s = &col[row * ld + oy * g.wo + lo..row * ld + oy * g.wo + hi];
        let d = &mut dx[dst + ix0..];
        if g.stride == 1 {
            for (d, v) in d[..hi - lo].iter_mut().zip(s) {
                *d += *v;
            }
        } else {
            for (d, v) in d.iter_mut().step_by(g.stride).zip(s) {
                *d += *v;
            }
        }
    });
}

/// Bounds-checked GEMM: `c (m×n) = a (m×k) · b (k×n) + beta·c`, where each
/// operand is given by its buffer and (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    let reach = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(reach(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
    assert!(reach(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
    assert!(reach(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every index the kernel touches was bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Samples per GEMM, so that narrow late layers still get wide products.
fn chunk_len(g: &ConvGeom) -> usize {
    (1024 / (g.ho * g.wo).max(1)).clamp(1, g.n.max(1))
}

fn fill_col<T: Real>(g: &ConvGeom, x: &[T], samples: std::ops::Range<usize>, col: &mut [T]) {
    let (p, in_len) = (g.ho * g.wo, g.cin * g.h * g.w);
    let ld = samples.len() * p;
    col[..g.rows() * ld].fill(T::zero());
    for (j, n) in samples.enumerate() {
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut col[j * p..], ld);
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (kk, p) = (g.rows(), g.ho * g.wo);
    let chunk = chunk_len(g);
    let mut col = vec![T::zero(); kk * chunk * p];
    let mut y = vec![T::zero(); g.cout * chunk * p];
    let mut out = vec![T::zero(); g.n * g.cout * p];
    for n0 in (0..g.n).step_by(chunk) {
        let nb = chunk.min(g.n - n0);
        let ld = nb * p;
        fill_col(g, x, n0..n0 + nb, &mut col);
        gemm((g.cout, kk, ld), w, (kk, 1), &col, (ld, 1), T::zero(), &mut y, (ld, 1));
        for co in 0..g.cout {
            let b = bias.map_or(T::zero(), |b| b[co]);
            for j in 0..nb {
                let src = &y[co * ld + j * p..][..p];
                let dst = &mut out[((n0 + j) * g.cout + co) * p..][..p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let (kk, p) = (g.rows(), g.ho * g.wo);
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let db = (0..g.cout)
        .map(|co| {
            let acc: f64 = (0..g.n).map(|n| dout[n * out_len + co * p..][..p].iter().map(|v| v.as_f64()).sum::<f64>()).sum();
            T::lit(acc)
        })
        .collect();
    let chunk = chunk_len(g);
    let mut col = vec![T::zero(); kk * chunk * p];
    let mut dy = vec![T::zero(); g.cout * chunk * p];
    let mut dw_t = vec![T::zero(); kk * g.cout];
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * in_len]);
    for n0 in (0..g.n).step_by(chunk) {
        let nb = chunk.min(g.n - n0);
        let ld = nb * p;
        // (n, cout, p) -> (cout, nb·p)
        for co in 0..g.cout {
            for j in 0..nb {
                dy[co * ld + j * p..][..p].copy_from_slice(&dout[(n0 + j) * out_len + co * p..][..p]);
            }
        }
        fill_col(g, x, n0..n0 + nb, &mut col);
        // dWᵀ += col · dYᵀ
        gemm((kk, ld, g.cout), &col, (ld, 1), &dy, (1, ld), T::one(), &mut dw_t, (g.cout, 1));
        if let Some(dx) = dx.as_mut() {
            // dcol = Wᵀ · dY
            gemm((kk, g.cout, ld), w, (1, kk), &dy, (ld, 1), T::zero(), &mut col, (ld, 1));
            for j in 0..nb {
                let n = n0 + j;
                col2im_add(g, &col[j * p..], ld, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
    }
    let mut dw = vec![T::zero(); g.cout * kk];
    for r in 0..kk {
        for co in 0..g.cout {
            dw[co * kk + r] = dw_t[r * g.cout + co];
        }
    }
    ConvGrads { dx, dw, db }
}

/// Source taps for one output coordinate of the half-pixel 2x resampler.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn taps(len: usize) -> Vec<Tap> {
    (0..2 * len)
        .map(|d| {
            let src = ((d as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            Tap { i0, i1, w1: src - i0 as f64 }
        })
        .collect()
}

pub(crate) fn upsample2x_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ty, tx) = (taps(h), taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..][..h * w];
        let dst = &mut out[pl * oh * ow..][..oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v00 = src[a.i0 * w + b.i0].as_f64();
                let v01 = src[a.i0 * w + b.i1].as_f64();
                let v10 = src[a.i1 * w + b.i0].as_f64();
                let v11 = src[a.i1 * w + b.i1].as_f64();
                let top = v00 + (v01 - v00) * b.w1;
                let bot = v10 + (v11 - v10) * b.w1;
                dst[oy * ow + ox] = T::lit(top + (bot - top) * a.w1);
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ty, tx) = (taps(h), taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut acc = vec![0.0f64; planes * h * w];
    for pl in 0..planes {
        let src = &dout[pl * oh * ow..][..oh * ow];
        let dst = &mut acc[pl * h * w..][..h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = src[oy * ow + ox].as_f64();
                let (gy0, gy1) = (g * (1.0 - a.w1), g * a.w1);
                dst[a.i0 * w + b.i0] += gy0 * (1.0 - b.w1);
                dst[a.i0 * w + b.i1] += gy0 * b.w1;
                dst[a.i1 * w + b.i0] += gy1 * (1.0 - b.w1);
                dst[a.i1 * w + b.i1] += gy1 * b.w1;
            }
        }
    }
    acc.into_iter().map(T::lit).collect()
}

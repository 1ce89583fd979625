//! Unit-circle phase geometry.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Projection guard added under the square root.
pub const PROJECT_EPS: f64 = 1e-8;

/// Paired cosine/sine planes.
#[derive(Clone, Debug, PartialEq)]
pub struct CircularPhaseMap {
    pub c: Tensor,
    pub s: Tensor,
    pub projected: bool,
}

/// Wraps into `(-π, π]`.
pub fn wrap(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x as f64, y as f64) as f32).collect();
    Tensor::new(a.shape(), d).expect("shape")
}

pub fn embed(phase: &Tensor) -> CircularPhaseMap {
    CircularPhaseMap {
        c: phase.map(|p| (p as f64).cos() as f32),
        s: phase.map(|p| (p as f64).sin() as f32),
        projected: true,
    }
}

/// `(c, s) / sqrt(c² + s² + ε)`.
pub fn unit_project(c: &Tensor, s: &Tensor, eps: f64) -> Result<CircularPhaseMap> {
    same_shape("unit_project", c, s)?;
    let norm = zip_map(c, s, |x, y| (x * x + y * y + eps).sqrt());
    Ok(CircularPhaseMap {
        c: zip_map(c, &norm, |x, n| x / n),
        s: zip_map(s, &norm, |y, n| y / n),
        projected: true,
    })
}

/// Differentiable projection recorded on a tape.
pub fn unit_project_var<T: Real>(tape: &mut Tape<T>, c: Var, s: Var, eps: f64) -> Result<(Var, Var)> {
    let c2 = tape.square(c)?;
    let s2 = tape.square(s)?;
    let r2 = tape.add(c2, s2)?;
    let norm = tape.sqrt_eps(r2, eps)?;
    Ok((tape.div(c, norm)?, tape.div(s, norm)?))
}

/// Phase recovered by `atan2(s, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveredPhase {
    pub phase: Tensor,
    /// Pixels where both inputs were exactly zero; their phase is set to 0.
    pub degenerate: usize,
}

pub fn recover_phase(c: &Tensor, s: &Tensor) -> Result<RecoveredPhase> {
    same_shape("recover_phase", c, s)?;
    let mut degenerate = 0;
    let d = c
        .data()
        .iter()
        .zip(s.data())
        .map(|(&x, &y)| {
            if x == 0.0 && y == 0.0 {
                degenerate += 1;
                0.0
            } else {
                let p = (y as f64).atan2(x as f64);
                // atan2(-0, x<0) gives -π
                if p == -PI { PI as f32 } else { p as f32 }
            }
        })
        .collect();
    Ok(RecoveredPhase { phase: Tensor::new(c.shape(), d)?, degenerate })
}

/// `|wrap(a − b)|`, in `[0, π]`.
pub fn geodesic_dist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("geodesic_dist", a, b)?;
    Ok(zip_map(a, b, |x, y| wrap(x - y).abs()))
}

/// Signed shortest-arc difference `wrap(a − b)`.
pub fn wrapped_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("wrapped_diff", a, b)?;
    Ok(zip_map(a, b, |x, y| wrap(x - y)))
}

/// Mean of `|c² + s² − 1|`.
pub fn manifold_deviation(c: &Tensor, s: &Tensor) -> f64 {
    let n = c.len().max(1) as f64;
    c.data().iter().zip(s.data()).map(|(&x, &y)| ((x as f64).powi(2) + (y as f64).powi(2) - 1.0).abs()).sum::<f64>() / n
}

/// Angle of the summed unit vectors; `None` for a zero resultant.
pub fn circular_mean(angles: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut c, mut s) = (0.0, 0.0);
    for a in angles {
        c += a.cos();
        s += a.sin();
    }
    (c.hypot(s) > 1e-12).then(|| s.atan2(c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_maps_pi_to_itself() {
        assert_eq!(wrap(PI), PI);
        assert_eq!(wrap(-PI), PI);
        assert!((wrap(2.0 * PI + 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn circular_mean_across_cut() {
        let m = circular_mean([PI - 0.05, -PI + 0.05]).unwrap();
        assert!((m.abs() - PI).abs() < 1e-9);
        assert!(circular_mean([0.0, PI]).is_none());
    }
}

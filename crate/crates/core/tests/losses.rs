use std::f64::consts::PI;

use proptest::prelude::*;
use ptycho::circphase::unit_project_var;
use ptycho::losses::{
    base_loss, circular_loss, consistency_loss, grad_loss, mae, mse, scalar_phase_loss, ssim, total_loss, BaseMetric,
    CircularOutputs, LossWeights, TargetVars,
};
use ptycho::tensor::{finite_diff_check, gaussian_window, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn eval2(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, ptycho::tensor::Var, ptycho::tensor::Var) -> ptycho::Result<ptycho::tensor::Var>) -> f64 {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = f(&mut tape, x, y).unwrap();
    tape.item(out)
}

/// Direct 11×11 windowed SSIM without separability.
fn ssim_oracle(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let (h, w) = x.hw();
    let g = gaussian_window();
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..11 {
                for kx in 0..11 {
                    let wt = g[ky] * g[kx];
                    let (a, b) = (x.at(oy + ky, ox + kx), y.at(oy + ky, ox + kx));
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn pixel_metric_cases() {
    let z = Tensor::<f64>::zeros(&[2]);
    let o = Tensor::<f64>::full(&[2], 1.0);
    assert_eq!(eval2(&z, &z, mse), 0.0);
    assert_eq!(eval2(&z, &o, mse), 1.0);
    assert_eq!(eval2(&z, &o, mae), 1.0);
    let (a, b) = (rand_t(&[7, 9], -1.0, 1.0, 1), rand_t(&[7, 9], -1.0, 1.0, 2));
    let d: Vec<f64> = a.data().iter().zip(b.data()).map(|(p, q)| p - q).collect();
    let oracle_mse = d.iter().map(|v| v * v).sum::<f64>() / 63.0;
    let oracle_mae = d.iter().map(|v| v.abs()).sum::<f64>() / 63.0;
    assert!((eval2(&a, &b, mse) - oracle_mse).abs() < 1e-7);
    assert!((eval2(&a, &b, mae) - oracle_mae).abs() < 1e-7);
}

fn base_value(a: &Tensor<f64>, ah: &Tensor<f64>, c: &Tensor<f64>, ch: &Tensor<f64>, s: &Tensor<f64>, sh: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let v: Vec<_> = [a, ah, c, ch, s, sh].iter().map(|t| tape.constant((*t).clone())).collect();
    let out = base_loss(&mut tape, BaseMetric::Mse, v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
    tape.item(out)
}

#[test]
fn base_loss_cases() {
    let a = rand_t(&[4, 4], 0.0, 1.0, 3);
    let c = rand_t(&[4, 4], -1.0, 1.0, 4);
    let s = rand_t(&[4, 4], -1.0, 1.0, 5);
    assert_eq!(base_value(&a, &a, &c, &c, &s, &s), 0.0);
    let shifted = a.map(|v| v + 0.1);
    assert!((base_value(&a, &shifted, &c, &c, &s, &s) - 0.01).abs() < 1e-12);
    let (ah, ch, sh) = (rand_t(&[4, 4], 0.0, 1.0, 6), rand_t(&[4, 4], -1.0, 1.0, 7), rand_t(&[4, 4], -1.0, 1.0, 8));
    let expect = eval2(&a, &ah, mse) + eval2(&c, &ch, mse) + eval2(&s, &sh, mse);
    assert!((base_value(&a, &ah, &c, &ch, &s, &sh) - expect).abs() < 1e-7);
}

#[test]
fn grad_loss_cases() {
    let x = rand_t(&[5, 5], -1.0, 1.0, 9);
    assert!(eval2(&x, &x.map(|v| v + 0.7), grad_loss).abs() < 1e-12);
    let ramp = Tensor::<f64>::from_fn(&[2, 3], |i| (i % 3) as f64);
    assert!((eval2(&ramp, &Tensor::zeros(&[2, 3]), grad_loss) - 1.0).abs() < 1e-12);
    let y = rand_t(&[5, 5], -1.0, 1.0, 10);
    let (mut hx, mut vy) = (0.0, 0.0);
    for r in 0..5 {
        for c in 0..4 {
            hx += ((x.at(r, c + 1) - x.at(r, c)) - (y.at(r, c + 1) - y.at(r, c))).abs();
        }
    }
    for r in 0..4 {
        for c in 0..5 {
            vy += ((x.at(r + 1, c) - x.at(r, c)) - (y.at(r + 1, c) - y.at(r, c))).abs();
        }
    }
    assert!((eval2(&x, &y, grad_loss) - (hx / 20.0 + vy / 20.0)).abs() < 1e-6);
    let one = Tensor::<f64>::zeros(&[1, 1]);
    let mut tape = Tape::new();
    let v = tape.constant(one);
    assert!(grad_loss(&mut tape, v, v).is_err());
}

#[test]
fn ssim_cases() {
    let x = rand_t(&[32, 32], 0.0, 1.0, 11);
    assert!((eval2(&x, &x, ssim) - 1.0).abs() < 1e-12);
    let (a, b) = (Tensor::<f64>::full(&[16, 16], 0.3), Tensor::<f64>::full(&[16, 16], 0.7));
    let c1 = 1e-4;
    let closed = (2.0 * 0.3 * 0.7 + c1) / (0.09 + 0.49 + c1);
    assert!((eval2(&a, &b, ssim) - closed).abs() < 1e-9);
    // locally zero-mean field, so the luminance term stays near 1
    let z = Tensor::<f64>::from_fn(&[32, 32], |i| if (i / 32 + i % 32) % 2 == 0 { 0.4 } else { -0.4 });
    let neg = z.map(|v| -v);
    let v = eval2(&z, &neg, ssim);
    assert!(v < 0.0, "{v}");
    assert!((v - ssim_oracle(&z, &neg)).abs() < 1e-9);
    let y = rand_t(&[32, 32], 0.0, 1.0, 12);
    assert!((eval2(&x, &y, ssim) - ssim_oracle(&x, &y)).abs() < 1e-6);
    assert!((eval2(&x, &y, ssim) - eval2(&y, &x, ssim)).abs() < 1e-12);
    let small = Tensor::<f64>::zeros(&[10, 10]);
    let mut tape = Tape::new();
    let v = tape.constant(small);
    assert!(ssim(&mut tape, v, v).is_err());
}

fn circular_value(phi: f64, phi_hat: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let t = |v: f64| Tensor::full(&[3, 3], v);
    let c = tape.constant(t(phi.cos()));
    let s = tape.constant(t(phi.sin()));
    let ch = tape.constant(t(phi_hat.cos()));
    let sh = tape.constant(t(phi_hat.sin()));
    let out = circular_loss(&mut tape, c, ch, s, sh).unwrap();
    tape.item(out)
}

#[test]
fn circular_loss_cases() {
    assert!(circular_value(1.0, 1.0).abs() < 1e-15);
    assert!((circular_value(0.3, 0.3 + PI) - 2.0).abs() < 1e-12);
    assert!((circular_value(0.0, 0.05) - (1.0 - 0.05f64.cos())).abs() < 1e-12);
    assert!((circular_value(0.0, 0.05) - 0.00125).abs() < 1e-6);
}

#[test]
fn circular_is_periodic_scalar_mse_is_not() {
    for k in -3..=3 {
        let phi = 2.9;
        let shifted = phi + 2.0 * PI * k as f64;
        assert!(circular_value(phi, shifted) < 1e-6);
        let raw = eval2(&Tensor::full(&[2], phi), &Tensor::full(&[2], shifted), mse);
        if k != 0 {
            assert!(raw > 1.0);
        }
    }
}

#[test]
fn consistency_cases() {
    let eval = |c: f64, s: f64| {
        let mut tape = Tape::<f64>::new();
        let (cv, sv) = (tape.constant(Tensor::full(&[2, 2], c)), tape.constant(Tensor::full(&[2, 2], s)));
        let out = consistency_loss(&mut tape, cv, sv).unwrap();
        tape.item(out)
    };
    assert!(eval(0.6, 0.8).abs() < 1e-15);
    assert_eq!(eval(0.0, 0.0), 1.0);
    assert!((eval(0.66, 0.88) - 0.0441).abs() < 1e-12);
}

struct Fields {
    a: Tensor<f64>,
    phi: Tensor<f64>,
    a_hat: Tensor<f64>,
    c_pre: Tensor<f64>,
    s_pre: Tensor<f64>,
}

fn fields(seed: u64, perfect: bool) -> Fields {
    let a = rand_t(&[2, 1, 12, 12], 0.05, 0.95, seed);
    let phi = rand_t(&[2, 1, 12, 12], -PI, PI, seed + 1);
    if perfect {
        return Fields { a_hat: a.clone(), c_pre: phi.map(f64::cos), s_pre: phi.map(f64::sin), a, phi };
    }
    Fields {
        a_hat: rand_t(&[2, 1, 12, 12], 0.05, 0.95, seed + 2),
        c_pre: rand_t(&[2, 1, 12, 12], -0.9, 0.9, seed + 3),
        s_pre: rand_t(&[2, 1, 12, 12], -0.9, 0.9, seed + 4),
        a,
        phi,
    }
}

fn run_total(f: &Fields, w: &LossWeights) -> ptycho::losses::LossBreakdown {
    let mut tape = Tape::<f64>::new();
    let target = TargetVars::register(&mut tape, f.a.clone(), f.phi.clone(), f.phi.map(f64::cos), f.phi.map(f64::sin));
    let amp = tape.constant(f.a_hat.clone());
    let c_pre = tape.constant(f.c_pre.clone());
    let s_pre = tape.constant(f.s_pre.clone());
    let (c, s) = unit_project_var(&mut tape, c_pre, s_pre, 1e-8).unwrap();
    let pred = CircularOutputs { amp, c_pre, s_pre, c, s };
    total_loss(&mut tape, &pred, &target, w, BaseMetric::Mse).unwrap().breakdown(&tape)
}

#[test]
fn perfect_prediction_zeroes_every_term() {
    let b = run_total(&fields(20, true), &LossWeights::default());
    for (name, v) in ptycho::losses::LossBreakdown::FIELDS.iter().zip(b.values()) {
        // the projection guard leaves |(c̃, s̃)| = 1/sqrt(1 + ε)
        assert!(v.abs() < 1e-7, "{name} = {v}");
    }
}

#[test]
fn weight_isolation_and_recomposition() {
    let f = fields(30, false);
    let only_base = LossWeights { w_a: 0.0, w_p: 0.0, w_c: 0.0, ..Default::default() };
    let b = run_total(&f, &only_base);
    assert!((b.total - b.base).abs() < 1e-12);
    let w = LossWeights::default();
    let b = run_total(&f, &w);
    let amp = w.lambda_g * b.grad_amp + w.lambda_s * b.ssim_amp;
    let phase = w.lambda_g * b.grad_phase + w.lambda_s * b.ssim_phase + w.lambda_circ * b.circular;
    assert!((amp - b.amp).abs() < 1e-9);
    assert!((phase - b.phase).abs() < 1e-9);
    assert!((b.total - (w.w_b * b.base + w.w_a * b.amp + w.w_p * b.phase + w.w_c * b.cons)).abs() < 1e-6);
    for v in b.values() {
        assert!(v >= 0.0);
    }
    assert!(b.circular <= 2.0);
}

#[test]
fn scalar_variant_terms() {
    let f = fields(40, false);
    let mut tape = Tape::<f64>::new();
    let target = TargetVars::register(&mut tape, f.a.clone(), f.phi.clone(), f.phi.map(f64::cos), f.phi.map(f64::sin));
    let amp = tape.constant(f.a_hat.clone());
    let ph = tape.constant(f.c_pre.map(|v| v * PI));
    let w = LossWeights::default();
    let b = scalar_phase_loss(&mut tape, amp, ph, &target, &w, BaseMetric::Mse).unwrap().breakdown(&tape);
    let expect = eval2(&f.a, &f.a_hat, mse) + eval2(&f.phi, &f.c_pre.map(|v| v * PI), mse);
    assert!((b.base - expect).abs() < 1e-9);
    assert_eq!((b.phase, b.cons, b.circular), (0.0, 0.0, 0.0));
    assert!((b.total - (b.base + b.amp)).abs() < 1e-9);
}

#[test]
fn circular_gradient_matches_fd_including_near_pi() {
    let phi = rand_t(&[4, 4], -PI, PI, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let far: Vec<f64> = phi.data().iter().map(|p| p + PI - 1e-3 * rng.gen_range(-1.0..1.0)).collect();
    for pred_angles in [rand_t(&[4, 4], -PI, PI, 52), Tensor::new(&[4, 4], far).unwrap()] {
        let mags = rand_t(&[4, 4], 0.3, 0.9, 53);
        let c_pre = Tensor::from_fn(&[4, 4], |i| mags.data()[i] * pred_angles.data()[i].cos());
        let s_pre = Tensor::from_fn(&[4, 4], |i| mags.data()[i] * pred_angles.data()[i].sin());
        let (tc, ts) = (phi.map(f64::cos), phi.map(f64::sin));
        let s_fixed = s_pre.clone();
        let (tc1, ts1) = (tc.clone(), ts.clone());
        let err_c = finite_diff_check(
            move |tape: &mut Tape<f64>, c| {
                let s = tape.constant(s_fixed.clone());
                let (pc, ps) = unit_project_var(tape, c, s, 1e-8)?;
                let (a, b) = (tape.constant(tc1.clone()), tape.constant(ts1.clone()));
                circular_loss(tape, a, pc, b, ps)
            },
            &c_pre,
            1e-3,
        )
        .unwrap();
        let c_fixed = c_pre.clone();
        let err_s = finite_diff_check(
            move |tape: &mut Tape<f64>, s| {
                let c = tape.constant(c_fixed.clone());
                let (pc, ps) = unit_project_var(tape, c, s, 1e-8)?;
                let (a, b) = (tape.constant(tc.clone()), tape.constant(ts.clone()));
                circular_loss(tape, a, pc, b, ps)
            },
            &s_pre,
            1e-3,
        )
        .unwrap();
        assert!(err_c < 1e-3 && err_s < 1e-3, "{err_c} {err_s}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ssim_symmetric_and_bounded(seed in any::<u64>()) {
        let x = rand_t(&[16, 16], 0.0, 1.0, seed);
        let y = rand_t(&[16, 16], 0.0, 1.0, seed ^ 1);
        let a = eval2(&x, &y, ssim);
        prop_assert!((a - eval2(&y, &x, ssim)).abs() < 1e-6);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn grad_loss_shift_invariant(seed in any::<u64>(), k in -5.0f64..5.0) {
        let x = rand_t(&[6, 7], -1.0, 1.0, seed);
        let y = rand_t(&[6, 7], -1.0, 1.0, seed ^ 2);
        let a = eval2(&x, &y, grad_loss);
        let b = eval2(&x.map(|v| v + k), &y.map(|v| v + k), grad_loss);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn loss_terms_pass_fd(seed in any::<u64>()) {
        // offsets whose values and forward differences stay clear of the |·| kink
        let x = rand_t(&[8, 8], -1.0, 1.0, seed);
        let noise = rand_t(&[8, 8], -0.03, 0.03, seed ^ 3);
        let y = Tensor::from_fn(&[8, 8], |i| x.data()[i] + 0.2 + 0.1 * (i / 8) as f64 + 0.15 * (i % 8) as f64 + noise.data()[i]);
        for f in [mse, mae, grad_loss] {
            let yc = y.clone();
            let err = finite_diff_check(move |tape: &mut Tape<f64>, v| { let t = tape.constant(yc.clone()); f(tape, t, v) }, &x, 1e-3).unwrap();
            prop_assert!(err < 1e-3);
        }
        let y12 = rand_t(&[12, 12], 0.0, 1.0, seed ^ 4);
        let x12 = rand_t(&[12, 12], 0.0, 1.0, seed ^ 5);
        let err = finite_diff_check(move |tape: &mut Tape<f64>, v| { let t = tape.constant(y12.clone()); ssim(tape, t, v) }, &x12, 1e-3).unwrap();
        prop_assert!(err < 1e-3);
        let s = rand_t(&[8, 8], -1.0, 1.0, seed ^ 6);
        let err = finite_diff_check(move |tape: &mut Tape<f64>, v| { let t = tape.constant(s.clone()); consistency_loss(tape, v, t) }, &x, 1e-3).unwrap();
        prop_assert!(err < 1e-3);
    }
}

use proptest::prelude::*;
use ptycho::tensor::{finite_diff_check, Conv2dSpec, Tape, Tensor, Var};
use ptycho::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct nested-loop cross-correlation over one `C×H×W` image.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                    * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::new(&[1, 3, 3], (0..9).map(|v| v as f32 * 0.5).collect()).unwrap());
    let w = t.constant(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
    let y = t.conv2d(x, w, None, Conv2dSpec { stride: 1, padding: 0 }).unwrap();
    assert_eq!(t.value(y), t.value(x));
}

#[test]
fn conv_encoder_stage_shape() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(&[1, 32, 32]));
    let w = t.constant(Tensor::zeros(&[32, 1, 5, 5]));
    let y = t.conv2d(x, w, None, Conv2dSpec { stride: 2, padding: 2 }).unwrap();
    assert_eq!(t.shape(y), &[32, 16, 16]);
}

#[test]
fn conv_matches_direct_sum() {
    for (seed, stride, pad, k) in [(1u64, 1, 1, 3), (2, 2, 1, 3), (3, 2, 2, 5), (4, 1, 0, 1)] {
        let x = random(&[2, 5, 5], seed);
        let w = random(&[3, 2, k, k], seed + 100);
        let b = random(&[3], seed + 200);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, Some(bv), Conv2dSpec { stride, padding: pad }).unwrap();
        let oracle = conv_oracle(&x, &w, Some(&b), stride, pad);
        let err = t.value(y).data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "stride {stride} pad {pad} k {k}: {err}");

        // f32 path against the same oracle
        let mut t = Tape::<f32>::new();
        let (xv, wv, bv) = (t.constant(x.cast()), t.constant(w.cast()), t.constant(b.cast()));
        let y = t.conv2d(xv, wv, Some(bv), Conv2dSpec { stride, padding: pad }).unwrap();
        let err =
            t.value(y).data().iter().zip(&oracle).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "f32 stride {stride}: {err}");
    }
}

#[test]
fn batched_conv_equals_per_sample() {
    let x = random(&[3, 2, 6, 6], 9);
    let w = random(&[4, 2, 3, 3], 10);
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w));
    let spec = Conv2dSpec { stride: 2, padding: 1 };
    let batched = t.conv2d(xv, wv, None, spec).unwrap();
    let out = t.value(batched).unstack();
    for (i, sample) in x.unstack().into_iter().enumerate() {
        let s = t.constant(sample);
        let y = t.conv2d(s, wv, None, spec).unwrap();
        assert_eq!(t.value(y).data(), out[i].data());
    }
}

#[test]
fn upsample_cases() {
    let mut t = Tape::<f64>::new();
    let c = t.constant(Tensor::full(&[2, 3, 5], 0.7));
    let up = t.upsample2x(c).unwrap();
    assert_eq!(t.shape(up), &[2, 6, 10]);
    assert!(t.value(up).data().iter().all(|&v| v == 0.7));

    let one = t.constant(Tensor::new(&[1, 1, 1], vec![2.5]).unwrap());
    let up = t.upsample2x(one).unwrap();
    assert_eq!(t.value(up).data(), &[2.5; 4]);

    // dst -> src = (dst + 0.5)/2 - 0.5 clamped: x-sources -0.25, 0.25, 0.75, 1.25
    let row = t.constant(Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap());
    let up = t.upsample2x(row).unwrap();
    let expected = [0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0];
    for (a, b) in t.value(up).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pointwise_values() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = t.constant(Tensor::scalar(0.0));
    let s = t.sigmoid(z).unwrap();
    let th = t.tanh(z).unwrap();
    assert_eq!(t.item(s), 0.5);
    assert_eq!(t.item(th), 0.0);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = t.relu(x).unwrap();
    let m = t.mean(r).unwrap();
    let g = t.backward(m).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0 / 3.0]);
}

#[test]
fn square_gradient_at_three() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.square(x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    let err = finite_diff_check(|t, x| t.square(x), &Tensor::scalar(3.0), 1e-3).unwrap();
    assert!(err < 1e-6);
}

#[test]
fn concat_channels_cases() {
    let mut t = Tape::<f64>::new();
    let a = t.param(Tensor::zeros(&[1, 2, 2]));
    let b = t.param(Tensor::full(&[1, 2, 2], 1.0));
    let c = t.concat_channels(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    let s = t.mean(c).unwrap();
    let s = t.scale(s, 8.0).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(a).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    assert!(g.get(b).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-15));

    let p = t.constant(Tensor::zeros(&[128, 8, 8]));
    let q = t.constant(Tensor::zeros(&[128, 8, 8]));
    let pq = t.concat_channels(p, q).unwrap();
    assert_eq!(t.shape(pq), &[256, 8, 8]);

    let bad = t.constant(Tensor::zeros(&[1, 3, 2]));
    assert!(t.concat_channels(a, bad).is_err());
}

#[test]
fn mean_cases() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let m = t.mean(x).unwrap();
    assert_eq!(t.item(m), 2.0);
    let z = t.constant(Tensor::zeros(&[4]));
    let m = t.mean(z).unwrap();
    assert_eq!(t.item(m), 0.0);
    let r = random(&[4, 4], 5);
    let sum: f64 = r.data().iter().sum();
    let rv = t.constant(r);
    let m = t.mean(rv).unwrap();
    assert!((t.item(m) - sum / 16.0).abs() < 1e-7);
    let e = t.constant(Tensor::zeros(&[0]));
    assert!(t.mean(e).is_err());
}

#[test]
fn backward_simple_cases() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::zeros(&[2, 2]));
    let m = t.mean(x).unwrap();
    let g = t.backward(m).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let xx = t.mul(x, x).unwrap();
    let m = t.mean(xx).unwrap();
    let g = t.backward(m).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);

    assert!(t.backward(xx).is_err(), "non-scalar loss must be rejected");
}

#[test]
fn fan_out_is_linear() {
    let x0 = random(&[3, 3], 11);
    let mut t = Tape::<f64>::new();
    let x = t.param(x0.clone());
    let y = t.add(x, x).unwrap();
    let m = t.mean(y).unwrap();
    let g1 = t.backward(m).unwrap().get(x).unwrap().clone();
    let mut t = Tape::<f64>::new();
    let x = t.param(x0);
    let y = t.scale(x, 2.0).unwrap();
    let m = t.mean(y).unwrap();
    let g2 = t.backward(m).unwrap().get(x).unwrap().clone();
    assert_eq!(g1, g2);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::new(&[1], vec![1.0]).unwrap());
    let z = t.constant(Tensor::new(&[1], vec![0.0]).unwrap());
    assert!(t.div(a, z).is_err());
}

#[test]
fn composite_conv_relu_mean_gradient() {
    let w0 = random(&[2, 1, 3, 3], 21);
    let input = random(&[1, 6, 6], 22);
    let f = |t: &mut Tape<f64>, w: Var| -> Result<Var> {
        let x = t.constant(input.clone());
        let y = t.conv2d(x, w, None, Conv2dSpec { stride: 1, padding: 1 })?;
        let y = t.relu(y)?;
        t.mean(y)
    };
    assert!(finite_diff_check(f, &w0, 1e-3).unwrap() < 1e-3);
}

type Op = fn(&mut Tape<f64>, Var) -> Result<Var>;

fn unary_graphs() -> Vec<(&'static str, Op)> {
    vec![
        ("relu", |t, x| {
            let y = t.relu(x)?;
            let y = t.mul(y, y)?;
            t.mean(y)
        }),
        ("tanh", |t, x| {
            let y = t.tanh(x)?;
            let y = t.square(y)?;
            t.mean(y)
        }),
        ("sigmoid", |t, x| {
            let y = t.sigmoid(x)?;
            let y = t.square(y)?;
            t.mean(y)
        }),
        ("square", |t, x| {
            let y = t.square(x)?;
            t.mean(y)
        }),
        ("sqrt_eps", |t, x| {
            let y = t.square(x)?;
            let y = t.sqrt_eps(y, 0.1)?;
            t.mean(y)
        }),
        ("div", |t, x| {
            let d = t.square(x)?;
            let d = t.offset(d, 0.5)?;
            let y = t.div(x, d)?;
            let y = t.square(y)?;
            t.mean(y)
        }),
        ("sub_mul", |t, x| {
            let s = t.sigmoid(x)?;
            let y = t.sub(x, s)?;
            let y = t.mul(y, x)?;
            t.mean(y)
        }),
        ("upsample", |t, x| {
            let y = t.upsample2x(x)?;
            let y = t.square(y)?;
            t.mean(y)
        }),
        ("diff", |t, x| {
            let a = t.diff_x(x)?;
            let b = t.diff_y(x)?;
            let a = t.square(a)?;
            let b = t.square(b)?;
            let (a, b) = (t.mean(a)?, t.mean(b)?);
            t.add(a, b)
        }),
        ("concat", |t, x| {
            let s = t.square(x)?;
            let y = t.concat_channels(x, s)?;
            let y = t.square(y)?;
            t.mean(y)
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn elementwise_ops_pass_gradient_check(c in 1usize..3, h in 2usize..8, w in 2usize..8, seed in 0u64..1000) {
        let x = random(&[c, h, w], seed);
        for (name, f) in unary_graphs() {
            let err = finite_diff_check(f, &x, 1e-3).unwrap();
            prop_assert!(err < 1e-3, "{} rel err {}", name, err);
        }
    }

    #[test]
    fn conv_passes_gradient_check(h in 3usize..8, w in 3usize..8, k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, seed in 0u64..1000) {
        let input = random(&[2, h, w], seed);
        let weight = random(&[3, 2, k, k], seed + 1);
        let bias = random(&[3], seed + 2);
        let spec = Conv2dSpec { stride, padding: k / 2 };
        let wrt_input = |t: &mut Tape<f64>, x: Var| -> Result<Var> {
            let (wv, bv) = (t.constant(weight.clone()), t.constant(bias.clone()));
            let y = t.conv2d(x, wv, Some(bv), spec)?;
            let y = t.square(y)?;
            t.mean(y)
        };
        prop_assert!(finite_diff_check(wrt_input, &input, 1e-3).unwrap() < 1e-3);
        let wrt_weight = |t: &mut Tape<f64>, wv: Var| -> Result<Var> {
            let (x, bv) = (t.constant(input.clone()), t.constant(bias.clone()));
            let y = t.conv2d(x, wv, Some(bv), spec)?;
            let y = t.square(y)?;
            t.mean(y)
        };
        prop_assert!(finite_diff_check(wrt_weight, &weight, 1e-3).unwrap() < 1e-3);
        let wrt_bias = |t: &mut Tape<f64>, bv: Var| -> Result<Var> {
            let (x, wv) = (t.constant(input.clone()), t.constant(weight.clone()));
            let y = t.conv2d(x, wv, Some(bv), spec)?;
            let y = t.square(y)?;
            t.mean(y)
        };
        prop_assert!(finite_diff_check(wrt_bias, &bias, 1e-3).unwrap() < 1e-3);
    }

    #[test]
    fn upsample_preserves_constants(h in 1usize..9, w in 1usize..9, v in -5.0f64..5.0) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(&[2, h, w], v));
        let y = t.upsample2x(x).unwrap();
        prop_assert!(t.value(y).data().iter().all(|&u| u == v));
    }
}

#[test]
fn mean_gradient_check_is_exact() {
    let x = random(&[3, 4], 3);
    let err = finite_diff_check(|t, x| t.mean(x), &x, 1e-3).unwrap();
    assert!(err < 1e-6);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let x = random(&[2, 1, 8, 8], 40).cast::<f32>();
    let w = random(&[4, 1, 3, 3], 41).cast::<f32>();
    let run = || {
        let mut t = Tape::<f32>::new();
        let (xv, wv) = (t.constant(x.clone()), t.param(w.clone()));
        let y = t.conv2d(xv, wv, None, Conv2dSpec { stride: 1, padding: 1 }).unwrap();
        let y = t.tanh(y).unwrap();
        let y = t.upsample2x(y).unwrap();
        let m = t.mean(y).unwrap();
        let g = t.backward(m).unwrap();
        (t.value(y).clone(), g.get(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

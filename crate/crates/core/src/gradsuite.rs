//! Finite-difference verification of every differentiable op, every loss
//! term and a sampled subset of the full network.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::circphase::{unit_project_var, PROJECT_EPS};
use crate::error::Result;
use crate::losses::{
    base_loss, circular_loss, consistency_loss, grad_loss, mae, mse, scalar_phase_loss, ssim_loss, total_loss,
    BaseMetric, CircularOutputs, LossWeights, TargetVars,
};
use crate::model::{forward, init_params, ModelConfig, ModelOutputs, ParamVars, Variant};
use crate::tensor::gradcheck::finite_diff_check_at;
use crate::tensor::{finite_diff_check, Conv2dSpec, SsimConstants, Tape, Tensor, Var};

/// Tolerance on the relative error of op and loss checks (f64).
pub const OP_TOLERANCE: f64 = 1e-3;
/// Tolerance on the sampled full-model check (f32).
pub const MODEL_TOLERANCE: f64 = 1e-2;

const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Include the sampled full-model checks.
    pub model: bool,
    pub model_n_c: usize,
    pub model_samples: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { seed: 0, model: true, model_n_c: 32, model_samples: 32 }
    }
}

pub fn all_passed(cases: &[GradCase]) -> bool {
    cases.iter().all(GradCase::passed)
}

pub fn report_text(cases: &[GradCase]) -> String {
    let mut s = String::from("# case max_rel_error tolerance status\n");
    for c in cases {
        let status = if c.passed() { "ok" } else { "FAIL" };
        writeln!(s, "{} {:e} {:e} {status}", c.name, c.error, c.tolerance).unwrap();
    }
    s
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.gen_range(lo..hi))
    }

    /// Values with magnitude in `[0.1, 1)` and random sign, away from kinks at 0.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = self.0.gen_range(0.1..1.0);
            if self.0.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }
}

/// `mean(f(x) ⊙ r)` with a fixed random `r`, so every output element
/// contributes a distinct weight.
fn reduce(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    tape.mean(p)
}

type Unary = fn(&mut Tape<f64>, Var) -> Result<Var>;

fn op_cases(g: &mut Gen) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let mut push = |name: &str, error: f64| out.push(GradCase { name: name.into(), error, tolerance: OP_TOLERANCE });
    let shape = [2, 3, 5];

    let unary: [(&str, Unary, bool); 9] = [
        ("relu", |t, x| t.relu(x), true),
        ("tanh", |t, x| t.tanh(x), false),
        ("sigmoid", |t, x| t.sigmoid(x), false),
        ("square", |t, x| t.square(x), false),
        ("abs", |t, x| t.abs(x), true),
        ("sqrt_eps", |t, x| t.sqrt_eps(x, 1e-8), false),
        ("scale", |t, x| t.scale(x, -1.7), false),
        ("offset", |t, x| t.offset(x, 0.3), false),
        ("mean", |t, x| t.mean(x), false),
    ];
    for (name, f, kink) in unary {
        let x = if name == "sqrt_eps" {
            g.uniform(&shape, 0.1, 2.0)
        } else if kink {
            g.off_zero(&shape)
        } else {
            g.uniform(&shape, -1.0, 1.0)
        };
        let err = if name == "mean" {
            finite_diff_check(f, &x, STEP)?
        } else {
            let r = g.uniform(&shape, -1.0, 1.0);
            finite_diff_check(
                move |t: &mut Tape<f64>, v| {
                    let y = f(t, v)?;
                    reduce(t, y, &r)
                },
                &x,
                STEP,
            )?
        };
        push(name, err);
    }

    type BinaryOp = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;
    let binary: [(&str, BinaryOp); 4] =
        [("add", |t, a, b| t.add(a, b)), ("sub", |t, a, b| t.sub(a, b)), ("mul", |t, a, b| t.mul(a, b)), ("div", |t, a, b| t.div(a, b))];
    for (name, f) in binary {
        let a = g.uniform(&shape, -1.0, 1.0);
        let b = g.off_zero(&shape).map(|v| v + v.signum() * 0.4);
        let r = g.uniform(&shape, -1.0, 1.0);
        let (ac, bc, r2) = (a.clone(), b.clone(), r.clone());
        let wrt_a = finite_diff_check(
            move |t: &mut Tape<f64>, v| {
                let bv = t.constant(bc.clone());
                let y = f(t, v, bv)?;
                reduce(t, y, &r)
            },
            &a,
            STEP,
        )?;
        let wrt_b = finite_diff_check(
            move |t: &mut Tape<f64>, v| {
                let av = t.constant(ac.clone());
                let y = f(t, av, v)?;
                reduce(t, y, &r2)
            },
            &b,
            STEP,
        )?;
        push(&format!("{name}.lhs"), wrt_a);
        push(&format!("{name}.rhs"), wrt_b);
    }

    {
        let a = g.uniform(&shape, -1.0, 1.0);
        let b = g.uniform(&shape, -1.0, 1.0);
        let r = g.uniform(&shape, -1.0, 1.0);
        let err = finite_diff_check(
            move |t: &mut Tape<f64>, v| {
                let bv = t.constant(b.clone());
                let y = t.weighted_sum(&[(0.7, v), (-1.3, bv), (2.0, v)])?;
                reduce(t, y, &r)
            },
            &a,
            STEP,
        )?;
        push("weighted_sum", err);
    }

    for (stride, pad) in [(1, 1), (2, 2), (2, 1)] {
        let x = g.uniform(&[2, 3, 8, 8], -1.0, 1.0);
        let w = g.uniform(&[4, 3, 3, 3], -0.5, 0.5);
        let b = g.uniform(&[4], -0.5, 0.5);
        let spec = Conv2dSpec { stride, padding: pad };
        let ho = (8 + 2 * pad - 3) / stride + 1;
        let r = g.uniform(&[2, 4, ho, ho], -1.0, 1.0);
        let case = |which: usize| -> Result<f64> {
            let (x, w, b, r) = (x.clone(), w.clone(), b.clone(), r.clone());
            let target = [&x, &w, &b][which].clone();
            finite_diff_check(
                move |t: &mut Tape<f64>, v| {
                    let xv = if which == 0 { v } else { t.constant(x.clone()) };
                    let wv = if which == 1 { v } else { t.constant(w.clone()) };
                    let bv = if which == 2 { v } else { t.constant(b.clone()) };
                    let y = t.conv2d(xv, wv, Some(bv), spec)?;
                    reduce(t, y, &r)
                },
                &target,
                STEP,
            )
        };
        for (i, part) in ["input", "weight", "bias"].iter().enumerate() {
            push(&format!("conv2d.s{stride}p{pad}.{part}"), case(i)?);
        }
    }

    {
        let x = g.uniform(&[1, 2, 4, 4], -1.0, 1.0);
        let r = g.uniform(&[1, 2, 8, 8], -1.0, 1.0);
        let err = finite_diff_check(
            move |t: &mut Tape<f64>, v| {
                let y = t.upsample2x(v)?;
                reduce(t, y, &r)
            },
            &x,
            STEP,
        )?;
        push("upsample2x", err);
    }

    {
        let a = g.uniform(&[2, 2, 4, 4], -1.0, 1.0);
        let b = g.uniform(&[2, 3, 4, 4], -1.0, 1.0);
        let r = g.uniform(&[2, 5, 4, 4], -1.0, 1.0);
        let (ac, bc, r2) = (a.clone(), b.clone(), r.clone());
        let lhs = finite_diff_check(
            move |t: &mut Tape<f64>, v| {
                let bv = t.constant(bc.clone());
                let y = t.concat_channels(v, bv)?;
                reduce(t, y, &r)
            },
            &a,
            STEP,
        )?;
        let rhs = finite_diff_check(
            move |t: &mut Tape<f64>, v| {
                let av = t.constant(ac.clone());
                let y = t.concat_channels(av, v)?;
                reduce(t, y, &r2)
            },
            &b,
            STEP,
        )?;
        push("concat_channels.lhs", lhs);
        push("concat_channels.rhs", rhs);
    }

    for (name, f, oshape) in [
        ("diff_x", (|t: &mut Tape<f64>, x| t.diff_x(x)) as Unary, [2, 8, 7]),
        ("diff_y", (|t: &mut Tape<f64>, x| t.diff_y(x)) as Unary, [2, 7, 8]),
    ] {
        let x = g.uniform(&[2, 8, 8], -1.0, 1.0);
        let r = g.uniform(&oshape, -1.0, 1.0);
        let err = finite_diff_check(
            move |t: &mut Tape<f64>, v| {
                let y = f(t, v)?;
                reduce(t, y, &r)
            },
            &x,
            STEP,
        )?;
        push(name, err);
    }

    {
        // the smallest grid holding more than one 11x11 window
        let x = g.uniform(&[12, 12], 0.0, 1.0);
        let y = g.uniform(&[12, 12], 0.0, 1.0);
        let err = finite_diff_check(
            move |t: &mut Tape<f64>, v| {
                let yv = t.constant(y.clone());
                t.ssim(v, yv, SsimConstants::default())
            },
            &x,
            STEP,
        )?;
        push("ssim", err);
    }
    Ok(out)
}

type PairLoss = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;

fn loss_cases(g: &mut Gen) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let mut push = |name: &str, error: f64| out.push(GradCase { name: name.into(), error, tolerance: OP_TOLERANCE });
    let shape = [2, 1, 8, 8];

    let pair: [(&str, PairLoss); 4] = [
        ("loss.mse", |t, a, b| mse(t, a, b)),
        ("loss.mae", |t, a, b| mae(t, a, b)),
        ("loss.grad", |t, a, b| grad_loss(t, a, b)),
        ("loss.consistency", |t, c, s| consistency_loss(t, c, s)),
    ];
    for (name, f) in pair {
        let y = g.uniform(&shape, -1.0, 1.0);
        let x = g.uniform(&shape, -1.0, 1.0);
        let err = finite_diff_check(
            move |t: &mut Tape<f64>, v| {
                let yv = t.constant(y.clone());
                f(t, yv, v)
            },
            &x,
            STEP,
        )?;
        push(name, err);
    }

    {
        let y = g.uniform(&[2, 1, 12, 12], 0.0, 1.0);
        let x = g.uniform(&[2, 1, 12, 12], 0.0, 1.0);
        let err = finite_diff_check(
            move |t: &mut Tape<f64>, v| {
                let yv = t.constant(y.clone());
                ssim_loss(t, yv, v)
            },
            &x,
            STEP,
        )?;
        push("loss.ssim", err);
    }

    for metric in [BaseMetric::Mse, BaseMetric::Mae] {
        let parts: Vec<Tensor<f64>> = (0..6).map(|_| g.uniform(&shape, -1.0, 1.0)).collect();
        for slot in [1, 3, 5] {
            let x = parts[slot].clone();
            let parts = parts.clone();
            let err = finite_diff_check(
                move |t: &mut Tape<f64>, v| {
                    let vars: Vec<Var> =
                        (0..6).map(|i| if i == slot { v } else { t.constant(parts[i].clone()) }).collect();
                    base_loss(t, metric, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])
                },
                &x,
                STEP,
            )?;
            let metric_name = if metric == BaseMetric::Mse { "mse" } else { "mae" };
            push(&format!("loss.base.{metric_name}.arg{slot}"), err);
        }
    }

    // circular term through the unit projection, including phases near the cut
    for which in 0..2 {
        let phi = Tensor::from_fn(&shape, |i| if i % 4 == 0 { 3.1 } else { g.0.gen_range(-3.1..3.1) });
        let c = phi.map(f64::cos);
        let s = phi.map(f64::sin);
        let c_pre = g.uniform(&shape, -1.0, 1.0);
        let s_pre = g.uniform(&shape, -1.0, 1.0);
        let other = if which == 0 { s_pre.clone() } else { c_pre.clone() };
        let target = if which == 0 { c_pre } else { s_pre };
        let err = finite_diff_check(
            move |t: &mut Tape<f64>, v| {
                let o = t.constant(other.clone());
                let (cp, sp) = if which == 0 { (v, o) } else { (o, v) };
                let (ch, sh) = unit_project_var(t, cp, sp, PROJECT_EPS)?;
                let cv = t.constant(c.clone());
                let sv = t.constant(s.clone());
                circular_loss(t, cv, ch, sv, sh)
            },
            &target,
            STEP,
        )?;
        push(if which == 0 { "loss.circular.c_pre" } else { "loss.circular.s_pre" }, err);
    }

    // composite objectives on 12x12 planes so the SSIM terms are active
    let shape = [1, 1, 12, 12];
    let amp = g.uniform(&shape, 0.2, 0.9);
    let phase = g.uniform(&shape, -3.1, 3.1);
    let weights = LossWeights::default();
    for (slot, name) in ["amp", "c_pre", "s_pre"].iter().enumerate() {
        let preds = [g.uniform(&shape, 0.1, 0.95), g.uniform(&shape, -1.0, 1.0), g.uniform(&shape, -1.0, 1.0)];
        let (amp, phase) = (amp.clone(), phase.clone());
        let target = preds[slot].clone();
        let err = finite_diff_check(
            move |t: &mut Tape<f64>, v| {
                let vars: Vec<Var> = (0..3).map(|i| if i == slot { v } else { t.constant(preds[i].clone()) }).collect();
                let (c, s) = unit_project_var(t, vars[1], vars[2], PROJECT_EPS)?;
                let pred = CircularOutputs { amp: vars[0], c_pre: vars[1], s_pre: vars[2], c, s };
                let tv = TargetVars::register(t, amp.clone(), phase.clone(), phase.map(f64::cos), phase.map(f64::sin));
                Ok(total_loss(t, &pred, &tv, &weights, BaseMetric::Mse)?.total)
            },
            &target,
            STEP,
        )?;
        push(&format!("loss.total.{name}"), err);
    }
    {
        let amp_hat = g.uniform(&shape, 0.1, 0.95);
        let phase_hat = g.uniform(&shape, -3.0, 3.0);
        let err = finite_diff_check(
            move |t: &mut Tape<f64>, v| {
                let a = t.constant(amp_hat.clone());
                let tv = TargetVars::register(t, amp.clone(), phase.clone(), phase.map(f64::cos), phase.map(f64::sin));
                Ok(scalar_phase_loss(t, a, v, &tv, &weights, BaseMetric::Mse)?.total)
            },
            &phase_hat,
            STEP,
        )?;
        push("loss.scalar_phase.phase", err);
    }
    Ok(out)
}

fn model_case(variant: Variant, cfg: &SuiteConfig, g: &mut Gen) -> Result<GradCase> {
    let mc = ModelConfig { n_c: cfg.model_n_c, variant, seed: cfg.seed, i_max: 1000.0, ..ModelConfig::default() };
    let params = init_params(&mc)?;
    let x = Tensor::from_fn(&[1, 1, 32, 32], |_| g.0.gen_range(0.0f32..1000.0));
    let amp = Tensor::from_fn(&[1, 1, 32, 32], |_| g.0.gen_range(0.2f32..0.9));
    let phase = Tensor::from_fn(&[1, 1, 32, 32], |_| g.0.gen_range(-3.1f32..3.1));
    let weights: Vec<String> = params.iter().filter(|(_, t)| t.shape().len() == 4).map(|(k, _)| k.clone()).collect();
    let mut worst = 0.0f64;
    for k in 0..cfg.model_samples {
        let name = weights[k % weights.len()].clone();
        let t = params.get(&name)?;
        let idx = g.0.gen_range(0..t.len());
        let loss = |tape: &mut Tape<f32>, v: Var| {
            let mut pv = ParamVars::register(tape, &params);
            pv.0.insert(name.clone(), v);
            let out = forward(tape, &pv, &x, &mc)?;
            let target = TargetVars::register(tape, amp.clone(), phase.clone(), phase.map(f32::cos), phase.map(f32::sin));
            let terms = match out {
                ModelOutputs::Circular(o) => total_loss(tape, &o, &target, &LossWeights::default(), BaseMetric::Mse)?,
                ModelOutputs::Scalar { amp, phase } => {
                    scalar_phase_loss(tape, amp, phase, &target, &LossWeights::default(), BaseMetric::Mse)?
                }
            };
            Ok(terms.total)
        };
        worst = worst.max(finite_diff_check_at(loss, t, 1e-2, &[idx])?);
    }
    Ok(GradCase { name: format!("model.{variant}"), error: worst, tolerance: MODEL_TOLERANCE })
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<GradCase>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut cases = op_cases(&mut g)?;
    cases.extend(loss_cases(&mut g)?);
    if cfg.model {
        for variant in [Variant::Full, Variant::ScalarPhase] {
            cases.push(model_case(variant, cfg, &mut g)?);
        }
    }
    Ok(cases)
}

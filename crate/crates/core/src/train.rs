//! Optimisation loop: Adam, triangular-2 cyclic learning rate, global-norm
//! clipping and validation-based model selection.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::circphase::manifold_deviation;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{scalar_phase_loss, total_loss, BaseMetric, LossBreakdown, LossWeights, TargetVars};
use crate::model::{
    estimate_i_max, forward, init_params, Checkpoint, ModelConfig, ModelOutputs, ModelParams, ParamVars, Variant,
};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub half_cycle_epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub base_metric: BaseMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 25,
            half_cycle_epochs: 6,
            clip_norm: 1.0,
            seed: 0,
            weights: LossWeights::default(),
            base_metric: BaseMetric::Mse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.half_cycle_epochs == 0 {
            return Err(Error::invalid(format!("invalid training config {self:?}")));
        }
        self.weights.validate()
    }
}

/// A named ablation: an architecture variant or a change to the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Model(Variant),
    NoCircLoss,
    NoConsistLoss,
    NoSsimLoss,
    NoGradLoss,
    MseOnly,
    MaeOnly,
}

impl Ablation {
    pub const LOSS: [Ablation; 6] =
        [Ablation::NoCircLoss, Ablation::NoConsistLoss, Ablation::NoSsimLoss, Ablation::NoGradLoss, Ablation::MseOnly, Ablation::MaeOnly];

    pub fn all() -> Vec<Ablation> {
        Variant::ALL.into_iter().map(Ablation::Model).chain(Ablation::LOSS).collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Model(v) => v.as_str(),
            Ablation::NoCircLoss => "no_circ_loss",
            Ablation::NoConsistLoss => "no_consist_loss",
            Ablation::NoSsimLoss => "no_ssim_loss",
            Ablation::NoGradLoss => "no_grad_loss",
            Ablation::MseOnly => "mse_only",
            Ablation::MaeOnly => "mae_only",
        }
    }

    /// Applies the toggle on top of the given configurations.
    pub fn apply(self, model: &mut ModelConfig, tc: &mut TrainConfig) {
        let w = &mut tc.weights;
        match self {
            Ablation::Model(v) => model.variant = v,
            Ablation::NoCircLoss => w.lambda_circ = 0.0,
            Ablation::NoConsistLoss => w.w_c = 0.0,
            Ablation::NoSsimLoss => w.lambda_s = 0.0,
            Ablation::NoGradLoss => w.lambda_g = 0.0,
            Ablation::MseOnly | Ablation::MaeOnly => {
                w.w_a = 0.0;
                w.w_p = 0.0;
                w.w_c = 0.0;
                tc.base_metric = if self == Ablation::MseOnly { BaseMetric::Mse } else { BaseMetric::Mae };
            }
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::all()
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation {s:?}")))
    }
}

/// Triangular-2 schedule between `η/10` and a peak that halves every cycle.
pub fn cyclic_lr(step: usize, steps_per_half_cycle: usize, eta: f64) -> Result<f64> {
    if steps_per_half_cycle == 0 {
        return Err(Error::invalid("steps_per_half_cycle must be positive"));
    }
    let half = steps_per_half_cycle as f64;
    let cycle = step / (2 * steps_per_half_cycle);
    let x = (step as f64 / half - 2.0 * cycle as f64 - 1.0).abs();
    let base = eta / 10.0;
    let amplitude = (eta - base) / 2f64.powi(cycle.min(1023) as i32);
    Ok(base + amplitude * (1.0 - x).max(0.0))
}

pub type GradMap = BTreeMap<String, Tensor>;

/// Global L2 norm over all gradients, in `f64`.
pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradMap, max_norm: f64) -> Result<f64> {
    if grads.values().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = (*v as f64 * s) as f32);
        }
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: GradMap,
    pub v: GradMap,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: GradMap = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut ModelParams, grads: &GradMap, state: &mut AdamState, lr: f64) -> Result<()> {
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (name, p) in params.0.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", format!("{name}: {:?} vs {:?}", g.shape(), p.shape())));
        }
        let m = state.m.get_mut(name).ok_or_else(|| Error::invalid(format!("no moment for {name}")))?;
        let v = state.v.get_mut(name).ok_or_else(|| Error::invalid(format!("no moment for {name}")))?;
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gv = gv as f64;
            let m1 = b1 * *mv as f64 + (1.0 - b1) * gv;
            let v1 = b2 * *vv as f64 + (1.0 - b2) * gv * gv;
            *mv = m1 as f32;
            *vv = v1 as f32;
            let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + state.eps);
            *pv = (*pv as f64 - update) as f32;
        }
    }
    Ok(())
}

/// One mini-batch as network input and targets, each `N×1×H×W`.
pub struct Batch {
    pub intensity: Tensor,
    pub amp: Tensor,
    pub phase: Tensor,
    pub cos: Tensor,
    pub sin: Tensor,
}

pub fn make_batch(ds: &Dataset, indices: &[usize]) -> Result<Batch> {
    fn stack<'a>(indices: &[usize], f: impl Fn(usize) -> &'a Tensor) -> Result<Tensor> {
        let items: Vec<&Tensor> = indices.iter().map(|&i| f(i)).collect();
        let t = Tensor::stack(&items)?;
        let s = t.shape().to_vec();
        t.reshape(&[s[0], 1, s[1], s[2]])
    }
    Ok(Batch {
        intensity: stack(indices, |i| &ds.frames[i].intensity)?,
        amp: stack(indices, |i| &ds.patches[i].amplitude)?,
        phase: stack(indices, |i| &ds.patches[i].phase)?,
        cos: stack(indices, |i| &ds.patches[i].cosp)?,
        sin: stack(indices, |i| &ds.patches[i].sinp)?,
    })
}

/// Loss values (and optionally parameter gradients) for one batch.
pub struct BatchEval {
    pub breakdown: LossBreakdown,
    pub manifold_dev: Option<f64>,
    pub grads: Option<GradMap>,
}

pub fn eval_batch(
    params: &ModelParams,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    batch: &Batch,
    want_grads: bool,
) -> Result<BatchEval> {
    let mut tape = Tape::<f32>::new();
    let pv = ParamVars::register(&mut tape, params);
    let out = forward(&mut tape, &pv, &batch.intensity, cfg)?;
    let target = TargetVars::register(&mut tape, batch.amp.clone(), batch.phase.clone(), batch.cos.clone(), batch.sin.clone());
    let (terms, manifold_dev) = match out {
        ModelOutputs::Circular(o) => {
            let dev = manifold_deviation(tape.value(o.c_pre), tape.value(o.s_pre));
            (total_loss(&mut tape, &o, &target, &tc.weights, tc.base_metric)?, Some(dev))
        }
        ModelOutputs::Scalar { amp, phase } => {
            (scalar_phase_loss(&mut tape, amp, phase, &target, &tc.weights, tc.base_metric)?, None)
        }
    };
    let breakdown = terms.breakdown(&tape);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    let grads = if want_grads {
        let mut g = tape.backward(terms.total)?;
        Some(pv.0.iter().map(|(k, &v)| (k.clone(), g.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))).collect())
    } else {
        None
    };
    Ok(BatchEval { breakdown, manifold_dev, grads })
}

/// Mean loss (and manifold deviation) over a set of frames.
pub fn evaluate_split(params: &ModelParams, cfg: &ModelConfig, tc: &TrainConfig, ds: &Dataset, indices: &[usize]) -> Result<(LossBreakdown, Option<f64>)> {
    if indices.is_empty() {
        return Err(Error::Empty("evaluate_split"));
    }
    let mut sum = [0.0; 10];
    let mut dev_sum = 0.0;
    let mut has_dev = false;
    for chunk in indices.chunks(tc.batch_size) {
        let e = eval_batch(params, cfg, tc, &make_batch(ds, chunk)?, false)?;
        let n = chunk.len() as f64;
        for (s, v) in sum.iter_mut().zip(e.breakdown.values()) {
            *s += v * n;
        }
        if let Some(d) = e.manifold_dev {
            dev_sum += d * n;
            has_dev = true;
        }
    }
    let n = indices.len() as f64;
    Ok((LossBreakdown::from_values(sum.map(|s| s / n)), has_dev.then(|| dev_sum / n)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub train_total: f64,
    pub val: LossBreakdown,
    pub val_manifold_dev: Option<f64>,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub best: Checkpoint,
    pub final_params: ModelParams,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// Trains on the `train` split and selects the epoch with the lowest
/// validation total loss. `I_max` is estimated from the training frames and
/// frozen into the returned configuration. `on_improve` runs each time a new
/// best checkpoint is found.
pub fn train(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    mut on_improve: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainReport> {
    tc.validate()?;
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Empty("train/val split"));
    }
    let mut cfg = *model_cfg;
    cfg.i_max = estimate_i_max(train_idx.iter().map(|&i| &ds.frames[i].intensity))?;
    cfg.validate()?;
    let mut params = init_params(&cfg)?;
    let mut adam = AdamState::new(&params);
    let steps_per_epoch = train_idx.len().div_ceil(tc.batch_size);
    let half = tc.half_cycle_epochs * steps_per_epoch;

    let (val0, dev0) = evaluate_split(&params, &cfg, tc, ds, &val_idx)?;
    let mut epochs = vec![EpochLog { epoch: 0, train_total: f64::NAN, val: val0, val_manifold_dev: dev0, improved: false }];
    let mut best: Option<Checkpoint> = None;
    let mut steps = Vec::new();
    let mut step = 0;
    for epoch in 1..=tc.epochs {
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let lr = cyclic_lr(step, half, tc.lr)?;
            let e = eval_batch(&params, &cfg, tc, &make_batch(ds, chunk)?, true)?;
            let mut grads = e.grads.expect("gradients requested");
            let grad_norm = clip_grad_norm(&mut grads, tc.clip_norm)?;
            let clipped_norm = global_norm(&grads);
            adam_step(&mut params, &grads, &mut adam, lr)?;
            train_sum += e.breakdown.total * chunk.len() as f64;
            steps.push(StepLog { step, epoch, lr, grad_norm, clipped_norm, breakdown: e.breakdown });
            step += 1;
        }
        let (val, dev) = evaluate_split(&params, &cfg, tc, ds, &val_idx)?;
        let improved = best.as_ref().map_or(true, |b| val.total < b.val_loss);
        if improved {
            let ck = Checkpoint { cfg, params: params.clone(), epoch, val_loss: val.total };
            on_improve(&ck)?;
            best = Some(ck);
        }
        epochs.push(EpochLog { epoch, train_total: train_sum / train_idx.len() as f64, val, val_manifold_dev: dev, improved });
    }
    Ok(TrainReport { best: best.expect("at least one epoch"), final_params: params, steps, epochs })
}

fn csv_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn loss_log_csv(steps: &[StepLog]) -> String {
    let mut s = String::from("step,epoch,lr,grad_norm,clipped_norm");
    for f in LossBreakdown::FIELDS {
        s.push(',');
        s.push_str(f);
    }
    s.push('\n');
    for l in steps {
        write!(s, "{},{},{},{},{}", l.step, l.epoch, l.lr, l.grad_norm, l.clipped_norm).unwrap();
        for v in l.breakdown.values() {
            write!(s, ",{}", csv_f(v)).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn epoch_log_csv(epochs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_total,val_total,val_manifold_dev,improved\n");
    for e in epochs {
        let dev = e.val_manifold_dev.map(csv_f).unwrap_or_default();
        writeln!(s, "{},{},{},{},{}", e.epoch, csv_f(e.train_total), e.val.total, dev, e.improved as u8).unwrap();
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

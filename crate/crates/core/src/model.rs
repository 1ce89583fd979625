//! Dual-gain encoder, shared skip path and per-quantity decoders.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circphase::{unit_project_var, PROJECT_EPS};
use crate::dataset::{read_grid, write_grid};
use crate::error::{Error, Result};
use crate::losses::CircularOutputs;
use crate::tensor::{Conv2dSpec, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    ScalarPhase,
    SingleGain,
    NoSkip,
    NoOutnorm,
    DeepFusion,
    ThreeGain,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::ScalarPhase,
        Variant::SingleGain,
        Variant::NoSkip,
        Variant::NoOutnorm,
        Variant::DeepFusion,
        Variant::ThreeGain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ScalarPhase => "scalar_phase",
            Variant::SingleGain => "single_gain",
            Variant::NoSkip => "no_skip",
            Variant::NoOutnorm => "no_outnorm",
            Variant::DeepFusion => "deep_fusion",
            Variant::ThreeGain => "three_gain",
        }
    }

    fn has_skip(self) -> bool {
        self != Variant::NoSkip
    }

    /// Gain exponents feeding one encoder each, in branch order.
    fn branch_gains(self, cfg: &ModelConfig) -> Vec<(&'static str, f64)> {
        match self {
            Variant::SingleGain => vec![("h", cfg.g_h)],
            Variant::ThreeGain => vec![("l", cfg.g_l), ("m", 0.5 * (cfg.g_l + cfg.g_h)), ("h", cfg.g_h)],
            _ => vec![("l", cfg.g_l), ("h", cfg.g_h)],
        }
    }

    fn decoders(self) -> &'static [&'static str] {
        match self {
            Variant::ScalarPhase => &["amp", "phase"],
            _ => &["amp", "cos", "sin"],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_c: usize,
    pub i_sat: f64,
    pub alpha: f64,
    pub g0: f64,
    pub g_l: f64,
    pub g_h: f64,
    /// Frozen 99.5th percentile of training intensities.
    pub i_max: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { n_c: 32, i_sat: 4095.0, alpha: 0.85, g0: 0.0, g_l: 0.001, g_h: 4.0, i_max: 1.0, variant: Variant::Full, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 {
            return Err(Error::invalid("n_c must be positive"));
        }
        if !(self.g_l < self.g_h) {
            return Err(Error::invalid(format!("g_l {} must be below g_h {}", self.g_l, self.g_h)));
        }
        if !(self.i_sat > 0.0) || !(self.i_max > 0.0) || !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("i_sat {}, i_max {}, alpha {} must be positive", self.i_sat, self.i_max, self.alpha)));
        }
        Ok(())
    }

    /// `k = I_sat·α / (2^g0·I_max) · 2^g`.
    pub fn gain_factor(&self, g: f64) -> f64 {
        self.i_sat * self.alpha / (2f64.powf(self.g0) * self.i_max) * 2f64.powf(g)
    }
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of the given values.
pub fn percentile(values: &mut [f32], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile"));
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let (_, &mut a, upper) = values.select_nth_unstable_by(lo, f32::total_cmp);
    let b = upper.iter().copied().fold(f32::INFINITY, f32::min);
    let b = if b.is_finite() { b } else { a };
    Ok(a as f64 + (pos - lo as f64) * (b as f64 - a as f64))
}

/// 99.5th percentile over every pixel of the given frames.
pub fn estimate_i_max<'a>(frames: impl IntoIterator<Item = &'a Tensor>) -> Result<f64> {
    let mut all: Vec<f32> = frames.into_iter().flat_map(|t| t.data().iter().copied()).collect();
    let v = percentile(&mut all, 99.5)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(Error::invalid("training intensities have a nonpositive 99.5th percentile"))
    }
}

/// Clipped gain view `min(k·I, I_sat)` in detector units.
pub fn sadgs_branch(intensity: &Tensor, cfg: &ModelConfig, g: f64) -> Result<Tensor> {
    if !(cfg.i_max > 0.0) {
        return Err(Error::invalid(format!("I_max must be positive, got {}", cfg.i_max)));
    }
    if intensity.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("intensity must be nonnegative"));
    }
    let k = cfg.gain_factor(g);
    let sat = cfg.i_sat;
    Ok(intensity.map(|v| (k * v as f64).min(sat) as f32))
}

/// Low- and high-gain views normalised by `I_sat` to `[0, 1]`.
pub fn sadgs(intensity: &Tensor, cfg: &ModelConfig) -> Result<(Tensor, Tensor)> {
    let inv = 1.0 / cfg.i_sat;
    let lo = sadgs_branch(intensity, cfg, cfg.g_l)?.map(|v| (v as f64 * inv) as f32);
    let hi = sadgs_branch(intensity, cfg, cfg.g_h)?.map(|v| (v as f64 * inv) as f32);
    Ok((lo, hi))
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams(pub BTreeMap<String, Tensor>);

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn count(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    name: String,
    cout: usize,
    cin: usize,
    k: usize,
    bias: bool,
}

fn conv_layer(name: impl Into<String>, cout: usize, cin: usize, k: usize, bias: bool) -> ConvLayer {
    ConvLayer { name: name.into(), cout, cin, k, bias }
}

fn layers(n_c: usize, variant: Variant, cfg_gains: usize) -> Vec<ConvLayer> {
    let mut out = Vec::new();
    let branches: &[&str] = match cfg_gains {
        1 => &["h"],
        3 => &["l", "m", "h"],
        _ => &["l", "h"],
    };
    for b in branches {
        let widths = [1, n_c, 2 * n_c, 4 * n_c];
        for s in 0..3 {
            out.push(conv_layer(format!("enc_{b}.{s}"), widths[s + 1], widths[s], 5, true));
        }
    }
    let fused_in = 4 * n_c * branches.len();
    if variant == Variant::DeepFusion {
        out.push(conv_layer("fusion.0", 8 * n_c, fused_in, 3, false));
        out.push(conv_layer("fusion.1", 4 * n_c, 8 * n_c, 3, false));
    } else {
        out.push(conv_layer("fusion", 4 * n_c, fused_in, 1, false));
    }
    if variant.has_skip() {
        out.push(conv_layer("skip.0", n_c, 1, 3, true));
        out.push(conv_layer("skip.1", 2 * n_c, n_c, 3, true));
    }
    let b2_in = if variant.has_skip() { 6 * n_c } else { 4 * n_c };
    for d in variant.decoders() {
        out.push(conv_layer(format!("dec_{d}.b1.0"), 4 * n_c, 4 * n_c, 3, true));
        out.push(conv_layer(format!("dec_{d}.b1.1"), 4 * n_c, 4 * n_c, 3, true));
        out.push(conv_layer(format!("dec_{d}.b2.0"), 2 * n_c, b2_in, 3, true));
        out.push(conv_layer(format!("dec_{d}.b2.1"), 2 * n_c, 2 * n_c, 3, true));
        out.push(conv_layer(format!("dec_{d}.b3.0"), 2 * n_c, 2 * n_c, 3, true));
        out.push(conv_layer(format!("dec_{d}.b3.1"), 2 * n_c, 2 * n_c, 3, true));
        out.push(conv_layer(format!("dec_{d}.out"), 1, 2 * n_c, 3, true));
    }
    out
}

fn model_layers(cfg: &ModelConfig) -> Vec<ConvLayer> {
    layers(cfg.n_c, cfg.variant, cfg.variant.branch_gains(cfg).len())
}

/// Parameter names with shapes, in layer order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for l in model_layers(cfg) {
        out.push((format!("{}.w", l.name), vec![l.cout, l.cin, l.k, l.k]));
        if l.bias {
            out.push((format!("{}.b", l.name), vec![l.cout]));
        }
    }
    out
}

/// Uniform `[-b, b]` weights with `b = sqrt(6/fan_in)`, zero biases.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut map = BTreeMap::new();
    for (name, shape) in param_shapes(cfg) {
        let t = if shape.len() == 4 {
            let bound = (6.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt() as f32;
            Tensor::from_fn(&shape, |_| rng.gen_range(-bound..=bound))
        } else {
            Tensor::zeros(&shape)
        };
        map.insert(name, t);
    }
    Ok(ModelParams(map))
}

/// Parameter leaves registered on one tape.
pub struct ParamVars(pub BTreeMap<String, Var>);

impl ParamVars {
    pub fn register<T: Real>(tape: &mut Tape<T>, params: &ModelParams) -> Self {
        ParamVars(params.iter().map(|(k, v)| (k.clone(), tape.param(v.cast()))).collect())
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.0.get(name).copied().ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }
}

pub enum ModelOutputs {
    Circular(CircularOutputs),
    Scalar { amp: Var, phase: Var },
}

impl ModelOutputs {
    pub fn amp(&self) -> Var {
        match self {
            ModelOutputs::Circular(c) => c.amp,
            ModelOutputs::Scalar { amp, .. } => *amp,
        }
    }
}

fn layer_err(layer: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite(op) => Error::NonFinite(format!("{layer} ({op})")),
        other => other,
    }
}

fn conv<T: Real>(tape: &mut Tape<T>, p: &ParamVars, x: Var, layer: &str, stride: usize, pad: usize, relu: bool) -> Result<Var> {
    let w = p.get(&format!("{layer}.w"))?;
    let b = p.0.get(&format!("{layer}.b")).copied();
    let y = tape.conv2d(x, w, b, Conv2dSpec { stride, padding: pad }).map_err(layer_err(layer))?;
    if relu {
        tape.relu(y).map_err(layer_err(layer))
    } else {
        Ok(y)
    }
}

fn decoder<T: Real>(tape: &mut Tape<T>, p: &ParamVars, z: Var, skip: Option<Var>, d: &str) -> Result<Var> {
    let mut x = conv(tape, p, z, &format!("dec_{d}.b1.0"), 1, 1, true)?;
    x = conv(tape, p, x, &format!("dec_{d}.b1.1"), 1, 1, true)?;
    x = tape.upsample2x(x)?;
    if let Some(s) = skip {
        x = tape.concat_channels(x, s)?;
    }
    x = conv(tape, p, x, &format!("dec_{d}.b2.0"), 1, 1, true)?;
    x = conv(tape, p, x, &format!("dec_{d}.b2.1"), 1, 1, true)?;
    x = tape.upsample2x(x)?;
    x = conv(tape, p, x, &format!("dec_{d}.b3.0"), 1, 1, true)?;
    x = conv(tape, p, x, &format!("dec_{d}.b3.1"), 1, 1, true)?;
    x = tape.upsample2x(x)?;
    conv(tape, p, x, &format!("dec_{d}.out"), 1, 1, false)
}

/// Network input views of a batch of raw intensities (`N×1×H×W`): one
/// normalised gain view per encoder branch, and the skip input `I/I_max`.
pub fn input_views(intensity: &Tensor, cfg: &ModelConfig) -> Result<(Vec<Tensor>, Tensor)> {
    let inv = 1.0 / cfg.i_sat;
    let branches = cfg
        .variant
        .branch_gains(cfg)
        .into_iter()
        .map(|(_, g)| Ok(sadgs_branch(intensity, cfg, g)?.map(|v| (v as f64 * inv) as f32)))
        .collect::<Result<Vec<_>>>()?;
    let skip = intensity.map(|v| (v as f64 / cfg.i_max) as f32);
    Ok((branches, skip))
}

/// Records the network on `tape` for a batch `N×1×H×W` of raw intensities.
pub fn forward<T: Real>(tape: &mut Tape<T>, params: &ParamVars, intensity: &Tensor, cfg: &ModelConfig) -> Result<ModelOutputs> {
    let shape = intensity.shape();
    if shape.len() != 4 || shape[1] != 1 || shape[2] % 8 != 0 || shape[3] % 8 != 0 {
        return Err(Error::shape("forward", format!("expected N×1×H×W with H, W divisible by 8, got {shape:?}")));
    }
    let (views, skip_in) = input_views(intensity, cfg)?;
    let names = cfg.variant.branch_gains(cfg);
    let mut fused: Option<Var> = None;
    for ((b, _), view) in names.iter().zip(views) {
        let mut x = tape.constant(view.cast());
        for s in 0..3 {
            x = conv(tape, params, x, &format!("enc_{b}.{s}"), 2, 2, true)?;
        }
        fused = Some(match fused {
            None => x,
            Some(prev) => tape.concat_channels(prev, x)?,
        });
    }
    let fused = fused.expect("at least one branch");
    let z = if cfg.variant == Variant::DeepFusion {
        let h = conv(tape, params, fused, "fusion.0", 1, 1, true)?;
        conv(tape, params, h, "fusion.1", 1, 1, false)?
    } else {
        conv(tape, params, fused, "fusion", 1, 0, false)?
    };
    let skip = if cfg.variant.has_skip() {
        let x = tape.constant(skip_in.cast());
        let h = conv(tape, params, x, "skip.0", 2, 1, true)?;
        Some(conv(tape, params, h, "skip.1", 2, 1, false)?)
    } else {
        None
    };
    let amp_logits = decoder(tape, params, z, skip, "amp")?;
    let amp = tape.sigmoid(amp_logits).map_err(layer_err("dec_amp.out"))?;
    if cfg.variant == Variant::ScalarPhase {
        let logits = decoder(tape, params, z, skip, "phase")?;
        let t = tape.tanh(logits).map_err(layer_err("dec_phase.out"))?;
        let phase = tape.scale(t, std::f64::consts::PI)?;
        return Ok(ModelOutputs::Scalar { amp, phase });
    }
    let c_logits = decoder(tape, params, z, skip, "cos")?;
    let c_pre = tape.tanh(c_logits).map_err(layer_err("dec_cos.out"))?;
    let s_logits = decoder(tape, params, z, skip, "sin")?;
    let s_pre = tape.tanh(s_logits).map_err(layer_err("dec_sin.out"))?;
    let (c, s) = if cfg.variant == Variant::NoOutnorm {
        (c_pre, s_pre)
    } else {
        unit_project_var(tape, c_pre, s_pre, PROJECT_EPS)?
    };
    Ok(ModelOutputs::Circular(CircularOutputs { amp, c_pre, s_pre, c, s }))
}

/// Trained weights with the metadata needed to reuse them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub epoch: usize,
    pub val_loss: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    cfg: ModelConfig,
    epoch: usize,
    val_loss: f64,
    params: Vec<String>,
}

const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in self.params.iter() {
            write_grid(&dir.join(format!("{name}.ptg")), t)?;
        }
        let manifest = CheckpointManifest {
            cfg: self.cfg,
            epoch: self.epoch,
            val_loss: self.val_loss,
            params: self.params.0.keys().cloned().collect(),
        };
        let mut line = serde_json::to_string(&manifest).expect("manifest serialises");
        line.push('\n');
        let path = dir.join(CHECKPOINT_MANIFEST);
        fs::write(&path, line).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CheckpointManifest =
            serde_json::from_str(text.trim()).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        m.cfg.validate()?;
        let expected: Vec<String> = param_shapes(&m.cfg).into_iter().map(|(n, _)| n).collect();
        let mut sorted = expected.clone();
        sorted.sort();
        if sorted != m.params {
            return Err(Error::invalid(format!("{}: parameter list does not match variant {}", path.display(), m.cfg.variant)));
        }
        let mut map = BTreeMap::new();
        for (name, shape) in param_shapes(&m.cfg) {
            let t = read_grid(&dir.join(format!("{name}.ptg")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("checkpoint", format!("{name}: {:?} vs {shape:?}", t.shape())));
            }
            map.insert(name, t);
        }
        Ok(Checkpoint { cfg: m.cfg, params: ModelParams(map), epoch: m.epoch, val_loss: m.val_loss })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let mut v: Vec<f32> = (0..=10).map(|i| i as f32).collect();
        assert_eq!(percentile(&mut v, 50.0).unwrap(), 5.0);
        let mut v: Vec<f32> = vec![4.0, 1.0, 3.0, 2.0];
        assert!((percentile(&mut v, 99.5).unwrap() - 3.985).abs() < 1e-9);
        assert!(percentile(&mut [], 50.0).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
    }
}

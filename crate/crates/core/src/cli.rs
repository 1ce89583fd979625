//! Command-line stages chained through files.
//!
//! Every stage writes `config.toml` (the effective configuration) and
//! `provenance.json` (stage, config hash, seed) into its output directory,
//! and refuses inputs produced under a different config hash unless
//! `--force` is given.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{read_grid, simulate, write_grid, Dataset, NoiseConfig, Object, SimConfig, Split};
use crate::epie::{compare_to_truth, epie_reconstruct, illumination_mask, EpieConfig};
use crate::error::{Error, Result};
use crate::gradsuite::{all_passed, report_text, run_suite, SuiteConfig};
use crate::losses::{BaseMetric, LossWeights};
use crate::model::{Checkpoint, ModelConfig, Variant};
use crate::physics::ProbeParams;
use crate::recon::{centre_square, infer, radial_psd, report, stitch, Prediction, ReconReport, StitchConfig, Stitched};
use crate::tensor::Tensor;
use crate::train::{epoch_log_csv, loss_log_csv, train, Ablation, TrainConfig};

pub const PROVENANCE_FILE: &str = "provenance.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const PATCH_INDEX_FILE: &str = "patches.json";

/// Flat configuration of every stage. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub rows: usize,
    pub cols: usize,
    pub step: usize,
    pub jitter_max: usize,
    pub probe_size: usize,
    pub probe_radius: f64,
    pub probe_sigma: f64,
    pub probe_curvature: f64,
    pub noise: bool,
    pub peak_photons: f64,
    pub read_sigma_frac: f64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub val_fraction: f64,

    pub n_c: usize,
    pub variant: Variant,
    pub i_sat: f64,
    pub alpha: f64,
    pub g0: f64,
    pub g_l: f64,
    pub g_h: f64,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub half_cycle_epochs: usize,
    pub clip_norm: f64,
    pub w_b: f64,
    pub w_a: f64,
    pub w_p: f64,
    pub w_c: f64,
    pub lambda_circ: f64,
    pub lambda_g: f64,
    pub lambda_s: f64,
    pub base_metric: String,

    pub infer_batch: usize,
    pub stitch_floor: f64,

    pub epie_iters: usize,
    pub epie_beta: f64,
    pub epie_reshuffle: bool,
    pub illumination_fraction: f64,

    pub gradcheck_model: bool,
    pub gradcheck_n_c: usize,
    pub gradcheck_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let model = ModelConfig::default();
        let tc = TrainConfig::default();
        let w = LossWeights::default();
        let ep = EpieConfig::default();
        let suite = SuiteConfig::default();
        RunConfig {
            seed: 0,
            rows: sim.rows,
            cols: sim.cols,
            step: sim.step,
            jitter_max: sim.jitter_max,
            probe_size: sim.probe.size,
            probe_radius: sim.probe.radius,
            probe_sigma: sim.probe.sigma,
            probe_curvature: sim.probe.curvature,
            noise: sim.noise.enabled,
            peak_photons: sim.noise.peak_photons,
            read_sigma_frac: sim.noise.read_sigma_frac,
            train_rows: sim.train_rows,
            test_rows: sim.test_rows,
            val_fraction: sim.val_fraction,
            n_c: model.n_c,
            variant: model.variant,
            i_sat: model.i_sat,
            alpha: model.alpha,
            g0: model.g0,
            g_l: model.g_l,
            g_h: model.g_h,
            lr: tc.lr,
            batch_size: tc.batch_size,
            epochs: tc.epochs,
            half_cycle_epochs: tc.half_cycle_epochs,
            clip_norm: tc.clip_norm,
            w_b: w.w_b,
            w_a: w.w_a,
            w_p: w.w_p,
            w_c: w.w_c,
            lambda_circ: w.lambda_circ,
            lambda_g: w.lambda_g,
            lambda_s: w.lambda_s,
            base_metric: "mse".into(),
            infer_batch: 32,
            stitch_floor: StitchConfig::default().weight_floor,
            epie_iters: ep.iters,
            epie_beta: ep.beta,
            epie_reshuffle: ep.reshuffle,
            illumination_fraction: 0.1,
            gradcheck_model: suite.model,
            gradcheck_n_c: suite.model_n_c,
            gradcheck_samples: suite.model_samples,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Overrides one key; `value` is parsed as a TOML value, falling back to
    /// a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("config round-trips");
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("--set {key}: {}", one_line(&e.to_string()))))?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            rows: self.rows,
            cols: self.cols,
            step: self.step,
            jitter_max: self.jitter_max,
            probe: ProbeParams {
                size: self.probe_size,
                radius: self.probe_radius,
                sigma: self.probe_sigma,
                curvature: self.probe_curvature,
            },
            noise: NoiseConfig {
                enabled: self.noise,
                peak_photons: self.peak_photons,
                read_sigma_frac: self.read_sigma_frac,
                seed: self.seed,
            },
            train_rows: self.train_rows,
            test_rows: self.test_rows,
            val_fraction: self.val_fraction,
            object_seed: self.seed,
            scan_seed: self.seed,
            split_seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_c: self.n_c,
            i_sat: self.i_sat,
            alpha: self.alpha,
            g0: self.g0,
            g_l: self.g_l,
            g_h: self.g_h,
            variant: self.variant,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let base_metric = match self.base_metric.as_str() {
            "mse" => BaseMetric::Mse,
            "mae" => BaseMetric::Mae,
            other => return Err(Error::Config(format!("base_metric must be mse or mae, got {other:?}"))),
        };
        let tc = TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            half_cycle_epochs: self.half_cycle_epochs,
            clip_norm: self.clip_norm,
            seed: self.seed,
            weights: LossWeights {
                w_b: self.w_b,
                w_a: self.w_a,
                w_p: self.w_p,
                w_c: self.w_c,
                lambda_circ: self.lambda_circ,
                lambda_g: self.lambda_g,
                lambda_s: self.lambda_s,
            },
            base_metric,
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn stitch_config(&self) -> StitchConfig {
        StitchConfig { patch: self.probe_size, step: self.step, weight_floor: self.stitch_floor }
    }

    pub fn epie_config(&self) -> EpieConfig {
        EpieConfig { iters: self.epie_iters, beta: self.epie_beta, seed: self.seed, reshuffle: self.epie_reshuffle }
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            seed: self.seed,
            model: self.gradcheck_model,
            model_n_c: self.gradcheck_n_c,
            model_samples: self.gradcheck_samples,
        }
    }
}

/// Record written next to every stage output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl Provenance {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(PROVENANCE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Provenance(format!("{}: {e}", path.display())))
    }
}

#[derive(Parser, Debug)]
#[command(name = "ptycho", version, about = "Ptychographic phase retrieval toolkit")]
pub struct Cli {
    /// TOML file with configuration overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory of the stage.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override one configuration key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Accept inputs produced under a different configuration.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Object, probe, scan and noisy frames into a dataset directory.
    Simulate,
    /// Train on a dataset directory; writes the best checkpoint and logs.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Predict patches for one split (train, val, test or all).
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Blend predicted patches into a full field.
    Stitch {
        #[arg(long)]
        patches: PathBuf,
    },
    /// Compare patches (and optionally a stitched field) with ground truth.
    Evaluate {
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stitched: Option<PathBuf>,
    },
    /// Radially averaged power spectrum and band energies of one grid.
    Spectrum {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Known-probe iterative reconstruction of a dataset.
    Epie {
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference gradient suite; fails if any case exceeds tolerance.
    Gradcheck,
    /// Train, infer and evaluate one named ablation on the test split.
    Ablate {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        data: PathBuf,
    },
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Single machine-parsable error line.
pub fn error_line(kind: &str, message: &str) -> String {
    format!("error kind={kind} message={}", serde_json::to_string(&one_line(message)).expect("string serialises"))
}

/// Parses `argv` (including the program name), runs the stage and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("bad arguments");
            eprintln!("{}", error_line("usage", first.trim_start_matches("error: ")));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

/// Effective configuration: defaults, then `--config`, then `--set`, then `--seed`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

struct Stage<'a> {
    cfg: &'a RunConfig,
    hash: String,
    force: bool,
}

impl Stage<'_> {
    fn check_input(&self, dir: &Path) -> Result<()> {
        let p = match Provenance::read(dir) {
            Ok(p) => p,
            Err(_) if self.force => return Ok(()),
            Err(e) => return Err(e),
        };
        if p.config_hash != self.hash && !self.force {
            return Err(Error::Provenance(format!(
                "{} was produced by {} under config {}, current config is {} (use --force to override)",
                dir.display(),
                p.stage,
                p.config_hash,
                self.hash
            )));
        }
        Ok(())
    }

    fn finish(&self, out: &Path, stage: &str, tag: Option<String>) -> Result<()> {
        let prov = Provenance { stage: stage.into(), config_hash: self.hash.clone(), seed: self.cfg.seed, tag };
        write_file(&out.join(PROVENANCE_FILE), &(serde_json::to_string_pretty(&prov).expect("provenance serialises") + "\n"))?;
        write_file(&out.join(CONFIG_FILE), &self.cfg.to_toml())
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn require_out(cli: &Cli) -> Result<&Path> {
    let out = cli.out.as_deref().ok_or_else(|| Error::Config("--out is required for this subcommand".into()))?;
    make_dir(out)?;
    Ok(out)
}

pub fn execute(cli: &Cli) -> Result<String> {
    let cfg = resolve_config(cli)?;
    let stage = Stage { cfg: &cfg, hash: cfg.hash(), force: cli.force };
    match &cli.command {
        Command::Simulate => {
            let out = require_out(cli)?;
            let ds = simulate(&cfg.sim_config())?;
            ds.save(out)?;
            stage.finish(out, "simulate", None)?;
            let count = |s| ds.indices(s).len();
            Ok(format!(
                "simulate: {} frames (train {}, val {}, test {}) -> {}\n",
                ds.len(),
                count(Split::Train),
                count(Split::Val),
                count(Split::Test),
                out.display()
            ))
        }
        Command::Train { data } => {
            let out = require_out(cli)?;
            stage.check_input(data)?;
            let ds = Dataset::load(data)?;
            let r = train(&ds, &cfg.model_config(), &cfg.train_config()?, |ck| ck.save(out))?;
            write_file(&out.join("loss_log.csv"), &loss_log_csv(&r.steps))?;
            write_file(&out.join("epoch_log.csv"), &epoch_log_csv(&r.epochs))?;
            stage.finish(out, "train", None)?;
            Ok(format!("train: best epoch {} val loss {:.6} -> {}\n", r.best.epoch, r.best.val_loss, out.display()))
        }
        Command::Infer { checkpoint, data, split } => {
            let out = require_out(cli)?;
            stage.check_input(checkpoint)?;
            stage.check_input(data)?;
            let ck = Checkpoint::load(checkpoint)?;
            let ds = Dataset::load(data)?;
            let indices = split_indices(&ds, split)?;
            let preds = predict(&ck, &ds, &indices, cfg.infer_batch)?;
            let index = PatchIndex::new(&ds, &indices, &preds)?;
            index.write(out, &preds)?;
            stage.finish(out, "infer", Some(split.clone()))?;
            Ok(format!("infer: {} patches ({split}) -> {}\n", preds.len(), out.display()))
        }
        Command::Stitch { patches } => {
            let out = require_out(cli)?;
            stage.check_input(patches)?;
            let (index, preds) = PatchIndex::read(patches)?;
            let s = index.stitch(&preds, &cfg.stitch_config())?;
            write_stitched(out, &s)?;
            stage.finish(out, "stitch", None)?;
            Ok(format!("stitch: {} patches onto {}x{} -> {}\n", preds.len(), index.canvas[0], index.canvas[1], out.display()))
        }
        Command::Evaluate { patches, data, stitched } => {
            let out = require_out(cli)?;
            stage.check_input(patches)?;
            stage.check_input(data)?;
            let (index, preds) = PatchIndex::read(patches)?;
            let ds = Dataset::load(data)?;
            let truth = index.truth(&ds)?;
            let field = match stitched {
                Some(dir) => {
                    stage.check_input(dir)?;
                    Some(read_stitched(dir)?)
                }
                None => None,
            };
            let object = field.as_ref().map(|_| ds.object.as_ref().ok_or(Error::Empty("ground-truth object"))).transpose()?;
            let rep = report(&preds, &truth, field.as_ref().zip(object), &stage.hash, cfg.seed)?;
            write_report(out, &rep, None)?;
            stage.finish(out, "evaluate", None)?;
            Ok(summary_line("evaluate", &rep, out))
        }
        Command::Spectrum { grid } => {
            let out = require_out(cli)?;
            if let Some(parent) = grid.parent().filter(|p| p.join(PROVENANCE_FILE).exists()) {
                stage.check_input(parent)?;
            }
            let t = read_grid(grid)?;
            let (h, w) = t.hw();
            let sq = if h == w { t } else { centre_square(&t)? };
            let psd = radial_psd(&sq)?;
            write_file(&out.join("psd.txt"), &psd.to_text())?;
            let b = psd.bands;
            write_file(&out.join("bands.csv"), &format!("band,percent\nlow,{}\nmid,{}\nhigh,{}\n", b.low, b.mid, b.high))?;
            stage.finish(out, "spectrum", None)?;
            Ok(format!("spectrum: low {:.3}% mid {:.3}% high {:.3}% -> {}\n", b.low, b.mid, b.high, out.display()))
        }
        Command::Epie { data } => {
            let out = require_out(cli)?;
            stage.check_input(data)?;
            let summary = epie_stage(&cfg, data, out)?;
            stage.finish(out, "epie", None)?;
            Ok(summary)
        }
        Command::Gradcheck => {
            let cases = run_suite(&cfg.suite_config())?;
            let text = report_text(&cases);
            if let Some(out) = &cli.out {
                make_dir(out)?;
                write_file(&out.join("gradcheck.txt"), &text)?;
                stage.finish(out, "gradcheck", None)?;
            }
            if !all_passed(&cases) {
                let bad: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
                return Err(Error::GradCheck(format!("{} of {} cases over tolerance: {}", bad.len(), cases.len(), bad.join(" "))));
            }
            Ok(text)
        }
        Command::Ablate { variant, data } => {
            let out = require_out(cli)?;
            stage.check_input(data)?;
            let ablation: Ablation = variant.parse()?;
            let ds = Dataset::load(data)?;
            let rep = run_ablation(&cfg, ablation, &ds, out, &stage.hash)?;
            write_report(out, &rep, Some(ablation))?;
            stage.finish(out, "ablate", Some(ablation.to_string()))?;
            Ok(summary_line(&format!("ablate {ablation}"), &rep, out))
        }
    }
}

fn split_indices(ds: &Dataset, split: &str) -> Result<Vec<usize>> {
    let idx = if split == "all" { (0..ds.len()).collect() } else { ds.indices(split.parse::<Split>()?) };
    if idx.is_empty() {
        return Err(Error::Empty("selected split"));
    }
    Ok(idx)
}

fn predict(ck: &Checkpoint, ds: &Dataset, indices: &[usize], batch: usize) -> Result<Vec<Prediction>> {
    let frames: Vec<&Tensor> = indices.iter().map(|&i| &ds.frames[i].intensity).collect();
    infer(ck, &frames, batch)
}

fn canvas_of(ds: &Dataset, patch: usize) -> [usize; 2] {
    match &ds.object {
        Some(o) => {
            let (h, w) = o.hw();
            [h, w]
        }
        None => ds.frames.iter().fold([patch, patch], |[h, w], f| [h.max(f.position.y + patch), w.max(f.position.x + patch)]),
    }
}

/// Positions and file names of a directory of predicted patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchIndex {
    pub canvas: [usize; 2],
    pub patch: usize,
    pub entries: Vec<PatchEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchEntry {
    /// Frame index in the source dataset.
    pub index: usize,
    pub y: usize,
    pub x: usize,
    pub degenerate: usize,
}

impl PatchIndex {
    fn new(ds: &Dataset, indices: &[usize], preds: &[Prediction]) -> Result<Self> {
        let patch = preds.first().ok_or(Error::Empty("predictions"))?.amplitude.hw().0;
        let entries = indices
            .iter()
            .zip(preds)
            .map(|(&i, p)| {
                let f = &ds.frames[i];
                PatchEntry { index: f.index, y: f.position.y, x: f.position.x, degenerate: p.degenerate }
            })
            .collect();
        Ok(PatchIndex { canvas: canvas_of(ds, patch), patch, entries })
    }

    fn names(index: usize) -> [String; 2] {
        [format!("amplitude_{index:05}.ptg"), format!("phase_{index:05}.ptg")]
    }

    fn write(&self, dir: &Path, preds: &[Prediction]) -> Result<()> {
        for (e, p) in self.entries.iter().zip(preds) {
            let [a, ph] = Self::names(e.index);
            write_grid(&dir.join(a), &p.amplitude)?;
            write_grid(&dir.join(ph), &p.phase)?;
        }
        write_file(&dir.join(PATCH_INDEX_FILE), &(serde_json::to_string(self).expect("index serialises") + "\n"))
    }

    pub fn read(dir: &Path) -> Result<(Self, Vec<Prediction>)> {
        let path = dir.join(PATCH_INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: PatchIndex = serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let preds = index
            .entries
            .iter()
            .map(|e| {
                let [a, ph] = Self::names(e.index);
                Ok(Prediction { amplitude: read_grid(&dir.join(a))?, phase: read_grid(&dir.join(ph))?, degenerate: e.degenerate })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((index, preds))
    }

    fn stitch(&self, preds: &[Prediction], cfg: &StitchConfig) -> Result<Stitched> {
        let patches: Vec<(&Tensor, &Tensor)> = preds.iter().map(|p| (&p.amplitude, &p.phase)).collect();
        let positions: Vec<(usize, usize)> = self.entries.iter().map(|e| (e.y, e.x)).collect();
        stitch(&patches, &positions, (self.canvas[0], self.canvas[1]), &StitchConfig { patch: self.patch, ..*cfg })
    }

    fn truth<'a>(&self, ds: &'a Dataset) -> Result<Vec<&'a crate::dataset::ObjectPatch>> {
        self.entries
            .iter()
            .map(|e| {
                let k = ds.frames.iter().position(|f| f.index == e.index).ok_or_else(|| {
                    Error::invalid(format!("frame {} is not in the dataset", e.index))
                })?;
                let f = &ds.frames[k];
                if (f.position.y, f.position.x) != (e.y, e.x) {
                    return Err(Error::invalid(format!("frame {} position differs from the dataset", e.index)));
                }
                Ok(&ds.patches[k])
            })
            .collect()
    }
}

fn write_stitched(dir: &Path, s: &Stitched) -> Result<()> {
    write_grid(&dir.join("amplitude.ptg"), &s.amplitude)?;
    write_grid(&dir.join("phase.ptg"), &s.phase)?;
    write_grid(&dir.join("coverage.ptg"), &s.coverage)
}

pub fn read_stitched(dir: &Path) -> Result<Stitched> {
    Ok(Stitched {
        amplitude: read_grid(&dir.join("amplitude.ptg"))?,
        phase: read_grid(&dir.join("phase.ptg"))?,
        coverage: read_grid(&dir.join("coverage.ptg"))?,
    })
}

fn write_report(dir: &Path, rep: &ReconReport, ablation: Option<Ablation>) -> Result<()> {
    let (csv, text) = match ablation {
        Some(a) => (format!("# variant={a}\n{}", rep.to_csv()), format!("variant: {a}\n{}", rep.to_text())),
        None => (rep.to_csv(), rep.to_text()),
    };
    write_file(&dir.join("report.csv"), &csv)?;
    write_file(&dir.join("report.txt"), &text)
}

fn summary_line(what: &str, rep: &ReconReport, out: &Path) -> String {
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    format!(
        "{what}: {} samples, amplitude mse {:.5}, phase mae {:.4} rad -> {}\n",
        rep.amplitude.len(),
        mean(rep.amplitude.iter().map(|m| m.mse).collect()),
        mean(rep.phase.iter().map(|m| m.mae).collect()),
        out.display()
    )
}

fn epie_stage(cfg: &RunConfig, data: &Path, out: &Path) -> Result<String> {
    let ds = Dataset::load(data)?;
    let probe = ds.probe.as_ref().ok_or(Error::Empty("dataset probe"))?;
    let frames: Vec<&Tensor> = ds.frames.iter().map(|f| &f.intensity).collect();
    let positions: Vec<(usize, usize)> = ds.frames.iter().map(|f| (f.position.y, f.position.x)).collect();
    let [h, w] = canvas_of(&ds, probe.size());
    let state = epie_reconstruct(&frames, &positions, &probe.grid, (h, w), &cfg.epie_config())?;
    write_grid(&out.join("object_amplitude.ptg"), &state.object.amplitude())?;
    write_grid(&out.join("object_phase.ptg"), &state.object.phase())?;
    write_file(&out.join("errors.txt"), &state.error_history_text())?;
    let last = state.errors.last().copied().unwrap_or(f64::NAN);
    let mut s = format!("epie: {} sweeps, final data error {last:e}", state.iterations);
    if let Some(Object { amplitude, phase }) = &ds.object {
        let mask = illumination_mask(&probe.grid, &positions, (h, w), cfg.illumination_fraction)?;
        let c = compare_to_truth(&state.object, amplitude, phase, &mask)?;
        let json = serde_json::json!({
            "phase_offset": c.phase_offset,
            "phase_mae": c.phase_mae,
            "amplitude_mse": c.amplitude_mse,
            "pixels": c.pixels,
        });
        write_file(&out.join("comparison.json"), &(json.to_string() + "\n"))?;
        write!(s, ", amplitude mse {:.3e}, phase mae {:.4} rad", c.amplitude_mse, c.phase_mae).unwrap();
    }
    writeln!(s, " -> {}", out.display()).unwrap();
    Ok(s)
}

/// Trains one ablation, predicts the test split, stitches it and evaluates
/// against the dataset's ground truth. The checkpoint and logs go to `out`.
pub fn run_ablation(cfg: &RunConfig, ablation: Ablation, ds: &Dataset, out: &Path, hash: &str) -> Result<ReconReport> {
    let mut mc = cfg.model_config();
    let mut tc = cfg.train_config()?;
    ablation.apply(&mut mc, &mut tc);
    let ck_dir = out.join("checkpoint");
    let r = train(ds, &mc, &tc, |ck| ck.save(&ck_dir))?;
    write_file(&out.join("loss_log.csv"), &loss_log_csv(&r.steps))?;
    write_file(&out.join("epoch_log.csv"), &epoch_log_csv(&r.epochs))?;
    let indices = split_indices(ds, "test")?;
    let preds = predict(&r.best, ds, &indices, cfg.infer_batch)?;
    let index = PatchIndex::new(ds, &indices, &preds)?;
    let truth = index.truth(ds)?;
    let field = match &ds.object {
        Some(o) => Some((index.stitch(&preds, &cfg.stitch_config())?, o)),
        None => None,
    };
    report(&preds, &truth, field.as_ref().map(|(s, o)| (s, *o)), hash, cfg.seed)
}

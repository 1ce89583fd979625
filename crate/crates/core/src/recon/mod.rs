//! Inference, stitching, image metrics, spectra and evaluation reports.

mod metrics;
mod spectrum;
mod stitch;

use std::fmt::Write as _;

use crate::circphase::{recover_phase, wrap};
use crate::dataset::{Object, ObjectPatch};
use crate::error::{Error, Result};
use crate::model::{forward, Checkpoint, ModelOutputs, ParamVars};
use crate::runtime::par_map;
use crate::tensor::{Tape, Tensor};

pub use metrics::{crop, interior_rect, masked_metrics, metrics, psnr, ssim_map, Metrics, Modality, PSNR_CAP_DB};
pub use spectrum::{centre_square, radial_psd, BandEnergies, Psd};
pub use stitch::{stitch, stitch_kernel, StitchConfig, Stitched};

/// One reconstructed patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub amplitude: Tensor,
    /// In `(−π, π]`.
    pub phase: Tensor,
    /// Pixels where both circular coordinates were exactly zero.
    pub degenerate: usize,
}

fn infer_batch(ck: &Checkpoint, frames: &[&Tensor]) -> Result<Vec<Prediction>> {
    let batch = Tensor::stack(frames)?;
    let s = batch.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("infer", format!("frames must be HxW, got {:?}", &s[1..])));
    }
    let batch = batch.reshape(&[s[0], 1, s[1], s[2]])?;
    let mut tape = Tape::<f32>::new();
    let pv = ParamVars::register(&mut tape, &ck.params);
    let out = forward(&mut tape, &pv, &batch, &ck.cfg)?;
    let planes = |v| tape.value(v).clone().reshape(&[s[0], s[1], s[2]]).map(|t| t.unstack());
    let amps = planes(out.amp())?;
    match out {
        ModelOutputs::Circular(o) => {
            let (cs, ss) = (planes(o.c)?, planes(o.s)?);
            amps.into_iter()
                .zip(cs.iter().zip(&ss))
                .map(|(amplitude, (c, s))| {
                    let r = recover_phase(c, s)?;
                    Ok(Prediction { amplitude, phase: r.phase, degenerate: r.degenerate })
                })
                .collect()
        }
        ModelOutputs::Scalar { phase, .. } => Ok(amps
            .into_iter()
            .zip(planes(phase)?)
            .map(|(amplitude, p)| Prediction { amplitude, phase: p.map(|v| wrap(v as f64) as f32), degenerate: 0 })
            .collect()),
    }
}

/// Runs the network on every frame, `batch_size` frames at a time.
pub fn infer(ck: &Checkpoint, frames: &[&Tensor], batch_size: usize) -> Result<Vec<Prediction>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let chunks: Vec<&[&Tensor]> = frames.chunks(batch_size).collect();
    let mut out = Vec::with_capacity(frames.len());
    for r in par_map(&chunks, |_, c| infer_batch(ck, c)) {
        out.extend(r?);
    }
    Ok(out)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Metrics and spectra of a stitched field against the ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StitchedEval {
    pub amplitude: Metrics,
    pub phase: Metrics,
    pub bands_amplitude: BandEnergies,
    pub bands_phase: BandEnergies,
    pub truth_bands_amplitude: BandEnergies,
    pub truth_bands_phase: BandEnergies,
}

/// Largest square centred in the fully covered interior; `(y0, x0, side)`.
pub fn covered_square(stitched: &Stitched) -> Result<(usize, usize, usize)> {
    let (y0, y1, x0, x1) = interior_rect(&stitched.coverage).ok_or(Error::Empty("coverage"))?;
    let n = (y1 - y0).min(x1 - x0);
    Ok((y0 + (y1 - y0 - n) / 2, x0 + (x1 - x0 - n) / 2, n))
}

/// Band energies of `field` over [`covered_square`].
pub fn field_bands(field: &Tensor, stitched: &Stitched) -> Result<BandEnergies> {
    let (y, x, n) = covered_square(stitched)?;
    Ok(radial_psd(&crop(field, y, y + n, x, x + n)?)?.bands)
}

pub fn evaluate_stitched(stitched: &Stitched, object: &Object) -> Result<StitchedEval> {
    if object.amplitude.shape() != stitched.amplitude.shape() {
        return Err(Error::shape(
            "evaluate_stitched",
            format!("object {:?} vs field {:?}", object.amplitude.shape(), stitched.amplitude.shape()),
        ));
    }
    Ok(StitchedEval {
        amplitude: masked_metrics(&object.amplitude, &stitched.amplitude, &stitched.coverage, Modality::Amplitude)?,
        phase: masked_metrics(&object.phase, &stitched.phase, &stitched.coverage, Modality::Phase)?,
        bands_amplitude: field_bands(&stitched.amplitude, stitched)?,
        bands_phase: field_bands(&stitched.phase, stitched)?,
        truth_bands_amplitude: field_bands(&object.amplitude, stitched)?,
        truth_bands_phase: field_bands(&object.phase, stitched)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconReport {
    pub amplitude: Vec<Metrics>,
    pub phase: Vec<Metrics>,
    pub stitched: Option<StitchedEval>,
    pub config_hash: String,
    pub seed: u64,
}

/// One `(metric, modality, mean, std)` line of the CSV report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub modality: Modality,
    pub mean: f64,
    pub std: f64,
}

pub const REPORT_CSV_HEADER: &str = "metric,modality,mean,std";

/// Per-sample metrics for `predictions` against `truth`, plus stitched
/// metrics when a stitched field and its object are given.
pub fn report(
    predictions: &[Prediction],
    truth: &[&ObjectPatch],
    stitched: Option<(&Stitched, &Object)>,
    config_hash: &str,
    seed: u64,
) -> Result<ReconReport> {
    if predictions.len() != truth.len() {
        return Err(Error::invalid(format!("{} predictions for {} ground-truth patches", predictions.len(), truth.len())));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("report"));
    }
    let pairs: Vec<(&Prediction, &ObjectPatch)> = predictions.iter().zip(truth.iter().copied()).collect();
    let per = par_map(&pairs, |_, (p, t)| -> Result<(Metrics, Metrics)> {
        Ok((metrics(&t.amplitude, &p.amplitude, Modality::Amplitude)?, metrics(&t.phase, &p.phase, Modality::Phase)?))
    });
    let mut amplitude = Vec::with_capacity(per.len());
    let mut phase = Vec::with_capacity(per.len());
    for r in per {
        let (a, p) = r?;
        amplitude.push(a);
        phase.push(p);
    }
    let stitched = stitched.map(|(s, o)| evaluate_stitched(s, o)).transpose()?;
    Ok(ReconReport { amplitude, phase, stitched, config_hash: config_hash.into(), seed })
}

impl ReconReport {
    pub fn per_sample(&self, modality: Modality) -> &[Metrics] {
        match modality {
            Modality::Amplitude => &self.amplitude,
            Modality::Phase => &self.phase,
        }
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        let mut push = |metric: String, modality, mean, std| rows.push(ReportRow { metric, modality, mean, std });
        for m in Modality::ALL {
            let per = self.per_sample(m);
            for (k, name) in Metrics::NAMES.iter().enumerate() {
                let values: Vec<f64> = per.iter().map(|x| x.values()[k]).collect();
                let (mean, std) = mean_std(&values);
                push(name.to_string(), m, mean, std);
            }
        }
        if let Some(s) = &self.stitched {
            for (m, met) in [(Modality::Amplitude, s.amplitude), (Modality::Phase, s.phase)] {
                for (name, v) in Metrics::NAMES.iter().zip(met.values()) {
                    push(format!("stitched_{name}"), m, v, 0.0);
                }
            }
            let bands = [
                ("band", Modality::Amplitude, s.bands_amplitude),
                ("band", Modality::Phase, s.bands_phase),
                ("truth_band", Modality::Amplitude, s.truth_bands_amplitude),
                ("truth_band", Modality::Phase, s.truth_bands_phase),
            ];
            for (prefix, m, b) in bands {
                for (name, v) in [("low", b.low), ("mid", b.mid), ("high", b.high)] {
                    push(format!("{prefix}_{name}"), m, v, 0.0);
                }
            }
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# config_hash={} seed={}\n{REPORT_CSV_HEADER}\n", self.config_hash, self.seed);
        for r in self.rows() {
            writeln!(s, "{},{},{},{}", r.metric, r.modality, r.mean, r.std).unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("Reconstruction report\n");
        writeln!(s, "config hash: {}", self.config_hash).unwrap();
        writeln!(s, "seed: {}", self.seed).unwrap();
        writeln!(s, "samples: {}", self.amplitude.len()).unwrap();
        let rows = self.rows();
        let mut section = "";
        for r in &rows {
            let group = if r.metric.starts_with("stitched_") {
                "Stitched field"
            } else if r.metric.contains("band_") {
                "Band energies (%)"
            } else {
                "Per-sample (mean ± std)"
            };
            if group != section {
                writeln!(s, "\n{group}").unwrap();
                section = group;
            }
            if group.starts_with("Per-sample") {
                writeln!(s, "  {:<10} {:<9} {:>12.6} ± {:.6}", r.metric, r.modality.as_str(), r.mean, r.std).unwrap();
            } else {
                writeln!(s, "  {:<18} {:<9} {:>12.6}", r.metric, r.modality.as_str(), r.mean).unwrap();
            }
        }
        s
    }
}

/// Parses the CSV written by [`ReconReport::to_csv`].
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(REPORT_CSV_HEADER) {
        return Err(Error::invalid("report csv: missing header"));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::invalid(format!("report csv {l:?}: {e}")));
            if f.len() != 4 {
                return Err(Error::invalid(format!("report csv line {l:?}")));
            }
            Ok(ReportRow { metric: f[0].into(), modality: f[1].parse()?, mean: num(f[2])?, std: num(f[3])? })
        })
        .collect()
}

//! Synthetic objects, scan plans, simulated frames, splits and on-disk layout.

mod ptgrid;

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::physics::{add_noise, diffract_with, exit_wave, make_probe, ComplexGrid, Fft2Plan, Probe, ProbeParams};
use crate::runtime::par_map;
use crate::tensor::Tensor;

pub use ptgrid::{decode_grid, encode_grid, read_complex, read_grid, write_complex, write_grid};

/// Phase plateaus; the outer two sit 0.2 rad inside the branch cut.
pub const PHASE_LEVELS: [f64; 5] = [-(PI - 0.2), -1.2, 0.0, 1.2, PI - 0.2];
pub const AMPLITUDE_LEVELS: [f64; 2] = [0.2, 0.9];
pub const BACKGROUND_AMPLITUDE: f64 = 0.55;
const CELL: usize = 40;
const PLATE_INSET: usize = 3;
const MIN_OBJECT: usize = 16;

/// Complex specimen stored as amplitude and phase planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub amplitude: Tensor,
    pub phase: Tensor,
}

impl Object {
    pub fn new(amplitude: Tensor, phase: Tensor) -> Result<Self> {
        if amplitude.shape() != phase.shape() || amplitude.shape().len() != 2 {
            return Err(Error::shape("object", format!("{:?} vs {:?}", amplitude.shape(), phase.shape())));
        }
        Ok(Object { amplitude, phase })
    }

    pub fn hw(&self) -> (usize, usize) {
        self.amplitude.hw()
    }

    pub fn to_complex(&self) -> Result<ComplexGrid> {
        ComplexGrid::from_polar(&self.amplitude, &self.phase)
    }

    /// Ground-truth patch whose top-left corner is `(y, x)`.
    pub fn patch(&self, y: usize, x: usize, size: usize) -> Result<ObjectPatch> {
        let (h, w) = self.hw();
        if y + size > h || x + size > w {
            return Err(Error::shape("object_patch", format!("{size}px window at ({y},{x}) outside {h}x{w}")));
        }
        let cut = |t: &Tensor| Tensor::from_fn(&[size, size], |i| t.at(y + i / size, x + i % size));
        ObjectPatch::new(cut(&self.amplitude), cut(&self.phase))
    }
}

fn fill(amp: &mut [f32], phase: &mut [f32], width: usize, rect: (usize, usize, usize, usize), a: f64, p: f64) {
    let (y0, y1, x0, x1) = rect;
    for y in y0..y1 {
        for x in x0..x1 {
            amp[y * width + x] = a as f32;
            phase[y * width + x] = p as f32;
        }
    }
}

/// Group of three parallel bars of width `w`, length `5w`, gap `w`, clipped to
/// `bounds` (exclusive end coordinates).
#[allow(clippy::too_many_arguments)]
fn bar_group(
    amp: &mut [f32],
    phase: &mut [f32],
    width: usize,
    origin: (usize, usize),
    w: usize,
    horizontal: bool,
    bounds: (usize, usize),
    level: (f64, f64),
) {
    for b in 0..3 {
        let across = origin_offset(b, w);
        let (y0, x0) = if horizontal { (origin.0 + across, origin.1) } else { (origin.0, origin.1 + across) };
        let (y1, x1) = if horizontal { (y0 + w, x0 + 5 * w) } else { (y0 + 5 * w, x0 + w) };
        let rect = (y0.min(bounds.0), y1.min(bounds.0), x0.min(bounds.1), x1.min(bounds.1));
        fill(amp, phase, width, rect, level.0, level.1);
    }
}

fn origin_offset(bar: usize, w: usize) -> usize {
    bar * 2 * w
}

/// Procedural bar target.
///
/// The canvas is tiled with `40×40` cells. Each cell holds an inset plate and
/// two orthogonal 3-bar groups at different scales. Cells on the even
/// checkerboard parity put the plate at `±(π−0.2)` and its bars at the opposite
/// sign, so plateaus straddling the branch cut appear everywhere in the field.
pub fn gen_object(height: usize, width: usize, seed: u64) -> Result<Object> {
    if height < MIN_OBJECT || width < MIN_OBJECT {
        return Err(Error::invalid(format!("object {height}x{width} smaller than {MIN_OBJECT}x{MIN_OBJECT}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut amp = vec![BACKGROUND_AMPLITUDE as f32; height * width];
    let mut phase = vec![0.0f32; height * width];
    let inner = [PHASE_LEVELS[1], PHASE_LEVELS[2], PHASE_LEVELS[3]];
    for cy in 0..height.div_ceil(CELL) {
        for cx in 0..width.div_ceil(CELL) {
            let (plate_phase, bar_phase) = if (cy + cx) % 2 == 0 {
                let p = if rng.gen_bool(0.5) { PI - 0.2 } else { -(PI - 0.2) };
                (p, -p)
            } else {
                let p = inner[rng.gen_range(0..inner.len())];
                let others: Vec<f64> = PHASE_LEVELS.iter().copied().filter(|&l| l != p).collect();
                (p, others[rng.gen_range(0..others.len())])
            };
            let plate_amp = AMPLITUDE_LEVELS[rng.gen_range(0..2)];
            let bar_amp = if plate_amp == AMPLITUDE_LEVELS[0] { AMPLITUDE_LEVELS[1] } else { AMPLITUDE_LEVELS[0] };
            let (y0, x0) = (cy * CELL + PLATE_INSET, cx * CELL + PLATE_INSET);
            let bounds = (((cy + 1) * CELL - PLATE_INSET).min(height), ((cx + 1) * CELL - PLATE_INSET).min(width));
            if y0 >= bounds.0 || x0 >= bounds.1 {
                continue;
            }
            fill(&mut amp, &mut phase, width, (y0, bounds.0, x0, bounds.1), plate_amp, plate_phase);
            let coarse = rng.gen_range(2..=4);
            let fine = rng.gen_range(1..=2);
            let horizontal = rng.gen_bool(0.5);
            let level = (bar_amp, bar_phase);
            bar_group(&mut amp, &mut phase, width, (y0 + 2, x0 + 2), coarse, horizontal, bounds, level);
            bar_group(&mut amp, &mut phase, width, (y0 + 22, x0 + 22), fine, !horizontal, bounds, level);
        }
    }
    Object::new(Tensor::new(&[height, width], amp)?, Tensor::new(&[height, width], phase)?)
}

/// Fraction of pixels whose phase lies within `band` radians of `±π`.
pub fn wrap_fraction(phase: &Tensor, band: f64) -> f64 {
    let near = phase.data().iter().filter(|&&p| PI - (p as f64).abs() <= band).count();
    near as f64 / phase.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanPosition {
    pub row: usize,
    pub col: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanPlan {
    pub rows: usize,
    pub cols: usize,
    pub step: usize,
    pub jitter_max: usize,
    pub probe_size: usize,
    pub seed: u64,
    pub positions: Vec<ScanPosition>,
}

/// Smallest `(height, width)` canvas holding every jittered window.
pub fn required_object_size(rows: usize, cols: usize, step: usize, probe_size: usize, jitter_max: usize) -> (usize, usize) {
    let extent = |n: usize| (n.max(1) - 1) * step + probe_size + 2 * jitter_max;
    (extent(rows), extent(cols))
}

impl ScanPlan {
    pub fn object_size(&self) -> (usize, usize) {
        required_object_size(self.rows, self.cols, self.step, self.probe_size, self.jitter_max)
    }
}

/// Raster scan with per-axis integer jitter drawn uniformly from
/// `[-jitter_max, jitter_max]`; nominal positions are offset by `jitter_max`.
pub fn plan_scan(rows: usize, cols: usize, step: usize, jitter_max: usize, probe_size: usize, seed: u64) -> Result<ScanPlan> {
    if rows == 0 || cols == 0 || step == 0 || probe_size == 0 {
        return Err(Error::invalid(format!("scan {rows}x{cols}, step {step}, probe {probe_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = jitter_max as i64;
    let mut positions = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let (dy, dx) = (rng.gen_range(-j..=j), rng.gen_range(-j..=j));
            let y = (jitter_max + row * step) as i64 + dy;
            let x = (jitter_max + col * step) as i64 + dx;
            positions.push(ScanPosition { row, col, y: y as usize, x: x as usize });
        }
    }
    let plan = ScanPlan { rows, cols, step, jitter_max, probe_size, seed, positions };
    let (h, w) = plan.object_size();
    assert!(plan.positions.iter().all(|p| p.y + probe_size <= h && p.x + probe_size <= w));
    Ok(plan)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Ground truth for one frame with circular coordinates precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectPatch {
    pub amplitude: Tensor,
    pub phase: Tensor,
    pub cosp: Tensor,
    pub sinp: Tensor,
}

impl ObjectPatch {
    pub fn new(amplitude: Tensor, phase: Tensor) -> Result<Self> {
        if amplitude.shape() != phase.shape() {
            return Err(Error::shape("object_patch", format!("{:?} vs {:?}", amplitude.shape(), phase.shape())));
        }
        let cosp = phase.map(|p| (p as f64).cos() as f32);
        let sinp = phase.map(|p| (p as f64).sin() as f32);
        Ok(ObjectPatch { amplitude, phase, cosp, sinp })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffractionFrame {
    pub index: usize,
    pub intensity: Tensor,
    pub position: ScanPosition,
    pub noisy: bool,
    pub split: Option<Split>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub peak_photons: f64,
    /// Read-noise std as a fraction of the dataset-wide maximum intensity.
    pub read_sigma_frac: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { enabled: true, peak_photons: 1e4, read_sigma_frac: 0.01, seed: 0 }
    }
}

/// Simulates one frame per scan position.
///
/// Noise is applied after every clean frame exists, because the photon scale
/// is tied to the dataset-wide maximum. Frame `j` uses noise seed `seed ^ j`.
pub fn make_dataset(object: &Object, probe: &Probe, plan: &ScanPlan, noise: &NoiseConfig) -> Result<Vec<(DiffractionFrame, ObjectPatch)>> {
    let n = probe.size();
    if plan.probe_size != n {
        return Err(Error::shape("make_dataset", format!("plan probe {} vs probe {n}", plan.probe_size)));
    }
    let field = object.to_complex()?;
    let fft = Fft2Plan::new(n, n)?;
    let clean: Vec<Result<(Tensor, ObjectPatch)>> = par_map(&plan.positions, |_, p| {
        let window = field.window(p.y, p.x, n, n)?;
        let intensity = diffract_with(&fft, &exit_wave(&window, probe)?)?;
        Ok((intensity, object.patch(p.y, p.x, n)?))
    });
    let clean: Vec<(Tensor, ObjectPatch)> = clean.into_iter().collect::<Result<_>>()?;
    let max = clean.iter().flat_map(|(i, _)| i.data()).fold(0.0f32, |m, &v| m.max(v)) as f64;
    let noisy: Vec<Result<Tensor>> = par_map(&clean, |j, (intensity, _)| {
        if noise.enabled {
            add_noise(intensity, max, noise.peak_photons, noise.read_sigma_frac * max, noise.seed ^ j as u64)
        } else {
            Ok(intensity.clone())
        }
    });
    noisy
        .into_iter()
        .zip(clean)
        .zip(&plan.positions)
        .enumerate()
        .map(|(index, ((intensity, (_, patch)), &position))| {
            let frame = DiffractionFrame { index, intensity: intensity?, position, noisy: noise.enabled, split: None };
            Ok((frame, patch))
        })
        .collect()
}

/// Row-wise split: the first `train_rows` scan rows form the training pool,
/// of which `round(val_fraction·pool)` frames are drawn uniformly (seeded) for
/// validation; the remaining `test_rows` rows are the test set.
pub fn split_rows(
    frames: &mut [DiffractionFrame],
    plan_rows: usize,
    train_rows: usize,
    test_rows: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<()> {
    if train_rows + test_rows != plan_rows {
        return Err(Error::invalid(format!("train rows {train_rows} + test rows {test_rows} != plan rows {plan_rows}")));
    }
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::invalid(format!("val fraction {val_fraction} outside [0,1]")));
    }
    if let Some(f) = frames.iter().find(|f| f.position.row >= plan_rows) {
        return Err(Error::invalid(format!("frame {} on row {} beyond plan rows {plan_rows}", f.index, f.position.row)));
    }
    let pool: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].position.row < train_rows).collect();
    let n_val = (val_fraction * pool.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for f in frames.iter_mut() {
        f.split = Some(if f.position.row < train_rows { Split::Train } else { Split::Test });
    }
    for k in sample(&mut rng, pool.len(), n_val).into_iter() {
        frames[pool[k]].split = Some(Split::Val);
    }
    Ok(())
}

/// Everything needed to simulate a split dataset end to end.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub rows: usize,
    pub cols: usize,
    pub step: usize,
    pub jitter_max: usize,
    pub probe: ProbeParams,
    pub noise: NoiseConfig,
    pub train_rows: usize,
    pub test_rows: usize,
    pub val_fraction: f64,
    pub object_seed: u64,
    pub scan_seed: u64,
    pub split_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rows: 61,
            cols: 61,
            step: 8,
            jitter_max: 3,
            probe: ProbeParams::default(),
            noise: NoiseConfig::default(),
            train_rows: 49,
            test_rows: 12,
            val_fraction: 0.05,
            object_seed: 0,
            scan_seed: 0,
            split_seed: 0,
        }
    }
}

/// Object, probe, scan, frames and split tags from one configuration.
pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    let probe = make_probe(cfg.probe, 0)?;
    let plan = plan_scan(cfg.rows, cfg.cols, cfg.step, cfg.jitter_max, cfg.probe.size, cfg.scan_seed)?;
    let (h, w) = plan.object_size();
    let object = gen_object(h, w, cfg.object_seed)?;
    let samples = make_dataset(&object, &probe, &plan, &cfg.noise)?;
    let (mut frames, patches): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
    split_rows(&mut frames, cfg.rows, cfg.train_rows, cfg.test_rows, cfg.val_fraction, cfg.split_seed)?;
    Ok(Dataset { frames, patches, object: Some(object), probe: Some(probe) })
}

/// Frames, ground truth and (for simulated data) the generating object and probe.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub frames: Vec<DiffractionFrame>,
    pub patches: Vec<ObjectPatch>,
    pub object: Option<Object>,
    pub probe: Option<Probe>,
}

const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "index,intensity,amplitude,phase,row,col,y,x,split,noisy";

impl Dataset {
    pub fn from_samples(samples: Vec<(DiffractionFrame, ObjectPatch)>, object: Option<Object>, probe: Option<Probe>) -> Self {
        let (frames, patches) = samples.into_iter().unzip();
        Dataset { frames, patches, object, probe }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.frames[i].split == Some(split)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["frames", "patches"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        for (f, p) in self.frames.iter().zip(&self.patches) {
            let i = f.index;
            let names = [
                format!("frames/intensity_{i:05}.ptg"),
                format!("patches/amplitude_{i:05}.ptg"),
                format!("patches/phase_{i:05}.ptg"),
            ];
            write_grid(&dir.join(&names[0]), &f.intensity)?;
            write_grid(&dir.join(&names[1]), &p.amplitude)?;
            write_grid(&dir.join(&names[2]), &p.phase)?;
            let ScanPosition { row, col, y, x } = f.position;
            let split = f.split.map(Split::as_str).unwrap_or("");
            manifest.push_str(&format!(
                "{i},{},{},{},{row},{col},{y},{x},{split},{}\n",
                names[0], names[1], names[2], f.noisy as u8
            ));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        if let Some(o) = &self.object {
            write_grid(&dir.join("object_amplitude.ptg"), &o.amplitude)?;
            write_grid(&dir.join("object_phase.ptg"), &o.phase)?;
        }
        if let Some(p) = &self.probe {
            write_complex(&dir.join("probe.ptg"), &p.grid)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::invalid(format!("{}: unexpected manifest header", path.display())));
        }
        let mut frames = Vec::new();
        let mut patches = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::invalid(format!("{}: malformed line {}", path.display(), n + 2));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 10 {
                return Err(bad());
            }
            let num = |k: usize| cols[k].parse::<usize>().map_err(|_| bad());
            let position = ScanPosition { row: num(4)?, col: num(5)?, y: num(6)?, x: num(7)? };
            let split = if cols[8].is_empty() { None } else { Some(cols[8].parse()?) };
            frames.push(DiffractionFrame {
                index: num(0)?,
                intensity: read_grid(&dir.join(cols[1]))?,
                position,
                noisy: cols[9] == "1",
                split,
            });
            patches.push(ObjectPatch::new(read_grid(&dir.join(cols[2]))?, read_grid(&dir.join(cols[3]))?)?);
        }
        let amp = dir.join("object_amplitude.ptg");
        let object = if amp.exists() { Some(Object::new(read_grid(&amp)?, read_grid(&dir.join("object_phase.ptg"))?)?) } else { None };
        let probe_path = dir.join("probe.ptg");
        let probe = if probe_path.exists() { Some(Probe::from_grid(read_complex(&probe_path)?)?) } else { None };
        Ok(Dataset { frames, patches, object, probe })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_tag_round_trip() {
        for s in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("holdout".parse::<Split>().is_err());
    }

    #[test]
    fn required_size_for_default_plan() {
        assert_eq!(required_object_size(61, 61, 8, 32, 3), (518, 518));
    }
}

//! Blend overlapping patches into a full field and score it against the
//! object, per patch and over the stitched canvas.

use ptycho::dataset::{simulate, NoiseConfig, SimConfig};
use ptycho::recon::{stitch, StitchConfig};
use ptycho::recon::{report, Prediction};

fn main() -> ptycho::Result<()> {
    let sim = SimConfig {
        rows: 8,
        cols: 8,
        train_rows: 6,
        test_rows: 2,
        noise: NoiseConfig { enabled: false, ..NoiseConfig::default() },
        ..SimConfig::default()
    };
    let ds = simulate(&sim)?;
    let object = ds.object.as_ref().expect("simulated");

    // stand-in predictions: ground truth with a small amplitude error and a phase
    // shift that pushes some pixels across the cut
    let preds: Vec<Prediction> = ds
        .patches
        .iter()
        .map(|p| Prediction {
            amplitude: p.amplitude.map(|a| a * 0.97),
            phase: p.phase.map(|v| ptycho::circphase::wrap(v as f64 + 0.05) as f32),
            degenerate: 0,
        })
        .collect();

    let pairs: Vec<_> = preds.iter().map(|p| (&p.amplitude, &p.phase)).collect();
    let positions: Vec<_> = ds.frames.iter().map(|f| (f.position.y, f.position.x)).collect();
    let stitched = stitch(&pairs, &positions, object.hw(), &StitchConfig::default())?;
    println!("canvas {:?}, covered bounds {:?}", object.hw(), stitched.coverage_bounds());

    let truth: Vec<_> = ds.patches.iter().collect();
    let r = report(&preds, &truth, Some((&stitched, object)), "example", 0)?;
    print!("{}", r.to_text());
    Ok(())
}

//! Iterative reference reconstruction with a known probe, compared with the
//! ground-truth object inside the illuminated region.

use ptycho::dataset::{simulate, NoiseConfig, SimConfig};
use ptycho::epie::{compare_to_truth, epie_reconstruct, illumination_mask, EpieConfig};

fn main() -> ptycho::Result<()> {
    let sim = SimConfig {
        rows: 12,
        cols: 12,
        train_rows: 10,
        test_rows: 2,
        noise: NoiseConfig { enabled: false, ..NoiseConfig::default() },
        ..SimConfig::default()
    };
    let ds = simulate(&sim)?;
    let object = ds.object.as_ref().expect("simulated");
    let probe = &ds.probe.as_ref().expect("simulated").grid;
    let frames: Vec<_> = ds.frames.iter().map(|f| &f.intensity).collect();
    let positions: Vec<_> = ds.frames.iter().map(|f| (f.position.y, f.position.x)).collect();

    let cfg = EpieConfig { iters: 200, ..EpieConfig::default() };
    let state = epie_reconstruct(&frames, &positions, probe, object.hw(), &cfg)?;
    for (k, e) in state.errors.iter().enumerate().step_by(40) {
        println!("sweep {:>3}  data error {e:.3e}", k + 1);
    }

    let mask = illumination_mask(probe, &positions, object.hw(), 0.1)?;
    let c = compare_to_truth(&state.object, &object.amplitude, &object.phase, &mask)?;
    println!(
        "{} px compared: amplitude MSE {:.3e}, phase MAE {:.4} rad after removing offset {:.3}",
        c.pixels, c.amplitude_mse, c.phase_mae, c.phase_offset
    );
    Ok(())
}

//! Train the circular-phase network on a small simulated scan, save the best
//! checkpoint, reload it and reconstruct the held-out rows.

use ptycho::circphase::geodesic_dist;
use ptycho::dataset::{simulate, NoiseConfig, SimConfig, Split};
use ptycho::model::{Checkpoint, ModelConfig};
use ptycho::recon::infer;
use ptycho::train::{train, TrainConfig};

fn main() -> ptycho::Result<()> {
    let sim = SimConfig {
        rows: 10,
        cols: 10,
        train_rows: 8,
        test_rows: 2,
        val_fraction: 0.1,
        noise: NoiseConfig { enabled: false, ..NoiseConfig::default() },
        ..SimConfig::default()
    };
    let ds = simulate(&sim)?;
    let model = ModelConfig { n_c: 8, ..ModelConfig::default() };
    let tc = TrainConfig { epochs: 4, batch_size: 16, half_cycle_epochs: 2, ..TrainConfig::default() };

    let dir = std::env::temp_dir().join("ptycho_train_small");
    let report = train(&ds, &model, &tc, |ck| ck.save(&dir))?;
    for e in &report.epochs {
        println!("epoch {:>2}  train {:>8.4}  val {:.4}", e.epoch, e.train_total, e.val.total);
    }

    let ck = Checkpoint::load(&dir)?;
    println!("best epoch {} (I_max {:.3e})", ck.epoch, ck.cfg.i_max);
    let test = ds.indices(Split::Test);
    let frames: Vec<_> = test.iter().map(|&i| &ds.frames[i].intensity).collect();
    let preds = infer(&ck, &frames, 32)?;
    let mut err = 0.0;
    for (p, &i) in preds.iter().zip(&test) {
        err += geodesic_dist(&p.phase, &ds.patches[i].phase)?.mean_f64();
    }
    println!("test phase error {:.4} rad over {} patches", err / test.len() as f64, test.len());
    Ok(())
}

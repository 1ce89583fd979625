//! Compare the full model with a few ablations on the same small scan.
//! Pass ablation names as arguments to choose others.

use ptycho::cli::{run_ablation, RunConfig};
use ptycho::model::Variant;
use ptycho::recon::Modality;
use ptycho::recon::mean_std;
use ptycho::train::Ablation;

fn main() -> ptycho::Result<()> {
    let mut cfg = RunConfig::default();
    for (k, v) in [("rows", "10"), ("cols", "10"), ("train_rows", "8"), ("test_rows", "2"), ("val_fraction", "0.1")] {
        cfg.set(k, v)?;
    }
    for (k, v) in [("noise", "false"), ("n_c", "8"), ("epochs", "3"), ("half_cycle_epochs", "2")] {
        cfg.set(k, v)?;
    }
    let ds = ptycho::dataset::simulate(&cfg.sim_config())?;

    let args: Vec<String> = std::env::args().skip(1).collect();
    let chosen: Vec<Ablation> = if args.is_empty() {
        vec![Ablation::Model(Variant::Full), Ablation::Model(Variant::ScalarPhase), Ablation::NoCircLoss]
    } else {
        args.iter().map(|a| a.parse()).collect::<ptycho::Result<_>>()?
    };

    let root = std::env::temp_dir().join("ptycho_ablation");
    for a in chosen {
        let r = run_ablation(&cfg, a, &ds, &root.join(a.as_str()), &cfg.hash())?;
        let mae: Vec<f64> = r.per_sample(Modality::Phase).iter().map(|m| m.mae).collect();
        let (m, s) = mean_std(&mae);
        println!("{:<18} phase MAE {m:.4} ± {s:.4}", a.as_str());
    }
    Ok(())
}

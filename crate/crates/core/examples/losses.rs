//! Composite objective on a synthetic patch: every term for a perfect
//! prediction, a noisy one, and one shifted across the phase cut.

use ptycho::circphase::{unit_project_var, PROJECT_EPS};
use ptycho::dataset::gen_object;
use ptycho::losses::{total_loss, BaseMetric, CircularOutputs, LossBreakdown, LossWeights, TargetVars};
use ptycho::tensor::{Tape, Tensor};

fn evaluate(amp: &Tensor<f64>, phase: &Tensor<f64>, amp_hat: &Tensor<f64>, phase_hat: &Tensor<f64>) -> ptycho::Result<LossBreakdown> {
    let mut t = Tape::<f64>::new();
    let target = TargetVars::register(&mut t, amp.clone(), phase.clone(), phase.map(f64::cos), phase.map(f64::sin));
    let a = t.param(amp_hat.clone());
    let c_pre = t.param(phase_hat.map(|p| 0.8 * p.cos()));
    let s_pre = t.param(phase_hat.map(|p| 0.8 * p.sin()));
    let (c, s) = unit_project_var(&mut t, c_pre, s_pre, PROJECT_EPS)?;
    let pred = CircularOutputs { amp: a, c_pre, s_pre, c, s };
    Ok(total_loss(&mut t, &pred, &target, &LossWeights::default(), BaseMetric::Mse)?.breakdown(&t))
}

fn main() -> ptycho::Result<()> {
    let obj = gen_object(32, 32, 1)?;
    let amp: Tensor<f64> = obj.amplitude.cast().reshape(&[1, 1, 32, 32])?;
    let phase: Tensor<f64> = obj.phase.cast().reshape(&[1, 1, 32, 32])?;
    let noisy_amp = Tensor::from_fn(amp.shape(), |i| amp.data()[i] + 0.05 * ((i * 7919 % 13) as f64 / 6.0 - 1.0));
    let shifted = phase.map(|p| p + 0.3);

    println!("{:<12} {}", "case", LossBreakdown::FIELDS.join(" "));
    for (name, a, p) in [("perfect", &amp, &phase), ("noisy amp", &noisy_amp, &phase), ("phase +0.3", &amp, &shifted)] {
        let b = evaluate(&amp, &phase, a, p)?;
        let vals: Vec<String> = b.values().iter().map(|v| format!("{v:.4}")).collect();
        println!("{name:<12} {}", vals.join(" "));
    }
    Ok(())
}

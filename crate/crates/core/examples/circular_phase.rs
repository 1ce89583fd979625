//! Phase on the unit circle: embedding, projection, recovery, and why a
//! scalar error is misleading across the ±π cut.

use std::f64::consts::PI;

use ptycho::circphase::{embed, geodesic_dist, recover_phase, unit_project, wrapped_diff, PROJECT_EPS};
use ptycho::tensor::Tensor;

fn main() -> ptycho::Result<()> {
    let truth: Tensor = Tensor::new(&[1, 4], vec![3.1, -3.1, 0.5, -1.0])?;
    let pred: Tensor = Tensor::new(&[1, 4], vec![-3.1, 3.1, 0.6, -1.2])?;

    let scalar: Vec<f32> = truth.data().iter().zip(pred.data()).map(|(a, b)| (a - b).abs()).collect();
    println!("scalar |error|   {scalar:?}");
    println!("geodesic error   {:?}", geodesic_dist(&truth, &pred)?.data());
    println!("signed arc       {:?}", wrapped_diff(&truth, &pred)?.data());

    let m = embed(&pred);
    let squashed = (m.c.map(|v| 0.3 * v), m.s.map(|v| 0.3 * v));
    let projected = unit_project(&squashed.0, &squashed.1, PROJECT_EPS)?;
    let back = recover_phase(&projected.c, &projected.s)?;
    println!("recovered after shrink+project {:?}", back.phase.data());

    let zero: Tensor = Tensor::zeros(&[1, 2]);
    let r = recover_phase(&zero, &zero)?;
    println!("degenerate pixels at the origin: {}", r.degenerate);
    println!("cut at ±{PI:.4}: 3.1 and -3.1 are {:.4} rad apart", 2.0 * PI - 6.2);
    Ok(())
}

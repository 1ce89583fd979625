//! Simulate one diffraction frame: probe, object window, exit wave,
//! far-field intensity, then detector noise.

use ptycho::dataset::{gen_object, wrap_fraction};
use ptycho::physics::{add_noise, diffract, exit_wave, make_probe, support_diameter, ProbeParams};

fn main() -> ptycho::Result<()> {
    let probe = make_probe(ProbeParams::default(), 0)?;
    println!("probe {}x{}, support diameter {:.1} px", probe.size(), probe.size(), support_diameter(&probe));

    let object = gen_object(128, 128, 7)?;
    println!("object 128x128, {:.1}% of pixels within 0.3 rad of the phase cut", 100.0 * wrap_fraction(&object.phase, 0.3));

    let window = object.to_complex()?.window(40, 40, 32, 32)?;
    let psi = exit_wave(&window, &probe)?;
    let clean = diffract(&psi)?;
    println!("exit-wave energy {:.4}, diffracted energy {:.4}", psi.energy(), clean.sum_f64());

    let max = clean.data().iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
    for photons in [1e6, 1e4, 1e2] {
        let noisy = add_noise(&clean, max, photons, 0.01 * max, 3)?;
        let rel = noisy.max_abs_diff(&clean) / max;
        println!("peak {photons:>9.0} photons: max deviation {:.2}% of the peak", 100.0 * rel);
    }
    Ok(())
}

//! Radially averaged power spectrum and low/mid/high band split of a phase
//! map, before and after smoothing.

use ptycho::dataset::gen_object;
use ptycho::recon::radial_psd;
use ptycho::tensor::Tensor;

fn box_blur(t: &Tensor, r: usize) -> Tensor {
    let (h, w) = t.hw();
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        let (mut sum, mut n) = (0.0, 0.0);
        for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
            for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                sum += t.at(yy, xx);
                n += 1.0;
            }
        }
        sum / n
    })
}

fn main() -> ptycho::Result<()> {
    let obj = gen_object(128, 128, 3)?;
    for (name, field) in [("phase", obj.phase.clone()), ("phase, 5x5 blur", box_blur(&obj.phase, 2))] {
        let psd = radial_psd(&field)?;
        let b = psd.bands;
        println!("{name:<16} low {:6.2}%  mid {:6.2}%  high {:6.2}%", b.low, b.mid, b.high);
    }
    let psd = radial_psd(&obj.phase)?;
    for r in [0, 4, 16, 32, 64] {
        println!("radius {r:>3}: {:.3e}", psd.radial[r]);
    }
    Ok(())
}

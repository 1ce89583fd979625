use std::collections::HashSet;
use std::f64::consts::PI;

use proptest::prelude::*;
use ptycho::dataset::{
    decode_grid, encode_grid, gen_object, make_dataset, plan_scan, read_complex, read_grid, required_object_size,
    split_rows, wrap_fraction, write_complex, write_grid, Dataset, NoiseConfig, Object, Split, PHASE_LEVELS,
};
use ptycho::physics::{exit_wave, make_probe, ComplexGrid, ProbeParams};
use ptycho::tensor::Tensor;

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn object_is_deterministic() {
    let a = gen_object(120, 100, 4).unwrap();
    let b = gen_object(120, 100, 4).unwrap();
    assert_eq!(bits(&a.amplitude), bits(&b.amplitude));
    assert_eq!(bits(&a.phase), bits(&b.phase));
    let c = gen_object(120, 100, 5).unwrap();
    assert_ne!(bits(&a.phase), bits(&c.phase));
}

#[test]
fn object_levels_are_declared() {
    let o = gen_object(518, 518, 0).unwrap();
    let levels: Vec<f32> = PHASE_LEVELS.iter().map(|&l| l as f32).collect();
    assert!(o.phase.data().iter().all(|p| levels.contains(p)));
    assert!(o.amplitude.data().iter().all(|&a| [0.2f32, 0.9, 0.55].contains(&a)));
}

#[test]
fn object_wrap_stress_fraction() {
    for (h, w, seed) in [(518, 518, 0), (94, 94, 1), (62, 134, 2), (158, 278, 3)] {
        let o = gen_object(h, w, seed).unwrap();
        let near: usize = o.phase.data().iter().filter(|&&p| PI - (p as f64).abs() <= 0.3).count();
        let frac = near as f64 / (h * w) as f64;
        assert!(frac >= 0.05, "{h}x{w}: {frac}");
        assert!((wrap_fraction(&o.phase, 0.3) - frac).abs() < 1e-12);
    }
}

#[test]
fn object_rejects_tiny_canvas() {
    assert!(gen_object(8, 64, 0).is_err());
}

#[test]
fn plan_without_jitter_is_regular() {
    let p = plan_scan(4, 5, 8, 0, 32, 9).unwrap();
    assert_eq!(p.positions.len(), 20);
    for pos in &p.positions {
        assert_eq!((pos.y, pos.x), (pos.row * 8, pos.col * 8));
    }
}

#[test]
fn default_plan_count_and_overlap() {
    let p = plan_scan(61, 61, 8, 3, 32, 0).unwrap();
    assert_eq!(p.positions.len(), 3721);
    assert_eq!(p.object_size(), (518, 518));
    let overlap = (32 - 8) as f64 / 32.0;
    assert_eq!(overlap, 0.75);
    let (h, w) = p.object_size();
    for pos in &p.positions {
        assert!(pos.y + 32 <= h && pos.x + 32 <= w);
        let (ny, nx) = (3 + pos.row * 8, 3 + pos.col * 8);
        assert!((pos.y as i64 - ny as i64).abs() <= 3 && (pos.x as i64 - nx as i64).abs() <= 3);
    }
}

#[test]
fn zero_jitter_neighbours_share_three_quarters() {
    let p = plan_scan(2, 2, 8, 0, 32, 0).unwrap();
    let (a, b) = (p.positions[0], p.positions[1]);
    let shared = (32 - (b.x - a.x)) * 32;
    assert!(shared as f64 / 1024.0 >= 0.75);
}

#[test]
fn flat_probe_ones_object_gives_dc_frames() {
    let probe = make_probe(ProbeParams { size: 8, radius: 8.0, sigma: 1e12, curvature: 0.0 }, 0).unwrap();
    let plan = plan_scan(3, 3, 4, 1, 8, 0).unwrap();
    let (h, w) = plan.object_size();
    let object = Object::new(Tensor::full(&[h, w], 1.0), Tensor::zeros(&[h, w])).unwrap();
    let noise = NoiseConfig { enabled: false, ..Default::default() };
    let data = make_dataset(&object, &probe, &plan, &noise).unwrap();
    assert_eq!(data.len(), 9);
    for (f, _) in &data {
        assert!((f.intensity.data()[0] - 64.0).abs() < 1e-4);
        assert!(f.intensity.data()[1..].iter().all(|v| v.abs() < 1e-6));
    }
}

#[test]
fn frames_obey_parseval_and_patch_invariants() {
    let probe = make_probe(ProbeParams::default(), 0).unwrap();
    let plan = plan_scan(4, 4, 8, 3, 32, 1).unwrap();
    let (h, w) = plan.object_size();
    let object = gen_object(h, w, 2).unwrap();
    let noise = NoiseConfig { enabled: false, ..Default::default() };
    let data = make_dataset(&object, &probe, &plan, &noise).unwrap();
    let field = object.to_complex().unwrap();
    for (f, p) in &data {
        let pos = f.position;
        let psi = exit_wave(&field.window(pos.y, pos.x, 32, 32).unwrap(), &probe).unwrap();
        assert!((f.intensity.sum_f64() - psi.energy()).abs() / psi.energy() < 1e-4);
        for i in 0..p.phase.len() {
            let (c, s) = (p.cosp.data()[i] as f64, p.sinp.data()[i] as f64);
            assert!((c * c + s * s - 1.0).abs() < 1e-6);
            assert!(((s.atan2(c)) - p.phase.data()[i] as f64).abs() < 1e-6);
            assert_eq!(p.amplitude.data()[i], object.amplitude.at(pos.y + i / 32, pos.x + i % 32));
        }
    }
}

#[test]
fn dataset_generation_is_pure_and_noise_is_seeded() {
    let probe = make_probe(ProbeParams::default(), 0).unwrap();
    let plan = plan_scan(3, 3, 8, 3, 32, 1).unwrap();
    let (h, w) = plan.object_size();
    let object = gen_object(h, w, 2).unwrap();
    let noise = NoiseConfig { seed: 7, ..Default::default() };
    let a = make_dataset(&object, &probe, &plan, &noise).unwrap();
    let b = make_dataset(&object, &probe, &plan, &noise).unwrap();
    for ((fa, _), (fb, _)) in a.iter().zip(&b) {
        assert_eq!(bits(&fa.intensity), bits(&fb.intensity));
        assert!(fa.noisy && fa.intensity.data().iter().all(|&v| v >= 0.0));
    }
    let c = make_dataset(&object, &probe, &plan, &NoiseConfig { seed: 8, ..noise }).unwrap();
    assert_ne!(bits(&a[0].0.intensity), bits(&c[0].0.intensity));
}

fn frames_for(rows: usize, cols: usize) -> Vec<ptycho::dataset::DiffractionFrame> {
    let plan = plan_scan(rows, cols, 8, 0, 32, 0).unwrap();
    plan.positions
        .iter()
        .enumerate()
        .map(|(index, &position)| ptycho::dataset::DiffractionFrame {
            index,
            intensity: Tensor::zeros(&[1, 1]),
            position,
            noisy: false,
            split: None,
        })
        .collect()
}

#[test]
fn default_split_counts() {
    let mut frames = frames_for(61, 61);
    split_rows(&mut frames, 61, 49, 12, 0.05, 3).unwrap();
    let count = |s| frames.iter().filter(|f| f.split == Some(s)).count();
    assert_eq!(count(Split::Test), 732);
    assert_eq!(count(Split::Train) + count(Split::Val), 2989);
    assert_eq!(count(Split::Val), 149);
    assert!(frames.iter().all(|f| f.split.is_some()));
    assert!(frames.iter().filter(|f| f.split == Some(Split::Test)).all(|f| f.position.row >= 49));
    let mut again = frames_for(61, 61);
    split_rows(&mut again, 61, 49, 12, 0.05, 3).unwrap();
    assert_eq!(frames, again);
}

#[test]
fn split_row_mismatch() {
    let mut frames = frames_for(4, 4);
    assert!(split_rows(&mut frames, 4, 3, 2, 0.05, 0).is_err());
}

#[test]
fn grid_round_trip_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let g = Tensor::from_fn(&[32, 32], |i| ((i * 7919) % 1013) as f32 * 0.37 - 100.0);
    let path = dir.path().join("g.ptg");
    write_grid(&path, &g).unwrap();
    assert_eq!(bits(&read_grid(&path).unwrap()), bits(&g));
    let bytes = std::fs::read(&path).unwrap();
    let header = std::str::from_utf8(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).unwrap();
    assert_eq!(header, r#"{"magic":"PTGRID","version":1,"shape":[32,32],"dtype":"f32le","order":"row-major"}"#);
    assert_eq!(bytes.len(), header.len() + 1 + 32 * 32 * 4);
}

#[test]
fn grid_truncation_and_malformed_header() {
    let header = r#"{"magic":"PTGRID","version":1,"shape":[3,32,32],"dtype":"f32le","order":"row-major"}"#;
    let mut bytes = format!("{header}\n").into_bytes();
    bytes.extend(std::iter::repeat(0u8).take(2 * 32 * 32 * 4));
    assert!(matches!(decode_grid(&bytes, "t"), Err(ptycho::Error::GridFormat { .. })));
    assert!(decode_grid(b"{\"magic\":\"NOPE\"}\n", "t").is_err());
    assert!(decode_grid(b"no newline", "t").is_err());
    let wrong = header.replace("f32le", "f64le");
    let mut bytes = format!("{wrong}\n").into_bytes();
    bytes.extend(std::iter::repeat(0u8).take(3 * 32 * 32 * 4));
    assert!(decode_grid(&bytes, "t").is_err());
    let extra = header.replace(r#""order":"row-major""#, r#""order":"row-major","x":1"#);
    assert!(decode_grid(format!("{extra}\n").as_bytes(), "t").is_err());
    assert!(encode_grid(&Tensor::full(&[2], f32::NAN)).is_err());
}

#[test]
fn complex_grid_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = ComplexGrid::new(3, 4, (0..12).map(|i| i as f32).collect(), (0..12).map(|i| -(i as f32) * 0.5).collect()).unwrap();
    let path = dir.path().join("c.ptg");
    write_complex(&path, &g).unwrap();
    assert_eq!(read_grid(&path).unwrap().shape(), &[3, 4, 2]);
    assert_eq!(read_complex(&path).unwrap(), g);
}

#[test]
fn dataset_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let probe = make_probe(ProbeParams::default(), 0).unwrap();
    let plan = plan_scan(3, 4, 8, 3, 32, 1).unwrap();
    let (h, w) = plan.object_size();
    let object = gen_object(h, w, 2).unwrap();
    let mut samples = make_dataset(&object, &probe, &plan, &NoiseConfig::default()).unwrap();
    let mut frames: Vec<_> = samples.iter().map(|s| s.0.clone()).collect();
    split_rows(&mut frames, 3, 2, 1, 0.25, 0).unwrap();
    for (s, f) in samples.iter_mut().zip(frames) {
        s.0 = f;
    }
    let ds = Dataset::from_samples(samples, Some(object.clone()), Some(probe.clone()));
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.frames, ds.frames);
    assert_eq!(back.patches, ds.patches);
    assert_eq!(back.object.unwrap(), object);
    assert_eq!(back.probe.unwrap().grid, probe.grid);
    assert_eq!(ds.indices(Split::Val).len(), 2);
    let ids: HashSet<usize> = [Split::Train, Split::Val, Split::Test].iter().flat_map(|&s| ds.indices(s)).collect();
    assert_eq!(ids.len(), ds.len());
}

#[test]
fn required_size_matches_plan() {
    assert_eq!(required_object_size(8, 8, 8, 32, 3), (94, 94));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn plan_windows_inside(rows in 1usize..8, cols in 1usize..8, step in 1usize..10, jitter in 0usize..4, seed in any::<u64>()) {
        let p = plan_scan(rows, cols, step, jitter, 16, seed).unwrap();
        let (h, w) = p.object_size();
        prop_assert_eq!(p.positions.len(), rows * cols);
        for pos in &p.positions {
            prop_assert!(pos.y + 16 <= h && pos.x + 16 <= w);
        }
    }

    #[test]
    fn grid_round_trip_prop(v in proptest::collection::vec(-1e6f32..1e6, 1..200)) {
        let t = Tensor::new(&[v.len()], v).unwrap();
        prop_assert_eq!(bits(&decode_grid(&encode_grid(&t).unwrap(), "p").unwrap()), bits(&t));
    }
}

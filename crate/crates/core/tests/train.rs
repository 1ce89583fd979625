use std::collections::BTreeMap;

use ptycho::dataset::{simulate, Dataset, SimConfig, Split};
use ptycho::model::{init_params, ModelConfig, Variant};
use ptycho::tensor::Tensor;
use ptycho::train::{
    adam_step, clip_grad_norm, cyclic_lr, eval_batch, global_norm, loss_log_csv, make_batch, train, AdamState,
    TrainConfig,
};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-30)
}

#[test]
fn cyclic_schedule_values() {
    let half = 100;
    assert!(close(cyclic_lr(0, half, 1e-3).unwrap(), 1e-4, 1e-12));
    assert!(close(cyclic_lr(half, half, 1e-3).unwrap(), 1e-3, 1e-12));
    assert!(close(cyclic_lr(2 * half, half, 1e-3).unwrap(), 1e-4, 1e-12));
    assert!(close(cyclic_lr(3 * half, half, 1e-3).unwrap(), 5.5e-4, 1e-12));
    assert!(close(cyclic_lr(5 * half, half, 1e-3).unwrap(), 3.25e-4, 1e-12));
    assert!(close(cyclic_lr(half / 2, half, 1e-3).unwrap(), 5.5e-4, 1e-12));
}

#[test]
fn cyclic_schedule_bounds() {
    for step in 0..1000 {
        let lr = cyclic_lr(step, 37, 2e-3).unwrap();
        assert!((2e-4 - 1e-18..=2e-3 + 1e-18).contains(&lr), "{step}: {lr}");
    }
}

fn grads(values: &[(&str, Vec<f32>)]) -> BTreeMap<String, Tensor> {
    values.iter().map(|(k, v)| (k.to_string(), Tensor::new(&[v.len()], v.clone()).unwrap())).collect()
}

#[test]
fn clipping_rescales_only_large_norms() {
    let mut g = grads(&[("a", vec![3.0, 0.0]), ("b", vec![4.0])]);
    let pre = clip_grad_norm(&mut g, 1.0).unwrap();
    assert!(close(pre, 5.0, 1e-12));
    assert!(close(global_norm(&g), 1.0, 1e-6));
    assert!(close(g["a"].data()[0] as f64, 0.6, 1e-6));

    let mut small = grads(&[("a", vec![0.3, 0.4])]);
    let before = small.clone();
    assert!(close(clip_grad_norm(&mut small, 1.0).unwrap(), 0.5, 1e-6));
    assert_eq!(small, before);

    let mut bad = grads(&[("a", vec![f32::NAN])]);
    assert!(clip_grad_norm(&mut bad, 1.0).is_err());
}

#[test]
fn adam_first_step_moves_by_lr_against_gradient() {
    let cfg = ModelConfig { n_c: 4, ..ModelConfig::default() };
    let mut params = init_params(&cfg).unwrap();
    let before = params.clone();
    let mut state = AdamState::new(&params);
    let g: BTreeMap<String, Tensor> =
        params.iter().map(|(k, t)| (k.clone(), Tensor::from_fn(t.shape(), |i| if i % 2 == 0 { 0.5 } else { -2.0 }))).collect();
    adam_step(&mut params, &g, &mut state, 1e-3).unwrap();
    for (name, p) in params.iter() {
        let p0 = before.get(name).unwrap();
        for (i, (a, b)) in p.data().iter().zip(p0.data()).enumerate() {
            let expected = if i % 2 == 0 { -1e-3 } else { 1e-3 };
            assert!(((a - b) as f64 - expected).abs() < 1e-6, "{name}[{i}]");
        }
    }
    assert_eq!(state.t, 1);
}

fn small_dataset() -> Dataset {
    let cfg = SimConfig { rows: 6, cols: 6, train_rows: 4, test_rows: 2, val_fraction: 0.25, ..SimConfig::default() };
    simulate(&cfg).unwrap()
}

#[test]
fn overfits_one_batch() {
    let ds = small_dataset();
    let mut cfg = ModelConfig { n_c: 8, ..ModelConfig::default() };
    let idx: Vec<usize> = ds.indices(Split::Train).into_iter().take(8).collect();
    cfg.i_max = ptycho::model::estimate_i_max(idx.iter().map(|&i| &ds.frames[i].intensity)).unwrap();
    let tc = TrainConfig::default();
    let batch = make_batch(&ds, &idx).unwrap();
    let mut params = init_params(&cfg).unwrap();
    let mut state = AdamState::new(&params);
    let first = eval_batch(&params, &cfg, &tc, &batch, false).unwrap().breakdown.total;
    let mut last = first;
    for _ in 0..50 {
        let e = eval_batch(&params, &cfg, &tc, &batch, true).unwrap();
        let mut g = e.grads.unwrap();
        clip_grad_norm(&mut g, tc.clip_norm).unwrap();
        adam_step(&mut params, &g, &mut state, 1e-3).unwrap();
        last = e.breakdown.total;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic_and_selects_best() {
    let ds = small_dataset();
    let cfg = ModelConfig { n_c: 4, ..ModelConfig::default() };
    let tc = TrainConfig { epochs: 3, batch_size: 8, half_cycle_epochs: 1, seed: 5, ..TrainConfig::default() };
    let mut saved = Vec::new();
    let a = train(&ds, &cfg, &tc, |ck| {
        saved.push(ck.val_loss);
        Ok(())
    })
    .unwrap();
    let b = train(&ds, &cfg, &tc, |_| Ok(())).unwrap();
    assert_eq!(loss_log_csv(&a.steps), loss_log_csv(&b.steps));
    assert_eq!(a.best.params, b.best.params);
    assert!(saved.windows(2).all(|w| w[1] < w[0]));
    let min = a.epochs[1..].iter().map(|e| e.val.total).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best.val_loss, min);
    assert_eq!(a.epochs.len(), 4);
    assert_eq!(a.steps.len(), 3 * ds.indices(Split::Train).len().div_ceil(8));
    assert!(a.steps.iter().all(|s| s.clipped_norm <= 1.0 + 1e-6));
    assert!(a.best.cfg.i_max > 0.0);
}

#[test]
fn scalar_variant_trains() {
    let ds = small_dataset();
    let cfg = ModelConfig { n_c: 4, variant: Variant::ScalarPhase, ..ModelConfig::default() };
    let tc = TrainConfig { epochs: 1, batch_size: 16, ..TrainConfig::default() };
    let r = train(&ds, &cfg, &tc, |_| Ok(())).unwrap();
    assert!(r.epochs[1].val_manifold_dev.is_none());
    assert!(r.best.val_loss.is_finite());
}

#[test]
fn empty_validation_split_is_an_error() {
    let cfg = SimConfig { rows: 3, cols: 3, train_rows: 2, test_rows: 1, val_fraction: 0.0, ..SimConfig::default() };
    let ds = simulate(&cfg).unwrap();
    let r = train(&ds, &ModelConfig { n_c: 4, ..ModelConfig::default() }, &TrainConfig::default(), |_| Ok(()));
    assert!(r.is_err());
}

#[test]
fn ablations_round_trip_and_toggle_weights() {
    use ptycho::train::Ablation;
    let all = Ablation::all();
    assert_eq!(all.len(), 13);
    for a in &all {
        assert_eq!(a.as_str().parse::<Ablation>().unwrap(), *a);
    }
    assert!("no_such".parse::<Ablation>().is_err());

    let (mut m, mut t) = (ModelConfig::default(), TrainConfig::default());
    Ablation::NoCircLoss.apply(&mut m, &mut t);
    assert_eq!(t.weights.lambda_circ, 0.0);
    assert_eq!(t.weights.w_c, 0.1);

    let (mut m, mut t) = (ModelConfig::default(), TrainConfig::default());
    Ablation::MaeOnly.apply(&mut m, &mut t);
    assert_eq!((t.weights.w_a, t.weights.w_p, t.weights.w_c), (0.0, 0.0, 0.0));
    assert_eq!(t.base_metric, ptycho::losses::BaseMetric::Mae);
    assert_eq!(m.variant, Variant::Full);

    let (mut m, mut t) = (ModelConfig::default(), TrainConfig::default());
    Ablation::Model(Variant::ScalarPhase).apply(&mut m, &mut t);
    assert_eq!(m.variant, Variant::ScalarPhase);
    assert_eq!(t, TrainConfig::default());
}

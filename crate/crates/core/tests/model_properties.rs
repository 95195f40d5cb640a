use pmnet_core::model::{
    load_checkpoint, save_checkpoint, CheckpointMeta, Pmnet, PmnetConfig, StageShape,
};
use pmnet_core::nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> PmnetConfig {
    PmnetConfig {
        input_size: 32,
        base_width: 4,
        reslayer_block_counts: [1, 1, 1, 2],
        seed: 4,
        ..PmnetConfig::default()
    }
}

fn random_input<T: pmnet_core::nn::Scalar>(n: usize, size: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 2 * size * size)
        .map(|_| T::c(rng.gen_range(0.0..1.0)))
        .collect();
    Tensor::from_vec(n, 2, size, size, data).unwrap()
}

fn stage(name: &str, channels: &[usize], size: usize) -> StageShape {
    StageShape {
        name: name.into(),
        channels: channels.to_vec(),
        size,
    }
}

#[test]
fn full_config_trace_matches_reference_table() {
    let want = vec![
        stage("E1", &[64], 65),
        stage("E2", &[256], 65),
        stage("E3", &[512], 33),
        stage("E4", &[512], 17),
        stage("E5", &[1024], 17),
        stage("E6", &[512], 17),
        stage("D6", &[512, 512], 17),
        stage("D5", &[512, 512], 33),
        stage("D4", &[256, 256], 65),
        stage("D3", &[256, 256], 65),
        stage("D2", &[256, 64], 65),
        stage("D1", &[128, 2], 256),
        stage("out", &[1], 256),
    ];
    let cfg = PmnetConfig::full();
    assert_eq!(cfg.expected_shapes(), want);
    let model = Pmnet::<f32>::new(&cfg).unwrap();
    let (y, cache) = model.forward(&random_input(1, 256, 0), false).unwrap();
    assert_eq!(cache.trace, want);
    assert_eq!(y.shape(), [1, 1, 256, 256]);
}

#[test]
fn unsatisfiable_config_reports_shapes() {
    let cfg = PmnetConfig {
        input_size: 100,
        ..PmnetConfig::full()
    };
    let err = Pmnet::<f32>::new(&cfg).unwrap_err().to_string();
    assert!(err.contains("E1"), "{err}");
}

#[test]
fn wrong_input_shape_is_rejected() {
    let model = Pmnet::<f32>::new(&tiny()).unwrap();
    assert!(model.predict(&random_input(1, 64, 0)).is_err());
    let x = Tensor::<f32>::zeros(1, 3, 32, 32);
    assert!(model.predict(&x).is_err());
}

fn mse_and_grad(y: &Tensor<f64>, t: &[f64]) -> (f64, Tensor<f64>) {
    let n = t.len() as f64;
    let mut g = y.clone();
    let mut loss = 0.0;
    for (gv, (&yv, &tv)) in g.data.iter_mut().zip(y.data.iter().zip(t)) {
        loss += (yv - tv) * (yv - tv);
        *gv = 2.0 * (yv - tv) / n;
    }
    (loss / n, g)
}

#[test]
fn backward_matches_finite_differences_in_double_precision() {
    let model: Pmnet<f64> = Pmnet::<f32>::new(&tiny()).unwrap().cast().unwrap();
    let x = random_input::<f64>(2, 32, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let target: Vec<f64> = (0..2 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();

    let mut analytic = model.clone();
    let (y, cache) = analytic.forward(&x, true).unwrap();
    let (_, gy) = mse_and_grad(&y, &target);
    analytic.zero_grad();
    analytic.backward(&cache, &gy).unwrap();
    let grads: Vec<(String, Vec<f64>)> = analytic
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone()))
        .collect();

    // every tensor once, then random picks, ~2 samples per tensor
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for round in 0..2 {
        for (k, (_, g)) in grads.iter().enumerate() {
            let i = if round == 0 {
                (0..g.len())
                    .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()))
                    .unwrap()
            } else {
                rng.gen_range(0..g.len())
            };
            picks.push((k, i));
        }
    }
    assert!(
        picks.len() >= 100,
        "only {} sampled parameters",
        picks.len()
    );

    let loss_with = |k: usize, i: usize, delta: f64| {
        let mut m = model.clone();
        m.named_params_mut()[k].1.value[i] += delta;
        let (y, _) = m.forward(&x, true).unwrap();
        mse_and_grad(&y, &target).0
    };
    let h = 1e-6;
    let mut failures = Vec::new();
    for &(k, i) in &picks {
        let numeric = (loss_with(k, i, h) - loss_with(k, i, -h)) / (2.0 * h);
        let a = grads[k].1[i];
        if (a - numeric).abs() > 1e-3 * a.abs().max(numeric.abs()) + 1e-9 {
            failures.push(format!(
                "{}[{i}]: analytic {a:e} numeric {numeric:e}",
                grads[k].0
            ));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = PmnetConfig {
        input_size: 64,
        base_width: 8,
        reslayer_block_counts: [1, 1, 1, 1],
        ..PmnetConfig::default()
    };
    let mut model = Pmnet::<f32>::new(&cfg).unwrap();
    let x = random_input::<f32>(2, 64, 3);
    let (y, cache) = model.forward(&x, true).unwrap();
    let gy = Tensor::from_vec(2, 1, 64, 64, y.data.iter().map(|v| v - 0.3).collect()).unwrap();
    model.backward(&cache, &gy).unwrap();
    for (name, p) in model.named_params() {
        assert!(
            p.grad.iter().all(|g| g.is_finite()),
            "{name} has non-finite gradient"
        );
        assert!(p.grad.iter().any(|&g| g != 0.0), "{name} has zero gradient");
    }
}

#[test]
fn eval_mode_is_batch_invariant_and_bounded() {
    let model = Pmnet::<f32>::new(&tiny()).unwrap();
    let x = random_input::<f32>(3, 32, 5);
    let batched = model.predict(&x).unwrap();
    for i in 0..3 {
        let single = Tensor::from_vec(1, 2, 32, 32, x.item(i).to_vec()).unwrap();
        let y = model.predict(&single).unwrap();
        for (a, b) in y.data.iter().zip(batched.item(i)) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
    let zero = model.predict(&Tensor::zeros(1, 2, 32, 32)).unwrap();
    assert!(zero.data.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn parameter_names_are_stable() {
    let a = Pmnet::<f32>::new(&tiny()).unwrap();
    let b = Pmnet::<f32>::new(&PmnetConfig { seed: 99, ..tiny() }).unwrap();
    let names = |m: &Pmnet<f32>| {
        m.named_params()
            .into_iter()
            .map(|(n, _)| n)
            .collect::<Vec<_>>()
    };
    assert_eq!(names(&a), names(&b));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Pmnet::<f32>::new(&tiny()).unwrap();
    // move the running statistics away from their initial values
    let x = random_input::<f32>(2, 32, 6);
    let (y, cache) = model.forward(&x, true).unwrap();
    model.backward(&cache, &y).unwrap();
    let meta = CheckpointMeta {
        epoch: 3,
        step: 42,
        val_mse: Some(0.01),
        source: "test".into(),
    };
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &meta, &path).unwrap();
    let (back, meta_back) = load_checkpoint(&path).unwrap();
    assert_eq!(meta_back, meta);
    assert_eq!(back.config(), model.config());
    for ((na, pa), (nb, pb)) in model.named_params().into_iter().zip(back.named_params()) {
        assert_eq!(na, nb);
        assert!(pa
            .value
            .iter()
            .zip(&pb.value)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    for ((_, a), (_, b)) in model.named_buffers().into_iter().zip(back.named_buffers()) {
        assert!(a.iter().zip(b).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let probe = random_input::<f32>(1, 32, 7);
    let (p1, p2) = (
        model.predict(&probe).unwrap(),
        back.predict(&probe).unwrap(),
    );
    assert!(p1
        .data
        .iter()
        .zip(&p2.data)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn checkpoint_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&path).is_err());
    assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
}

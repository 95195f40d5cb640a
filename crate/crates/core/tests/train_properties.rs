use std::collections::BTreeSet;

use pmnet_core::dataset::{GraySample, SampleMeta};
use pmnet_core::model::{Pmnet, PmnetConfig};
use pmnet_core::propagation::Generator;
use pmnet_core::raster::GrayImage;
use pmnet_core::train::{
    finetune, lr_at_epoch, subsample_maps, train, write_run, Adam, TrainConfig, TrainData,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, FileFailurePersistence};

const N: usize = 32;

fn tiny() -> PmnetConfig {
    PmnetConfig {
        input_size: N,
        base_width: 4,
        reslayer_block_counts: [1, 1, 1, 1],
        ..PmnetConfig::default()
    }
}

/// A square block of buildings and a radial pathloss pattern around `tx`.
fn sample(map: usize, k: usize) -> GraySample {
    let tx = [4 + (map * 7 + k * 5) % 20, 3 + (map * 3 + k * 11) % 22];
    let b0 = 8 + map % 10;
    let mut m = GrayImage::filled(N, N, 255);
    let mut t = GrayImage::filled(N, N, 0);
    let mut txc = GrayImage::filled(N, N, 0);
    for y in 0..N {
        for x in 0..N {
            let building = (b0..b0 + 6).contains(&x) && (20..26).contains(&y) && [x, y] != tx;
            if building {
                m.set(x, y, 0);
            } else {
                let d =
                    ((x as f64 - tx[0] as f64).powi(2) + (y as f64 - tx[1] as f64).powi(2)).sqrt();
                t.set(x, y, (230.0 - 5.0 * d).max(20.0) as u8);
            }
        }
    }
    txc.set(tx[0], tx[1], 255);
    GraySample {
        map_channel: m,
        tx_channel: txc,
        target: t,
        meta: SampleMeta {
            sample_id: format!("m{map}_t{k}"),
            scene_id: format!("m{map}_t{k}"),
            map_id: format!("m{map}"),
            crop_index: None,
            aug_tag: "id".into(),
            tx,
            meters_per_pixel: 1.0,
            generator: Generator::RayLaunch,
            fc_ghz: 3.5,
        },
    }
}

fn samples(maps: std::ops::Range<usize>, per_map: usize) -> Vec<GraySample> {
    maps.flat_map(|m| (0..per_map).map(move |k| sample(m, k)))
        .collect()
}

#[test]
fn synthetic_samples_are_valid() {
    for s in samples(0..4, 3) {
        s.validate().unwrap();
    }
}

#[test]
fn learning_rate_halves_after_ten_epochs() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at_epoch(&cfg, 0), 1e-3);
    assert_eq!(lr_at_epoch(&cfg, 9), 1e-3);
    assert_eq!(lr_at_epoch(&cfg, 10), 0.5 * lr_at_epoch(&cfg, 0));
    assert_eq!(lr_at_epoch(&cfg, 25), 0.25e-3);
}

#[test]
fn adam_with_zero_gradient_changes_nothing() {
    let mut model = Pmnet::<f32>::new(&tiny()).unwrap();
    model.zero_grad();
    let before = model.clone();
    let mut adam = Adam::new(&model, &TrainConfig::default());
    for _ in 0..3 {
        adam.step(&mut model, 1e-3);
    }
    for ((_, a), (_, b)) in before.named_params().into_iter().zip(model.named_params()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn frozen_parameters_do_not_move() {
    let mut model = Pmnet::<f32>::new(&tiny()).unwrap();
    for (_, p) in model.named_params_mut() {
        p.grad.iter_mut().for_each(|g| *g = 0.1);
    }
    let before = model.clone();
    let cfg = TrainConfig {
        freeze: vec!["e1.".into()],
        ..TrainConfig::default()
    };
    Adam::new(&model, &cfg).step(&mut model, 1e-3);
    for ((name, a), (_, b)) in before.named_params().into_iter().zip(model.named_params()) {
        assert_eq!(name.starts_with("e1."), a.value == b.value, "{name}");
    }
}

#[test]
fn single_sample_is_overfit() {
    let s = vec![sample(0, 0)];
    let data = TrainData::new(&s, &s).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 200,
        lr_step_epochs: 1000,
        probe_every: 1000,
        ..TrainConfig::default()
    };
    let run = train(Pmnet::new(&tiny()).unwrap(), &data, &cfg).unwrap();
    assert_eq!(run.steps(), 200);
    let last = run.step_history.last().unwrap().train_mse;
    assert!(last < 1e-3, "final training MSE {last}");
}

#[test]
fn training_is_deterministic() {
    let tr = samples(0..3, 2);
    let va = samples(3..4, 2);
    let data = TrainData::new(&tr, &va).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        epochs: 2,
        probe_every: 2,
        ..TrainConfig::default()
    };
    let a = train(Pmnet::new(&tiny()).unwrap(), &data, &cfg).unwrap();
    let b = train(Pmnet::new(&tiny()).unwrap(), &data, &cfg).unwrap();
    assert_eq!(a.step_history, b.step_history);
    assert_eq!(a.probes, b.probes);
    for ((_, x), (_, y)) in a
        .model
        .named_params()
        .into_iter()
        .zip(b.model.named_params())
    {
        assert_eq!(x.value, y.value);
    }
}

#[test]
fn early_stop_and_step_cap() {
    let tr = samples(0..3, 2);
    let data = TrainData::new(&tr, &tr).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        epochs: 50,
        max_steps: Some(5),
        ..TrainConfig::default()
    };
    assert_eq!(
        train(Pmnet::new(&tiny()).unwrap(), &data, &cfg)
            .unwrap()
            .steps(),
        5
    );
    let cfg = TrainConfig {
        batch_size: 2,
        epochs: 50,
        stop_at_val_rmse: Some(10.0),
        ..TrainConfig::default()
    };
    let run = train(Pmnet::new(&tiny()).unwrap(), &data, &cfg).unwrap();
    assert_eq!(run.steps(), 0);
    assert_eq!(run.steps_to_threshold(&[10.0]), vec![(10.0, Some(0))]);
}

#[test]
fn diverging_training_is_reported() {
    let tr = samples(0..2, 2);
    let data = TrainData::new(&tr, &tr).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        epochs: 3,
        lr_initial: 1e38,
        ..TrainConfig::default()
    };
    let err = train(Pmnet::new(&tiny()).unwrap(), &data, &cfg).unwrap_err();
    assert!(matches!(err, pmnet_core::Error::Diverged { .. }), "{err}");
}

#[test]
fn mismatched_pretrained_network_is_rejected() {
    let tr = samples(0..2, 1);
    let other = Pmnet::<f32>::new(&PmnetConfig {
        base_width: 8,
        ..tiny()
    })
    .unwrap();
    let err = finetune(
        Some(&other),
        &tiny(),
        &tr,
        &tr,
        1.0,
        &TrainConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, pmnet_core::Error::Incompatible(_)), "{err}");
}

#[test]
fn run_directory_has_all_artifacts() {
    let tr = samples(0..2, 2);
    let data = TrainData::new(&tr, &tr).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        epochs: 1,
        probe_every: 1,
        ..TrainConfig::default()
    };
    let run = train(Pmnet::new(&tiny()).unwrap(), &data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = write_run(dir.path(), &cfg, &run, None, 1.0, &[0.1], None, "test").unwrap();
    assert_eq!(summary.steps, 2);
    for f in [
        "config.json",
        "metrics.csv",
        "report.json",
        "checkpoints/best.ckpt",
        "checkpoints/last.ckpt",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,split,metric,value"));
}

fn quiet(cases: u32) -> Config {
    Config {
        cases,
        failure_persistence: Some(Box::new(FileFailurePersistence::Off)),
        ..Config::default()
    }
}

proptest! {
    #![proptest_config(quiet(64))]
    #[test]
    fn fraction_subsets_are_map_exclusive(n_maps in 1usize..12, fraction in 0.01f64..=1.0, seed in any::<u64>()) {
        let all: Vec<GraySample> = (0..n_maps).flat_map(|m| (0..2).map(move |k| {
            let mut s = sample(0, 0);
            s.meta.map_id = format!("m{m}");
            s.meta.sample_id = format!("m{m}_{k}");
            s
        })).collect();
        let kept = subsample_maps(&all, fraction, seed).unwrap();
        let maps: BTreeSet<&str> = kept.iter().map(|s| s.meta.map_id.as_str()).collect();
        prop_assert!(!maps.is_empty());
        // whole maps only
        for m in &maps {
            let total = all.iter().filter(|s| s.meta.map_id == *m).count();
            prop_assert_eq!(kept.iter().filter(|s| s.meta.map_id == *m).count(), total);
        }
        let want = ((fraction * n_maps as f64).round() as usize).clamp(1, n_maps);
        prop_assert_eq!(maps.len(), want);
        // same seed, same subset
        prop_assert_eq!(subsample_maps(&all, fraction, seed).unwrap(), kept);
    }
}

#[test]
fn fraction_outside_unit_interval_is_rejected() {
    let all = samples(0..2, 1);
    assert!(subsample_maps(&all, 0.0, 0).is_err());
    assert!(subsample_maps(&all, 1.5, 0).is_err());
}

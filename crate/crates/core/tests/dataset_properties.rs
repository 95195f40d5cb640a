use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pmnet_core::dataset::{
    build_scenes, from_gray, generate_dataset, interpolate_missing, rotate_flip_augment,
    scene_samples, split, to_gray, AugmentModes, CropConfig, DatasetConfig, DatasetManifest,
    SampleRef, Sampling, Split,
};
use pmnet_core::geo::MapGenParams;
use pmnet_core::propagation::{Generator, RayLaunchConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, FileFailurePersistence};

fn quiet(cases: u32) -> Config {
    Config {
        cases,
        failure_persistence: Some(Box::new(FileFailurePersistence::Off)),
        ..Config::default()
    }
}

fn small_cfg(generator: Generator) -> DatasetConfig {
    DatasetConfig {
        n_maps: 3,
        tx_per_map: 2,
        generator,
        map: MapGenParams {
            size: 64,
            foliage_fraction: 0.05,
            ..Default::default()
        },
        raylaunch: RayLaunchConfig {
            n_rays: 120,
            ..Default::default()
        },
        sampling: Sampling::Crop(CropConfig {
            window: 32,
            stride: 16,
            out_size: 64,
        }),
        augment: AugmentModes {
            rotate: true,
            flip: true,
        },
        ..Default::default()
    }
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn dataset_writes_are_byte_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small_cfg(Generator::RayLaunch), a.path()).unwrap();
    // read every sample back and write it out again
    let back = DatasetManifest::load(a.path()).unwrap();
    back.save(b.path()).unwrap();
    for which in [Split::Train, Split::Val] {
        for s in back.load_samples(a.path(), which).unwrap() {
            s.save(&b.path().join("samples")).unwrap();
        }
    }
    let ta = read_tree(a.path());
    let tb = read_tree(b.path());
    for (k, v) in &tb {
        assert_eq!(ta.get(k), Some(v), "{k} differs after rewrite");
    }
    assert_eq!(
        m.samples.len(),
        tb.keys().filter(|k| k.ends_with("_target.png")).count()
    );
    // and a second generation run is identical
    let c = tempfile::tempdir().unwrap();
    generate_dataset(&small_cfg(Generator::RayLaunch), c.path()).unwrap();
    assert_eq!(read_tree(c.path()), ta);
}

#[test]
fn augmented_samples_keep_invariants() {
    for generator in [Generator::ThreeGpp, Generator::RayLaunch] {
        let cfg = small_cfg(generator);
        for scene in build_scenes(&cfg).unwrap() {
            let samples = scene_samples(&scene, &cfg.sampling, cfg.augment).unwrap();
            assert_eq!(samples.len() % 7, 0);
            for s in &samples {
                s.validate().unwrap();
            }
        }
    }
}

#[test]
fn flip_and_rotation_modes_quadruple_exactly() {
    let cfg = small_cfg(Generator::ThreeGpp);
    let scene = &build_scenes(&cfg).unwrap()[0];
    let base = scene_samples(scene, &cfg.sampling, AugmentModes::default()).unwrap();
    for modes in [
        AugmentModes {
            rotate: true,
            flip: false,
        },
        AugmentModes {
            rotate: false,
            flip: true,
        },
    ] {
        let out = rotate_flip_augment(&base, modes).unwrap();
        assert_eq!(out.len(), 4 * base.len());
        let ids: std::collections::BTreeSet<_> = out.iter().map(|s| &s.meta.sample_id).collect();
        assert_eq!(ids.len(), out.len());
    }
}

#[test]
fn interpolation_never_reads_buildings_or_moves_known_pixels() {
    let cfg = DatasetConfig {
        interpolate: false,
        raylaunch: RayLaunchConfig {
            n_rays: 60,
            max_reflections: 1,
            ..Default::default()
        },
        ..small_cfg(Generator::RayLaunch)
    };
    for scene in build_scenes(&cfg).unwrap() {
        let mut poisoned = scene.grid.clone();
        for (v, &roi) in poisoned.values.iter_mut().zip(&poisoned.roi_mask) {
            if !roi {
                *v = f32::NAN;
            }
        }
        let known: Vec<bool> = poisoned.values.iter().map(|&v| v > -254.0).collect();
        let out = interpolate_missing(&poisoned, &known).unwrap();
        for i in 0..out.values.len() {
            if !out.roi_mask[i] {
                assert!(out.values[i].is_nan());
            } else {
                assert!(out.values[i].is_finite(), "NaN leaked into RoI pixel {i}");
                if known[i] {
                    assert_eq!(out.values[i], scene.grid.values[i]);
                }
            }
        }
    }
}

fn manifest_strategy() -> impl Strategy<Value = DatasetManifest> {
    prop::collection::vec((0usize..40, 1usize..6), 2..60).prop_map(|entries| {
        let mut samples = Vec::new();
        for (k, (map, copies)) in entries.iter().enumerate() {
            for c in 0..*copies {
                samples.push(SampleRef {
                    sample_id: format!("s{k}-{c}"),
                    map_id: format!("map{map}"),
                    scene_id: format!("map{map}-t{k}"),
                });
            }
        }
        DatasetManifest::new(64, samples)
    })
}

proptest! {
    #![proptest_config(quiet(1000))]

    #[test]
    fn splits_are_map_exclusive(m in manifest_strategy(), frac in 0.0f64..=1.0, seed in any::<u64>()) {
        match split(&m, frac, seed) {
            Ok(assign) => {
                prop_assert_eq!(assign.len(), m.map_ids().len());
                let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
                for s in &m.samples {
                    let which = assign[&s.map_id];
                    if let Some(prev) = seen.insert(&s.map_id, which) {
                        prop_assert_eq!(prev, which);
                    }
                }
                prop_assert!(assign.values().any(|&v| v == Split::Train));
                prop_assert!(assign.values().any(|&v| v == Split::Val));
                prop_assert_eq!(&assign, &split(&m, frac, seed).unwrap());
            }
            Err(_) => prop_assert!(m.map_ids().len() < 2),
        }
    }
}

proptest! {
    #![proptest_config(quiet(512))]

    #[test]
    fn gray_is_monotone(a in -300.0f64..20.0, b in -300.0f64..20.0) {
        if a <= b {
            prop_assert!(to_gray(a) <= to_gray(b));
        }
        let g = to_gray(a);
        prop_assert!(g >= 1);
        prop_assert_eq!(to_gray(from_gray(g).unwrap()), g);
    }
}

//! Scene generation and dataset assembly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    crop_augment, grid_to_gray, interpolate_missing, rotate_flip_augment, scene_sample, split,
    AugmentModes, CropConfig, DatasetManifest, GraySample, SampleRef, SAMPLES_DIR, SCENES_DIR,
};
use crate::error::{Error, Result};
use crate::geo::{
    generate_map, load_map, save_map, BuildingMap, MapGenParams, MapMeta, TxLocation,
};
use crate::propagation::{
    generate_grid, Generator, GridMeta, PathlossGrid, PropagationConfig, RayLaunchConfig,
};

/// A map, one TX on it and the generated ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub scene_id: String,
    pub map: BuildingMap,
    pub grid: PathlossGrid,
    pub generator: Generator,
    pub cfg: PropagationConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Sampling {
    /// The whole scene, resampled to `out_size` if it differs.
    Whole { out_size: usize },
    /// TX-anchored windows.
    Crop(CropConfig),
}

impl Sampling {
    pub fn out_size(&self) -> usize {
        match *self {
            Sampling::Whole { out_size } => out_size,
            Sampling::Crop(c) => c.out_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Prefix of every map id; keeps scenario families distinct.
    pub name: String,
    pub seed: u64,
    pub n_maps: usize,
    pub tx_per_map: usize,
    /// Map generator settings; `seed` is replaced per map.
    pub map: MapGenParams,
    pub generator: Generator,
    pub propagation: PropagationConfig,
    pub raylaunch: RayLaunchConfig,
    pub sampling: Sampling,
    pub augment: AugmentModes,
    pub train_fraction: f64,
    /// Fill pixels no ray reached from their neighbours.
    pub interpolate: bool,
    /// TX positions keep this many pixels from the scene border.
    pub tx_margin: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "ds".into(),
            seed: 1,
            n_maps: 10,
            tx_per_map: 5,
            map: MapGenParams::default(),
            generator: Generator::RayLaunch,
            propagation: PropagationConfig::default(),
            raylaunch: RayLaunchConfig::default(),
            sampling: Sampling::Whole { out_size: 128 },
            augment: AugmentModes::default(),
            train_fraction: 0.9,
            interpolate: true,
            tx_margin: 4,
        }
    }
}

struct MapPlan {
    index: usize,
    seed: u64,
}

/// Generates every scene of the configuration. Deterministic in
/// `cfg.seed`; maps are built in parallel.
pub fn build_scenes(cfg: &DatasetConfig) -> Result<Vec<Scene>> {
    if cfg.n_maps == 0 || cfg.tx_per_map == 0 {
        return Err(Error::InvalidArgument(
            "n_maps and tx_per_map must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plans: Vec<MapPlan> = (0..cfg.n_maps)
        .map(|index| MapPlan {
            index,
            seed: rng.gen(),
        })
        .collect();
    let per_map: Vec<Vec<Scene>> = plans
        .par_iter()
        .map(|plan| map_scenes(cfg, plan))
        .collect::<Result<_>>()?;
    Ok(per_map.into_iter().flatten().collect())
}

fn map_scenes(cfg: &DatasetConfig, plan: &MapPlan) -> Result<Vec<Scene>> {
    let params = MapGenParams {
        seed: plan.seed,
        ..cfg.map.clone()
    };
    let map = generate_map(&params)?.with_map_id(format!("{}-m{:04}", cfg.name, plan.index));
    let n = map.size();
    let m = cfg.tx_margin.min(n / 2 - 1);
    let mut candidates: Vec<_> = map
        .free_cells()
        .filter(|p| p.x >= m && p.y >= m && p.x < n - m && p.y < n - m)
        .collect();
    if candidates.len() < cfg.tx_per_map {
        return Err(Error::Domain(format!(
            "map {} has {} TX candidates, need {}",
            map.map_id(),
            candidates.len(),
            cfg.tx_per_map
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5eed_7a11);
    let (picked, _) = candidates.partial_shuffle(&mut rng, cfg.tx_per_map);
    picked
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let tx = TxLocation::new(&map, p.x, p.y, cfg.propagation.h_bs)?;
            let mut grid =
                generate_grid(cfg.generator, &map, &tx, &cfg.propagation, &cfg.raylaunch)?;
            if cfg.interpolate && cfg.generator == Generator::RayLaunch {
                let floor = cfg.raylaunch.floor_dbm as f32;
                let known: Vec<bool> = grid.values.iter().map(|&v| v > floor).collect();
                grid = interpolate_missing(&grid, &known)?;
            }
            Ok(Scene {
                scene_id: format!("{}-t{k}", map.map_id()),
                map: map.clone(),
                grid,
                generator: cfg.generator,
                cfg: cfg.propagation,
            })
        })
        .collect()
}

/// Samples of one scene under the configured sampling and augmentation.
pub fn scene_samples(
    scene: &Scene,
    sampling: &Sampling,
    augment: AugmentModes,
) -> Result<Vec<GraySample>> {
    let base = match sampling {
        Sampling::Whole { out_size } => vec![scene_sample(scene, *out_size)?],
        Sampling::Crop(c) => crop_augment(scene, c)?,
    };
    rotate_flip_augment(&base, augment)
}

/// A dataset held in memory, split by map.
#[derive(Debug, Clone)]
pub struct MemoryDataset {
    pub scenes: Vec<Scene>,
    pub train: Vec<GraySample>,
    pub val: Vec<GraySample>,
}

/// [`generate_dataset`] without the disk: same scenes, samples and split.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<MemoryDataset> {
    let scenes = build_scenes(cfg)?;
    let mut samples = Vec::new();
    for scene in &scenes {
        samples.extend(scene_samples(scene, &cfg.sampling, cfg.augment)?);
    }
    let refs = samples
        .iter()
        .map(|s| SampleRef {
            sample_id: s.meta.sample_id.clone(),
            map_id: s.meta.map_id.clone(),
            scene_id: s.meta.scene_id.clone(),
        })
        .collect();
    let manifest = DatasetManifest::new(cfg.sampling.out_size(), refs);
    let assignment = split(&manifest, cfg.train_fraction, cfg.seed)?;
    let (train, val) = samples
        .into_iter()
        .partition(|s| assignment.get(&s.meta.map_id) == Some(&super::Split::Train));
    Ok(MemoryDataset { scenes, train, val })
}

/// Builds scenes and samples and writes the dataset under `root`.
pub fn generate_dataset(cfg: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    write_dataset(cfg, &build_scenes(cfg)?, root)
}

/// Writes `scenes` and their samples (under `cfg.sampling` and
/// `cfg.augment`) plus the manifest below `root`.
pub fn write_dataset(
    cfg: &DatasetConfig,
    scenes: &[Scene],
    root: &Path,
) -> Result<DatasetManifest> {
    let samples_dir = root.join(SAMPLES_DIR);
    let scenes_dir = root.join(SCENES_DIR);

    let mut refs = Vec::new();
    let mut last_map = String::new();
    for scene in scenes {
        let map_id = scene.map.map_id();
        if map_id != last_map {
            let meta = MapMeta {
                map_id: map_id.to_string(),
                meters_per_pixel: scene.map.meters_per_pixel(),
                seed: None,
                generator_params: Some(cfg.map.clone()),
            };
            save_map(&scene.map, &meta, &scenes_dir, &format!("{map_id}_map"))?;
            last_map = map_id.to_string();
        }
        let grid_meta = GridMeta {
            map_id: map_id.to_string(),
            size: scene.grid.size,
            tx: scene.grid.tx,
            cfg: scene.cfg,
            generator: scene.generator,
            raylaunch: (scene.generator == Generator::RayLaunch).then_some(cfg.raylaunch),
        };
        scene.grid.save(&scenes_dir, &scene.scene_id, &grid_meta)?;
        grid_to_gray(&scene.grid).save(&scenes_dir.join(format!("{}_gray.png", scene.scene_id)))?;

        for s in scene_samples(scene, &cfg.sampling, cfg.augment)? {
            s.save(&samples_dir)?;
            refs.push(SampleRef {
                sample_id: s.meta.sample_id.clone(),
                map_id: s.meta.map_id.clone(),
                scene_id: s.meta.scene_id.clone(),
            });
        }
    }
    let mut manifest = DatasetManifest::new(cfg.sampling.out_size(), refs);
    manifest.split = split(&manifest, cfg.train_fraction, cfg.seed)?;
    manifest.config = Some(cfg.clone());
    manifest.save(root)?;
    Ok(manifest)
}

/// Reads back every scene written by [`write_dataset`], in scene-id order.
pub fn load_scenes(root: &Path) -> Result<Vec<Scene>> {
    let dir = root.join(SCENES_DIR);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "f32") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    let mut maps: BTreeMap<String, BuildingMap> = BTreeMap::new();
    stems
        .into_iter()
        .map(|stem| {
            let (grid, meta) = PathlossGrid::load(&dir, &stem)?;
            let map = match maps.get(&meta.map_id) {
                Some(m) => m.clone(),
                None => {
                    let (m, _) = load_map(&dir, &format!("{}_map", meta.map_id))?;
                    maps.insert(meta.map_id.clone(), m.clone());
                    m
                }
            };
            Ok(Scene {
                scene_id: stem,
                map,
                grid,
                generator: meta.generator,
                cfg: meta.cfg,
            })
        })
        .collect()
}

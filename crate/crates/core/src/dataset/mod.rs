//! Training samples: gray conversion, infill, augmentation, splits and the
//! on-disk format.
//!
//! A dataset root looks like
//!
//! ```text
//! manifest.json
//! scenes/<scene_id>_map.png  <scene_id>_map.json
//!        <scene_id>.f32  <scene_id>_roi.png  <scene_id>.json  <scene_id>_gray.png
//! samples/<sample_id>_map.png  _tx.png  _target.png  .json
//! ```

mod augment;
mod interp;
mod pipeline;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::{Generator, PathlossGrid, FLOOR_DBM};
use crate::raster::{self, GrayImage};

pub use augment::{
    crop_augment, rotate_flip_augment, scene_sample, window_sample, AugmentModes, CropConfig,
};
pub use interp::interpolate_missing;
pub use pipeline::{
    build_dataset, build_scenes, generate_dataset, load_scenes, scene_samples, write_dataset,
    DatasetConfig, MemoryDataset, Sampling, Scene,
};

/// Upper end of the gray mapping (0 dBm).
pub const MAX_DBM: f64 = 0.0;

/// `round(p + 255)` clamped to `[1, 255]`; 1 dBm per gray step. Gray 0 is
/// reserved for buildings and assigned by callers.
pub fn to_gray(p_rx_dbm: f64) -> u8 {
    if p_rx_dbm.is_nan() {
        return 1;
    }
    (p_rx_dbm + 255.0).round().clamp(1.0, 255.0) as u8
}

/// Inverse of [`to_gray`] on its range.
pub fn from_gray(gray: u8) -> Result<f64> {
    if gray == 0 {
        return Err(Error::Domain("gray 0 marks a building, not a power".into()));
    }
    Ok(gray as f64 - 255.0)
}

/// Gray rendering of a grid: RoI pixels through [`to_gray`], buildings 0.
pub fn grid_to_gray(grid: &PathlossGrid) -> GrayImage {
    GrayImage {
        width: grid.size,
        height: grid.size,
        pixels: grid
            .values
            .iter()
            .zip(&grid.roi_mask)
            .map(|(&v, &roi)| if roi { to_gray(v as f64) } else { 0 })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub scene_id: String,
    pub map_id: String,
    /// Window index within the scene; `None` for whole-scene samples.
    pub crop_index: Option<usize>,
    /// Applied augmentation, `"id"` for none.
    pub aug_tag: String,
    /// TX pixel in sample coordinates (x, y).
    pub tx: [usize; 2],
    pub meters_per_pixel: f64,
    pub generator: Generator,
    pub fc_ghz: f64,
}

/// One network input/target triple. All channels are square and the same
/// size.
#[derive(Debug, Clone, PartialEq)]
pub struct GraySample {
    /// FREE 255, FOLIAGE 128, BUILDING 0.
    pub map_channel: GrayImage,
    /// 255 at the TX pixel, 0 elsewhere.
    pub tx_channel: GrayImage,
    /// Gray pathloss map, 0 on buildings.
    pub target: GrayImage,
    pub meta: SampleMeta,
}

impl GraySample {
    pub fn size(&self) -> usize {
        self.map_channel.width
    }

    /// Checks the per-sample invariants: equal square shapes, exactly one
    /// TX pixel at `meta.tx`, and target zero exactly on building pixels.
    pub fn validate(&self) -> Result<()> {
        let n = self.map_channel.width;
        for img in [&self.map_channel, &self.tx_channel, &self.target] {
            if img.width != n || img.height != n {
                return Err(Error::Shape(format!(
                    "sample {} channels are not all {n}x{n}",
                    self.meta.sample_id
                )));
            }
        }
        let tx_count = self.tx_channel.pixels.iter().filter(|&&p| p != 0).count();
        let [tx, ty] = self.meta.tx;
        if tx_count != 1 || tx >= n || ty >= n || self.tx_channel.get(tx, ty) != 255 {
            return Err(Error::Domain(format!(
                "sample {}: expected one TX pixel at {:?}, found {tx_count}",
                self.meta.sample_id, self.meta.tx
            )));
        }
        let aligned = self
            .map_channel
            .pixels
            .iter()
            .zip(&self.target.pixels)
            .all(|(&m, &t)| (m == 0) == (t == 0));
        if !aligned {
            return Err(Error::Domain(format!(
                "sample {}: target zeros do not match buildings",
                self.meta.sample_id
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let id = &self.meta.sample_id;
        self.map_channel.save(&dir.join(format!("{id}_map.png")))?;
        self.tx_channel.save(&dir.join(format!("{id}_tx.png")))?;
        self.target.save(&dir.join(format!("{id}_target.png")))?;
        raster::write_json(&dir.join(format!("{id}.json")), &self.meta)
    }

    pub fn load(dir: &Path, sample_id: &str) -> Result<Self> {
        let meta: SampleMeta = raster::read_json(&dir.join(format!("{sample_id}.json")))?;
        let s = Self {
            map_channel: GrayImage::load(&dir.join(format!("{sample_id}_map.png")))?,
            tx_channel: GrayImage::load(&dir.join(format!("{sample_id}_tx.png")))?,
            target: GrayImage::load(&dir.join(format!("{sample_id}_target.png")))?,
            meta,
        };
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min_dbm: f64,
    pub max_dbm: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            min_dbm: FLOOR_DBM,
            max_dbm: MAX_DBM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub sample_id: String,
    pub map_id: String,
    pub scene_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sample_size: usize,
    pub normalization: Normalization,
    pub samples: Vec<SampleRef>,
    pub split: BTreeMap<String, Split>,
    /// Generation settings, kept so the dataset can be rebuilt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<DatasetConfig>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_DIR: &str = "samples";
pub const SCENES_DIR: &str = "scenes";

impl DatasetManifest {
    pub fn new(sample_size: usize, samples: Vec<SampleRef>) -> Self {
        Self {
            sample_size,
            normalization: Normalization::default(),
            samples,
            split: BTreeMap::new(),
            config: None,
        }
    }

    pub fn map_ids(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.map_id.as_str()).collect()
    }

    /// Samples assigned to `which`. Samples whose map has no assignment are
    /// left out.
    pub fn samples_in(&self, which: Split) -> impl Iterator<Item = &SampleRef> {
        self.samples
            .iter()
            .filter(move |s| self.split.get(&s.map_id) == Some(&which))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        raster::write_json(&root.join(MANIFEST_FILE), self)
    }

    pub fn load(root: &Path) -> Result<Self> {
        raster::read_json(&root.join(MANIFEST_FILE))
    }

    pub fn load_samples(&self, root: &Path, which: Split) -> Result<Vec<GraySample>> {
        let dir = root.join(SAMPLES_DIR);
        self.samples_in(which)
            .map(|r| GraySample::load(&dir, &r.sample_id))
            .collect()
    }
}

/// Map-exclusive random split. Distinct map ids are sorted, shuffled with
/// `seed`, and the first `round(train_fraction * n_maps)` (at least one,
/// at most `n_maps - 1`) go to training.
pub fn split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<BTreeMap<String, Split>> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must be in [0, 1], got {train_fraction}"
        )));
    }
    let mut maps: Vec<&str> = manifest.map_ids().into_iter().collect();
    if maps.len() < 2 {
        return Err(Error::Domain(format!(
            "need at least 2 distinct maps to split, found {}",
            maps.len()
        )));
    }
    maps.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = maps.len();
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    Ok(maps
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            (
                m.to_string(),
                if i < n_train {
                    Split::Train
                } else {
                    Split::Val
                },
            )
        })
        .collect())
}

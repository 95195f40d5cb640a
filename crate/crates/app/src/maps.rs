//! Maps known to the service: the building maps of a dataset root.

use std::collections::BTreeMap;
use std::path::Path;

use base64::Engine;
use pmnet_core::dataset::{DatasetManifest, SCENES_DIR};
use pmnet_core::geo::{load_map, BuildingMap};
use pmnet_core::propagation::PropagationConfig;
use pmnet_core::raster::GrayImage;
use serde::Serialize;

const THUMBNAIL_SIZE: usize = 64;

#[derive(Debug, Clone)]
pub struct StoredMap {
    pub map: BuildingMap,
    /// Radio settings the dataset was generated with.
    pub cfg: PropagationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapInfo {
    pub map_id: String,
    pub size: usize,
    pub meters_per_pixel: f64,
    /// PNG, base64.
    pub thumbnail_png: String,
}

#[derive(Debug, Clone, Default)]
pub struct MapStore {
    maps: BTreeMap<String, StoredMap>,
}

impl MapStore {
    /// Every `scenes/<map_id>_map.json` below a dataset root.
    pub fn load(root: &Path) -> pmnet_core::Result<Self> {
        let cfg = DatasetManifest::load(root)
            .ok()
            .and_then(|m| m.config)
            .map(|c| c.propagation)
            .unwrap_or_default();
        let dir = root.join(SCENES_DIR);
        let mut store = Self::default();
        let entries = std::fs::read_dir(&dir).map_err(|e| pmnet_core::Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| pmnet_core::Error::io(&dir, e))?.path();
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if path.extension().is_some_and(|e| e == "json") && stem.ends_with("_map") {
                let (map, meta) = load_map(&dir, stem)?;
                store.maps.insert(meta.map_id, StoredMap { map, cfg });
            }
        }
        Ok(store)
    }

    pub fn insert(&mut self, map: BuildingMap, cfg: PropagationConfig) {
        self.maps
            .insert(map.map_id().to_string(), StoredMap { map, cfg });
    }

    pub fn get(&self, map_id: &str) -> Option<&StoredMap> {
        self.maps.get(map_id)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn list(&self) -> pmnet_core::Result<Vec<MapInfo>> {
        self.maps
            .values()
            .map(|m| {
                Ok(MapInfo {
                    map_id: m.map.map_id().to_string(),
                    size: m.map.size(),
                    meters_per_pixel: m.map.meters_per_pixel(),
                    thumbnail_png: base64::engine::general_purpose::STANDARD
                        .encode(thumbnail(&m.map).to_png()?),
                })
            })
            .collect()
    }
}

/// Nearest-neighbour reduction of the obstacle image to at most 64 px.
pub fn thumbnail(map: &BuildingMap) -> GrayImage {
    let img = map.to_image();
    let n = img.width;
    let t = n.min(THUMBNAIL_SIZE);
    let mut out = GrayImage::filled(t, t, 0);
    for y in 0..t {
        for x in 0..t {
            out.set(x, y, img.get(x * n / t, y * n / t));
        }
    }
    out
}

//! Ground-truth generators: the 3GPP UMi street-canyon model with LoS taken
//! from the map, and a 2D ray launcher with specular reflections.
//!
//! Both produce a [`PathlossGrid`] of received power in dBm. With the default
//! `p_tx_dbm = 0` the values are path gains in dB.

mod raylaunch;
mod umi;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{BuildingMap, ObstacleClass, TxLocation, DEFAULT_H_BS, DEFAULT_H_UT};
use crate::raster::{self, GrayImage};

pub use raylaunch::{collected_power_mw, ray_launch, RayLaunchConfig};
pub use umi::{breakpoint_distance, pathloss_map_3gpp, pathloss_umi, UmiPathloss, NEAR_FIELD_M};

/// Speed of light used by the breakpoint distance and wavelength (m/s).
pub const SPEED_OF_LIGHT: f64 = 3.0e8;
/// Lowest representable received power; matches the gray-scale minimum.
pub const FLOOR_DBM: f64 = -254.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub fc_ghz: f64,
    pub h_bs: f64,
    pub h_ut: f64,
    pub p_tx_dbm: f64,
    pub c: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            fc_ghz: 3.0,
            h_bs: DEFAULT_H_BS,
            h_ut: DEFAULT_H_UT,
            p_tx_dbm: 0.0,
            c: SPEED_OF_LIGHT,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=100.0).contains(&self.fc_ghz) {
            return Err(Error::InvalidArgument(format!(
                "fc_ghz {} outside the 0.5-100 GHz validity range",
                self.fc_ghz
            )));
        }
        if !(self.h_bs > 0.0 && self.h_ut > 0.0 && self.c > 0.0) {
            return Err(Error::InvalidArgument(
                "antenna heights and c must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn wavelength_m(&self) -> f64 {
        self.c / (self.fc_ghz * 1e9)
    }
}

/// Log-distance model `10 alpha log10(d) + beta`. The shadowing spread is
/// carried for completeness and never sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaBetaParams {
    pub alpha: f64,
    pub beta: f64,
    pub sigma_s: f64,
}

impl AlphaBetaParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            sigma_s: 0.0,
        }
    }

    /// Free-space loss as an alpha-beta model: alpha = 2 and beta the
    /// Friis loss at 1 m.
    pub fn free_space(cfg: &PropagationConfig) -> Self {
        let beta = 20.0 * (4.0 * std::f64::consts::PI / cfg.wavelength_m()).log10();
        Self::new(2.0, beta)
    }
}

/// Pathloss (dB) of the alpha-beta model at distance `d` (m).
pub fn pl_alpha_beta(d: f64, p: &AlphaBetaParams) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("distance must be positive, got {d}")));
    }
    if p.sigma_s < 0.0 {
        return Err(Error::InvalidArgument("sigma_s must be >= 0".into()));
    }
    Ok(10.0 * p.alpha * d.log10() + p.beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    #[serde(rename = "3gpp")]
    ThreeGpp,
    #[serde(rename = "raylaunch")]
    RayLaunch,
}

impl Generator {
    pub fn as_str(self) -> &'static str {
        match self {
            Generator::ThreeGpp => "3gpp",
            Generator::RayLaunch => "raylaunch",
        }
    }
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3gpp" => Ok(Generator::ThreeGpp),
            "raylaunch" => Ok(Generator::RayLaunch),
            other => Err(Error::InvalidArgument(format!(
                "unknown generator {other:?}"
            ))),
        }
    }
}

/// Per-pixel received power (dBm) over a square scene. `roi_mask` is false
/// exactly on BUILDING cells; values there are meaningless and kept at the
/// floor.
#[derive(Debug, Clone, PartialEq)]
pub struct PathlossGrid {
    pub size: usize,
    pub values: Vec<f32>,
    pub roi_mask: Vec<bool>,
    pub map_id: String,
    pub tx: TxLocation,
}

impl PathlossGrid {
    pub(crate) fn empty(map: &BuildingMap, tx: &TxLocation) -> Self {
        let n = map.size();
        Self {
            size: n,
            values: vec![FLOOR_DBM as f32; n * n],
            roi_mask: map
                .cells()
                .iter()
                .map(|&c| c != ObstacleClass::Building)
                .collect(),
            map_id: map.map_id().to_string(),
            tx: *tx,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.size + x]
    }

    #[inline]
    pub fn in_roi(&self, x: usize, y: usize) -> bool {
        self.roi_mask[y * self.size + x]
    }

    /// Writes `<stem>.f32` (little-endian float grid), `<stem>_roi.png`
    /// (255 = RoI) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str, meta: &GridMeta) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        raster::write_bytes(&dir.join(format!("{stem}.f32")), &bytes)?;
        let mask = GrayImage {
            width: self.size,
            height: self.size,
            pixels: self
                .roi_mask
                .iter()
                .map(|&m| if m { 255 } else { 0 })
                .collect(),
        };
        mask.save(&dir.join(format!("{stem}_roi.png")))?;
        raster::write_json(&dir.join(format!("{stem}.json")), meta)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<(Self, GridMeta)> {
        let meta: GridMeta = raster::read_json(&dir.join(format!("{stem}.json")))?;
        let path = dir.join(format!("{stem}.f32"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let n = meta.size;
        if bytes.len() != n * n * 4 {
            return Err(Error::format(
                &path,
                format!("expected {} bytes", n * n * 4),
            ));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mask = GrayImage::load(&dir.join(format!("{stem}_roi.png")))?;
        if mask.width != n || mask.height != n {
            return Err(Error::format(&path, "RoI mask size differs from grid"));
        }
        let grid = Self {
            size: n,
            values,
            roi_mask: mask.pixels.iter().map(|&g| g > 0).collect(),
            map_id: meta.map_id.clone(),
            tx: meta.tx,
        };
        Ok((grid, meta))
    }
}

/// JSON metadata stored with a [`PathlossGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub map_id: String,
    pub size: usize,
    pub tx: TxLocation,
    pub cfg: PropagationConfig,
    pub generator: Generator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raylaunch: Option<RayLaunchConfig>,
}

/// Runs the selected generator.
pub fn generate_grid(
    generator: Generator,
    map: &BuildingMap,
    tx: &TxLocation,
    cfg: &PropagationConfig,
    rl: &RayLaunchConfig,
) -> Result<PathlossGrid> {
    match generator {
        Generator::ThreeGpp => pathloss_map_3gpp(map, tx, cfg),
        Generator::RayLaunch => ray_launch(map, tx, cfg, rl),
    }
}

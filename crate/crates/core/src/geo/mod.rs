//! Rasterized scenes: obstacle grids, transmitter placement, line of sight
//! and link distances.

mod generate;
mod los;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, GrayImage};

pub use generate::{generate_map, MapGenParams};
pub use los::{line_of_sight, supercover};

/// Default TX antenna height (m).
pub const DEFAULT_H_BS: f64 = 10.0;
/// Default RX antenna height (m).
pub const DEFAULT_H_UT: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObstacleClass {
    Free,
    Building,
    Foliage,
}

impl ObstacleClass {
    /// Gray level used in map images and in the model's map channel.
    pub fn gray(self) -> u8 {
        match self {
            ObstacleClass::Free => 255,
            ObstacleClass::Building => 0,
            ObstacleClass::Foliage => 128,
        }
    }

    /// Inverse of [`ObstacleClass::gray`], tolerant of resampled values.
    pub fn from_gray(g: u8) -> Self {
        match g {
            0..=63 => ObstacleClass::Building,
            64..=191 => ObstacleClass::Foliage,
            _ => ObstacleClass::Free,
        }
    }
}

/// Integer pixel coordinate; `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub x: usize,
    pub y: usize,
}

impl Pixel {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Pixel) -> f64 {
        let dx = self.x as f64 - other.x as f64;
        let dy = self.y as f64 - other.y as f64;
        dx.hypot(dy)
    }
}

/// Square obstacle grid with a physical pixel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildingMap {
    map_id: String,
    size: usize,
    meters_per_pixel: f64,
    cells: Vec<ObstacleClass>,
}

impl BuildingMap {
    pub fn new(
        map_id: impl Into<String>,
        size: usize,
        meters_per_pixel: f64,
        cells: Vec<ObstacleClass>,
    ) -> Result<Self> {
        if size == 0 || cells.len() != size * size {
            return Err(Error::Shape(format!(
                "{} cells for a {size}x{size} map",
                cells.len()
            )));
        }
        if !(meters_per_pixel > 0.0 && meters_per_pixel.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "meters_per_pixel must be positive, got {meters_per_pixel}"
            )));
        }
        if !cells.contains(&ObstacleClass::Free) {
            return Err(Error::Domain("map has no FREE cell".into()));
        }
        Ok(Self {
            map_id: map_id.into(),
            size,
            meters_per_pixel,
            cells,
        })
    }

    pub fn all_free(map_id: impl Into<String>, size: usize, meters_per_pixel: f64) -> Result<Self> {
        Self::new(
            map_id,
            size,
            meters_per_pixel,
            vec![ObstacleClass::Free; size * size],
        )
    }

    pub fn map_id(&self) -> &str {
        &self.map_id
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn width(&self) -> usize {
        self.size
    }

    pub fn height(&self) -> usize {
        self.size
    }

    pub fn meters_per_pixel(&self) -> f64 {
        self.meters_per_pixel
    }

    pub fn cells(&self) -> &[ObstacleClass] {
        &self.cells
    }

    #[inline]
    pub fn in_bounds(&self, p: Pixel) -> bool {
        p.x < self.size && p.y < self.size
    }

    #[inline]
    pub fn get(&self, p: Pixel) -> ObstacleClass {
        self.cells[p.y * self.size + p.x]
    }

    #[inline]
    pub fn is_building(&self, p: Pixel) -> bool {
        self.get(p) == ObstacleClass::Building
    }

    /// Overwrites one cell. Refuses to remove the last FREE cell.
    pub fn set(&mut self, p: Pixel, class: ObstacleClass) -> Result<()> {
        if !self.in_bounds(p) {
            return Err(Error::InvalidArgument(format!("{p:?} out of bounds")));
        }
        let i = p.y * self.size + p.x;
        let old = self.cells[i];
        self.cells[i] = class;
        if old == ObstacleClass::Free && !self.cells.contains(&ObstacleClass::Free) {
            self.cells[i] = old;
            return Err(Error::Domain("map would have no FREE cell".into()));
        }
        Ok(())
    }

    pub fn fraction(&self, class: ObstacleClass) -> f64 {
        self.cells.iter().filter(|&&c| c == class).count() as f64 / self.cells.len() as f64
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Pixel> + '_ {
        let n = self.size;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == ObstacleClass::Free)
            .map(move |(i, _)| Pixel::new(i % n, i / n))
    }

    pub fn with_map_id(mut self, map_id: impl Into<String>) -> Self {
        self.map_id = map_id.into();
        self
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            width: self.size,
            height: self.size,
            pixels: self.cells.iter().map(|c| c.gray()).collect(),
        }
    }

    pub fn from_image(
        map_id: impl Into<String>,
        img: &GrayImage,
        meters_per_pixel: f64,
    ) -> Result<Self> {
        if img.width != img.height {
            return Err(Error::Shape(format!(
                "map image must be square, got {}x{}",
                img.width, img.height
            )));
        }
        let cells = img
            .pixels
            .iter()
            .map(|&g| ObstacleClass::from_gray(g))
            .collect();
        Self::new(map_id, img.width, meters_per_pixel, cells)
    }
}

/// Sidecar metadata stored next to a map PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub map_id: String,
    pub meters_per_pixel: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub generator_params: Option<MapGenParams>,
}

/// Writes `<stem>.png` and `<stem>.json`.
pub fn save_map(map: &BuildingMap, meta: &MapMeta, dir: &Path, stem: &str) -> Result<()> {
    map.to_image().save(&dir.join(format!("{stem}.png")))?;
    raster::write_json(&dir.join(format!("{stem}.json")), meta)
}

pub fn load_map(dir: &Path, stem: &str) -> Result<(BuildingMap, MapMeta)> {
    let meta: MapMeta = raster::read_json(&dir.join(format!("{stem}.json")))?;
    let img = GrayImage::load(&dir.join(format!("{stem}.png")))?;
    let map = BuildingMap::from_image(meta.map_id.clone(), &img, meta.meters_per_pixel)?;
    Ok((map, meta))
}

/// Transmitter position and antenna height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TxLocation {
    pub x: usize,
    pub y: usize,
    pub h_bs: f64,
}

impl TxLocation {
    /// Validates that the TX sits on a FREE cell of `map`.
    pub fn new(map: &BuildingMap, x: usize, y: usize, h_bs: f64) -> Result<Self> {
        let p = Pixel::new(x, y);
        if !map.in_bounds(p) {
            return Err(Error::InvalidArgument(format!(
                "tx ({x}, {y}) outside {0}x{0} map",
                map.size()
            )));
        }
        if map.get(p) != ObstacleClass::Free {
            return Err(Error::InvalidArgument(format!(
                "tx ({x}, {y}) is on a {:?} cell",
                map.get(p)
            )));
        }
        if !(h_bs.is_finite() && h_bs >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid h_bs {h_bs}")));
        }
        Ok(Self { x, y, h_bs })
    }

    pub fn pixel(&self) -> Pixel {
        Pixel::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkGeometry {
    pub d_2d: f64,
    pub d_3d: f64,
    pub los: bool,
}

/// Horizontal and slant distance from `tx` to `rx` plus the LoS flag.
pub fn link_geometry(map: &BuildingMap, tx: &TxLocation, rx: Pixel, h_ut: f64) -> LinkGeometry {
    let d_2d = tx.pixel().distance(rx) * map.meters_per_pixel();
    let dh = tx.h_bs - h_ut;
    LinkGeometry {
        d_2d,
        d_3d: (d_2d * d_2d + dh * dh).sqrt(),
        los: line_of_sight(map, tx.pixel(), rx),
    }
}

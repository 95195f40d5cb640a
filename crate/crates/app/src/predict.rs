//! The prediction path shared by `pmnet predict` and `POST /predict`.

use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use pmnet_core::dataset::MAX_DBM;
use pmnet_core::eval::{normalized_to_gray, predict_normalized};
use pmnet_core::geo::{BuildingMap, ObstacleClass, Pixel, TxLocation};
use pmnet_core::propagation::{PropagationConfig, FLOOR_DBM};
use pmnet_core::raster::GrayImage;
use serde::{Deserialize, Serialize};

use crate::maps::MapStore;
use crate::registry::Registry;

/// Largest inline map side.
pub const MAX_INLINE_SIZE: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum PredictError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error(transparent)]
    Core(#[from] pmnet_core::Error),
}

/// A custom map sent with the request: the obstacle image (FREE 255,
/// FOLIAGE 128, BUILDING 0) as a base64 PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlineMap {
    pub png: String,
    #[serde(default = "one")]
    pub meters_per_pixel: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub model_id: String,
    #[serde(default)]
    pub map_id: Option<String>,
    #[serde(default)]
    pub map: Option<InlineMap>,
    /// TX pixel (x, y).
    pub tx: [usize; 2],
}

/// How to read the returned grays: `dBm = gray * dbm_per_gray + offset_dbm`
/// for gray >= 1; gray 0 marks buildings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub dbm_per_gray: f64,
    pub offset_dbm: f64,
    pub building_gray: u8,
    pub floor_dbm: f64,
    pub max_dbm: f64,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            dbm_per_gray: 1.0,
            offset_dbm: -255.0,
            building_gray: 0,
            floor_dbm: FLOOR_DBM,
            max_dbm: MAX_DBM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub model_id: String,
    pub map_id: Option<String>,
    pub size: usize,
    pub tx: [usize; 2],
    /// Gray pathloss map, PNG, base64.
    pub pathloss_png: String,
    /// 255 on RoI (non-building) pixels, PNG, base64.
    pub roi_mask_png: String,
    pub latency_ms: f64,
    pub units: Units,
}

/// A finished prediction; `png` is exactly what the CLI writes to disk.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub gray: GrayImage,
    pub png: Vec<u8>,
    pub roi_png: Vec<u8>,
    pub latency_ms: f64,
}

impl Prediction {
    pub fn into_response(self, req: &PredictRequest) -> PredictResponse {
        PredictResponse {
            model_id: req.model_id.clone(),
            map_id: req.map_id.clone(),
            size: self.gray.width,
            tx: req.tx,
            pathloss_png: B64.encode(&self.png),
            roi_mask_png: B64.encode(&self.roi_png),
            latency_ms: self.latency_ms,
            units: Units::default(),
        }
    }
}

pub fn decode_inline(m: &InlineMap) -> Result<BuildingMap, PredictError> {
    let bytes = B64
        .decode(m.png.as_bytes())
        .map_err(|e| PredictError::BadRequest(format!("inline map is not base64: {e}")))?;
    let img = GrayImage::from_png(&bytes)
        .map_err(|e| PredictError::BadRequest(format!("inline map: {e}")))?;
    if img.width != img.height || img.width > MAX_INLINE_SIZE {
        return Err(PredictError::BadRequest(format!(
            "inline maps must be square and at most {MAX_INLINE_SIZE} px, got {}x{}",
            img.width, img.height
        )));
    }
    BuildingMap::from_image("inline", &img, m.meters_per_pixel)
        .map_err(|e| PredictError::BadRequest(format!("inline map: {e}")))
}

fn resolve_map(
    maps: &MapStore,
    req: &PredictRequest,
) -> Result<(BuildingMap, PropagationConfig), PredictError> {
    match (&req.map_id, &req.map) {
        (Some(_), Some(_)) => Err(PredictError::BadRequest(
            "give either map_id or map, not both".into(),
        )),
        (None, None) => Err(PredictError::BadRequest(
            "missing map_id or inline map".into(),
        )),
        (Some(id), None) => maps
            .get(id)
            .map(|m| (m.map.clone(), m.cfg))
            .ok_or_else(|| PredictError::NotFound(format!("unknown map {id:?}"))),
        (None, Some(inline)) => Ok((decode_inline(inline)?, PropagationConfig::default())),
    }
}

/// Runs one request against immutable models and maps.
pub fn run_prediction(
    registry: &Registry,
    maps: &MapStore,
    req: &PredictRequest,
) -> Result<Prediction, PredictError> {
    let started = Instant::now();
    let entry = registry
        .get(&req.model_id)
        .ok_or_else(|| PredictError::NotFound(format!("unknown model {:?}", req.model_id)))?;
    let (map, cfg) = resolve_map(maps, req)?;
    let [x, y] = req.tx;
    let p = Pixel { x, y };
    if !map.in_bounds(p) {
        return Err(PredictError::BadRequest(format!(
            "tx {:?} is outside the {}px map",
            req.tx,
            map.size()
        )));
    }
    if map.get(p) != ObstacleClass::Free {
        return Err(PredictError::BadRequest(format!(
            "tx {:?} is not on a free cell",
            req.tx
        )));
    }
    let tx = TxLocation::new(&map, x, y, cfg.h_bs)?;
    let values = predict_normalized(entry.predictor(), &map, &tx, &cfg).map_err(|e| match e {
        pmnet_core::Error::Shape(msg) => PredictError::BadRequest(msg),
        other => PredictError::Core(other),
    })?;
    let gray = normalized_to_gray(&values, map.size())?;
    let roi = GrayImage::new(
        map.size(),
        map.size(),
        map.cells()
            .iter()
            .map(|&c| if c == ObstacleClass::Building { 0 } else { 255 })
            .collect(),
    )?;
    Ok(Prediction {
        png: gray.to_png()?,
        roi_png: roi.to_png()?,
        gray,
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

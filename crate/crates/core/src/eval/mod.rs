//! Metrics, model evaluation, the shared prediction path and rendering.
//!
//! All maps here are normalized: gray level / 255, so 0 marks buildings
//! and one gray step (1 dB) is 1/255.

mod render;

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{grid_to_gray, interpolate_missing, GraySample};
use crate::error::{Error, Result};
use crate::geo::{BuildingMap, TxLocation};
use crate::model::Pmnet;
use crate::nn::Tensor;
use crate::propagation::{generate_grid, Generator, PropagationConfig, RayLaunchConfig};
use crate::raster::GrayImage;

pub use render::{render_difference, render_heatmap, render_side_by_side};

/// A predicted value below this is classified as building (it rounds to
/// gray 0).
pub const BUILDING_THRESHOLD: f64 = 0.5 / 255.0;

fn check_shapes(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn is_building(v: f64) -> bool {
    v < BUILDING_THRESHOLD
}

/// Root mean squared difference over every pixel.
pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_shapes(pred, gt)?;
    let sse: f64 = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Misclassified pixels (either direction) over ground-truth building
/// pixels. With no buildings in `gt` the result is 0 when nothing is
/// misclassified and NaN otherwise.
pub fn roi_segmentation_error(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_shapes(pred, gt)?;
    let wrong = pred
        .iter()
        .zip(gt)
        .filter(|(&p, &g)| is_building(p) != is_building(g))
        .count();
    let buildings = gt.iter().filter(|&&g| is_building(g)).count();
    if buildings == 0 {
        if wrong == 0 {
            return Ok(0.0);
        }
        log::warn!("roi error undefined: ground truth has no building pixels");
        return Ok(f64::NAN);
    }
    Ok(wrong as f64 / buildings as f64)
}

/// Which pixels the channel error is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMask {
    /// RoI in both prediction and ground truth.
    #[default]
    Intersection,
    /// RoI of the ground truth only.
    GroundTruth,
}

/// RMS difference in dB over RoI pixels, after mapping normalized values
/// back to dBm (`255 v - 255`). NaN when the mask is empty.
pub fn channel_prediction_error(pred: &[f64], gt: &[f64], mask: ChannelMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut sse, mut n) = (0.0, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let keep = match mask {
            ChannelMask::Intersection => !is_building(p) && !is_building(g),
            ChannelMask::GroundTruth => !is_building(g),
        };
        if keep {
            let d = 255.0 * (p - g);
            sse += d * d;
            n += 1;
        }
    }
    if n == 0 {
        log::warn!("channel error undefined: empty RoI");
        return Ok(f64::NAN);
    }
    Ok((sse / n as f64).sqrt())
}

/// What produces a prediction.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Pmnet(&'a Pmnet<f32>),
    ThreeGpp,
    /// Ray launching with infill, i.e. how the ground truth is made.
    RayLaunch(&'a RayLaunchConfig),
}

impl Predictor<'_> {
    pub fn generator(&self) -> Option<Generator> {
        match self {
            Predictor::Pmnet(_) => None,
            Predictor::ThreeGpp => Some(Generator::ThreeGpp),
            Predictor::RayLaunch(_) => Some(Generator::RayLaunch),
        }
    }
}

/// Network input for a map and TX: building channel and TX one-hot, both
/// scaled to [0, 1].
pub fn model_input(map_channel: &GrayImage, tx: [usize; 2]) -> Vec<f32> {
    let n = map_channel.width;
    let mut v: Vec<f32> = map_channel
        .pixels
        .iter()
        .map(|&g| g as f32 / 255.0)
        .collect();
    let mut t = vec![0.0f32; n * n];
    t[tx[1] * n + tx[0]] = 1.0;
    v.extend(t);
    v
}

/// Predicts the normalized map for one TX. This is the single prediction
/// path used by evaluation, the CLI and the service.
pub fn predict_normalized(
    predictor: Predictor<'_>,
    map: &BuildingMap,
    tx: &TxLocation,
    cfg: &PropagationConfig,
) -> Result<Vec<f64>> {
    match predictor {
        Predictor::Pmnet(model) => {
            let n = model.config().input_size;
            if map.size() != n {
                return Err(Error::Shape(format!(
                    "model expects {n}x{n} maps, got {}x{}",
                    map.size(),
                    map.size()
                )));
            }
            let x = Tensor::from_vec(1, 2, n, n, model_input(&map.to_image(), [tx.x, tx.y]))?;
            let y = model.predict(&x)?;
            Ok(y.data.iter().map(|&v| v as f64).collect())
        }
        Predictor::ThreeGpp => {
            let grid = generate_grid(
                Generator::ThreeGpp,
                map,
                tx,
                cfg,
                &RayLaunchConfig::default(),
            )?;
            Ok(gray_to_normalized(&grid_to_gray(&grid)))
        }
        Predictor::RayLaunch(rl) => {
            let mut grid = generate_grid(Generator::RayLaunch, map, tx, cfg, rl)?;
            let known: Vec<bool> = grid
                .values
                .iter()
                .map(|&v| v > rl.floor_dbm as f32)
                .collect();
            grid = interpolate_missing(&grid, &known)?;
            Ok(gray_to_normalized(&grid_to_gray(&grid)))
        }
    }
}

/// Rounds a normalized map to gray levels.
pub fn normalized_to_gray(values: &[f64], size: usize) -> Result<GrayImage> {
    GrayImage::new(
        size,
        size,
        values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    )
}

pub fn gray_to_normalized(img: &GrayImage) -> Vec<f64> {
    img.pixels.iter().map(|&g| g as f64 / 255.0).collect()
}

/// The three metrics for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub rmse: f64,
    pub roi_err: f64,
    pub chan_err_db: f64,
}

pub fn sample_metrics(pred: &[f64], gt: &[f64], mask: ChannelMask) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        rmse: rmse(pred, gt)?,
        roi_err: roi_segmentation_error(pred, gt)?,
        chan_err_db: channel_prediction_error(pred, gt, mask)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Latency {
    pub p50: f64,
    pub p95: f64,
}

/// Nearest-rank percentile of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Dataset-level metrics: per-sample values averaged over samples
/// (degenerate NaN samples are skipped and counted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_id: String,
    pub dataset_id: String,
    /// Normalized units.
    pub rmse: f64,
    /// The same RMSE in gray levels (= dB).
    pub rmse_gray: f64,
    pub roi_err: f64,
    pub chan_err_db: f64,
    pub latency_ms: Latency,
    pub n: usize,
    /// Samples whose roi or channel error was undefined.
    #[serde(default)]
    pub n_degenerate: usize,
}

fn nan_mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (mut s, mut n, mut bad) = (0.0, 0usize, 0usize);
    for x in v {
        if x.is_nan() {
            bad += 1;
        } else {
            s += x;
            n += 1;
        }
    }
    (if n == 0 { f64::NAN } else { s / n as f64 }, bad)
}

impl MetricReport {
    pub fn aggregate(
        model_id: &str,
        dataset_id: &str,
        per_sample: &[SampleMetrics],
        latencies_ms: &[f64],
    ) -> Self {
        let (rmse, _) = nan_mean(per_sample.iter().map(|m| m.rmse));
        let (roi_err, bad_roi) = nan_mean(per_sample.iter().map(|m| m.roi_err));
        let (chan_err_db, bad_chan) = nan_mean(per_sample.iter().map(|m| m.chan_err_db));
        Self {
            model_id: model_id.to_string(),
            dataset_id: dataset_id.to_string(),
            rmse,
            rmse_gray: rmse * 255.0,
            roi_err,
            chan_err_db,
            latency_ms: Latency {
                p50: percentile(latencies_ms, 50.0),
                p95: percentile(latencies_ms, 95.0),
            },
            n: per_sample.len(),
            n_degenerate: bad_roi.max(bad_chan),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::raster::write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        crate::raster::read_json(path)
    }
}

/// Writes reports as CSV rows.
pub fn write_reports_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model_id",
        "dataset_id",
        "n",
        "rmse",
        "rmse_gray",
        "roi_err",
        "chan_err_db",
        "latency_p50_ms",
        "latency_p95_ms",
    ])?;
    for r in reports {
        w.write_record([
            r.model_id.clone(),
            r.dataset_id.clone(),
            r.n.to_string(),
            r.rmse.to_string(),
            r.rmse_gray.to_string(),
            r.roi_err.to_string(),
            r.chan_err_db.to_string(),
            r.latency_ms.p50.to_string(),
            r.latency_ms.p95.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The map and TX encoded in a sample.
pub fn sample_scene(s: &GraySample) -> Result<(BuildingMap, TxLocation, PropagationConfig)> {
    let map = BuildingMap::from_image(
        s.meta.map_id.clone(),
        &s.map_channel,
        s.meta.meters_per_pixel,
    )?;
    let cfg = PropagationConfig {
        fc_ghz: s.meta.fc_ghz,
        ..PropagationConfig::default()
    };
    let tx = TxLocation::new(&map, s.meta.tx[0], s.meta.tx[1], cfg.h_bs)?;
    Ok((map, tx, cfg))
}

/// Runs `predictor` on every sample and aggregates the metrics. Per-sample
/// latency covers the prediction only.
pub fn evaluate_model(
    predictor: Predictor<'_>,
    samples: &[GraySample],
    model_id: &str,
    dataset_id: &str,
    mask: ChannelMask,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let results: Vec<(SampleMetrics, f64)> = samples
        .par_iter()
        .map(|s| {
            let (map, tx, cfg) = sample_scene(s)?;
            let t = Instant::now();
            let pred = predict_normalized(predictor, &map, &tx, &cfg)?;
            let ms = t.elapsed().as_secs_f64() * 1e3;
            let gt = gray_to_normalized(&s.target);
            Ok((sample_metrics(&pred, &gt, mask)?, ms))
        })
        .collect::<Result<_>>()?;
    let (metrics, lat): (Vec<SampleMetrics>, Vec<f64>) = results.into_iter().unzip();
    Ok(MetricReport::aggregate(
        model_id, dataset_id, &metrics, &lat,
    ))
}

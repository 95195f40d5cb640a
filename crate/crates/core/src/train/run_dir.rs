//! Run directory: `config.json`, `metrics.csv` (step, split, metric,
//! value), `checkpoints/{best,last}.ckpt`, `report.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainRun};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::model::{save_checkpoint, CheckpointMeta, PmnetConfig};
use crate::raster::write_json;

/// The effective configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: PmnetConfig,
    /// Where the starting weights came from, if anywhere.
    pub pretrained: Option<String>,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Step counts are optimizer steps.
    pub step_unit: String,
    pub steps: usize,
    pub n_train: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub wall_time_s: f64,
    pub steps_to_threshold: Vec<(f64, Option<usize>)>,
    pub report: Option<MetricReport>,
}

#[allow(clippy::too_many_arguments)]
pub fn write_run(
    dir: &Path,
    cfg: &TrainConfig,
    run: &TrainRun,
    pretrained: Option<&str>,
    fraction: f64,
    thresholds: &[f64],
    report: Option<&MetricReport>,
    source: &str,
) -> Result<RunSummary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        &dir.join("config.json"),
        &RunConfig {
            train: cfg.clone(),
            model: run.model.config().clone(),
            pretrained: pretrained.map(str::to_string),
            fraction,
        },
    )?;

    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(["step", "split", "metric", "value"])?;
    for s in &run.step_history {
        w.write_record([
            s.step.to_string(),
            "train".into(),
            "mse".into(),
            s.train_mse.to_string(),
        ])?;
    }
    for p in &run.probes {
        w.write_record([
            p.step.to_string(),
            "val".into(),
            "mse".into(),
            p.val_mse.to_string(),
        ])?;
        w.write_record([
            p.step.to_string(),
            "val".into(),
            "rmse".into(),
            p.val_rmse.to_string(),
        ])?;
    }
    for e in &run.epoch_history {
        w.write_record([
            e.end_step.to_string(),
            "train".into(),
            "lr".into(),
            e.lr.to_string(),
        ])?;
        w.write_record([
            e.end_step.to_string(),
            "val".into(),
            "epoch_mse".into(),
            e.val_mse.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let best = run.epoch_history.get(run.best_epoch);
    save_checkpoint(
        &run.best_model,
        &CheckpointMeta {
            epoch: run.best_epoch,
            step: best.map_or(0, |e| e.end_step),
            val_mse: Some(run.best_val_mse),
            source: source.to_string(),
        },
        &dir.join("checkpoints").join("best.ckpt"),
    )?;
    save_checkpoint(
        &run.model,
        &CheckpointMeta {
            epoch: run.epoch_history.len().saturating_sub(1),
            step: run.steps(),
            val_mse: run.epoch_history.last().map(|e| e.val_mse),
            source: source.to_string(),
        },
        &dir.join("checkpoints").join("last.ckpt"),
    )?;

    let summary = RunSummary {
        step_unit: "optimizer steps".into(),
        steps: run.steps(),
        n_train: run.n_train,
        best_epoch: run.best_epoch,
        best_val_mse: run.best_val_mse,
        wall_time_s: run.wall_time_s,
        steps_to_threshold: run.steps_to_threshold(thresholds),
        report: report.cloned(),
    };
    write_json(&dir.join("report.json"), &summary)?;
    Ok(summary)
}

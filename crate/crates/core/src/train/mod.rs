//! Training loop, fine-tuning and the transfer-learning harness.
//!
//! Step counts are optimizer steps throughout.

mod optim;
mod run_dir;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::GraySample;
use crate::error::{Error, Result};
use crate::eval::model_input;
use crate::model::{Pmnet, PmnetConfig};
use crate::nn::Tensor;

pub use optim::{lr_at_epoch, Adam};
pub use run_dir::{write_run, RunConfig, RunSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_gamma: f64,
    pub lr_step_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Validation RMSE is probed every this many steps (and at step 0).
    pub probe_every: usize,
    /// Fixed number of steps per epoch; by default one pass over the data.
    pub epoch_steps: Option<usize>,
    /// Stop at the first probe whose validation RMSE is at or below this.
    pub stop_at_val_rmse: Option<f64>,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Parameter-name prefixes excluded from updates.
    pub freeze: Vec<String>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 1e-3,
            lr_gamma: 0.5,
            lr_step_epochs: 10,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            probe_every: 20,
            epoch_steps: None,
            stop_at_val_rmse: None,
            max_steps: None,
            freeze: Vec::new(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr_initial > 0.0) || !(self.lr_gamma > 0.0) || self.lr_step_epochs == 0 {
            return Err(Error::InvalidArgument(
                "learning-rate schedule must be positive".into(),
            ));
        }
        if self.probe_every == 0 || self.epoch_steps == Some(0) {
            return Err(Error::InvalidArgument(
                "probe_every and epoch_steps must be positive".into(),
            ));
        }
        if !(5e-4..=1e-3).contains(&self.lr_initial) {
            log::warn!(
                "lr_initial {} is outside the usual [5e-4, 1e-3]",
                self.lr_initial
            );
        }
        Ok(())
    }
}

/// Samples packed as network tensors.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub size: usize,
    inputs: Vec<f32>,
    targets: Vec<f32>,
    pub map_ids: Vec<String>,
}

impl Prepared {
    pub fn new(samples: &[GraySample]) -> Result<Self> {
        let size = samples.first().map(|s| s.size()).unwrap_or(0);
        let mut inputs = Vec::with_capacity(samples.len() * 2 * size * size);
        let mut targets = Vec::with_capacity(samples.len() * size * size);
        for s in samples {
            if s.size() != size {
                return Err(Error::Shape(format!(
                    "sample {} is {}x{}, expected {size}x{size}",
                    s.meta.sample_id,
                    s.size(),
                    s.size()
                )));
            }
            inputs.extend(model_input(&s.map_channel, s.meta.tx));
            targets.extend(s.target.pixels.iter().map(|&g| g as f32 / 255.0));
        }
        Ok(Self {
            size,
            inputs,
            targets,
            map_ids: samples.iter().map(|s| s.meta.map_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.map_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map_ids.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let n = self.size;
        let (xi, ti) = (2 * n * n, n * n);
        let mut x = Vec::with_capacity(idx.len() * xi);
        let mut t = Vec::with_capacity(idx.len() * ti);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * xi..(i + 1) * xi]);
            t.extend_from_slice(&self.targets[i * ti..(i + 1) * ti]);
        }
        (
            Tensor::from_vec(idx.len(), 2, n, n, x).expect("sized above"),
            Tensor::from_vec(idx.len(), 1, n, n, t).expect("sized above"),
        )
    }
}

/// Training and validation data.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Prepared,
    pub val: Prepared,
}

impl TrainData {
    pub fn new(train: &[GraySample], val: &[GraySample]) -> Result<Self> {
        Ok(Self {
            train: Prepared::new(train)?,
            val: Prepared::new(val)?,
        })
    }
}

/// Mean squared error over every element.
pub fn mse_loss(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let s: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| {
            let d = (p - t) as f64;
            d * d
        })
        .sum();
    Ok(s / pred.data.len() as f64)
}

fn mse_grad(pred: &Tensor<f32>, target: &Tensor<f32>) -> Tensor<f32> {
    let k = 2.0 / pred.data.len() as f32;
    let mut g = pred.clone();
    for (v, &t) in g.data.iter_mut().zip(&target.data) {
        *v = k * (*v - t);
    }
    g
}

/// Validation MSE (over all pixels) and mean per-sample RMSE, in
/// inference mode.
pub fn validate(model: &Pmnet<f32>, data: &Prepared, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let (mut sse, mut rmse_sum) = (0.0f64, 0.0f64);
    let idx: Vec<usize> = (0..data.len()).collect();
    let px = data.size * data.size;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, t) = data.batch(chunk);
        let y = model.predict(&x)?;
        for (yp, tp) in y.data.chunks(px).zip(t.data.chunks(px)) {
            let s: f64 = yp
                .iter()
                .zip(tp)
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            sse += s;
            rmse_sum += (s / px as f64).sqrt();
        }
    }
    Ok((sse / (data.len() * px) as f64, rmse_sum / data.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub train_mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub end_step: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_rmse: f64,
}

/// Validation measured at a given optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub step: usize,
    pub val_mse: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub step_history: Vec<StepRecord>,
    pub epoch_history: Vec<EpochRecord>,
    pub probes: Vec<Probe>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub wall_time_s: f64,
    /// Parameters after the last step.
    pub model: Pmnet<f32>,
    /// Snapshot at the epoch with the lowest validation MSE.
    pub best_model: Pmnet<f32>,
    pub n_train: usize,
}

impl TrainRun {
    pub fn steps(&self) -> usize {
        self.step_history.last().map_or(0, |s| s.step)
    }

    pub fn steps_to_threshold(&self, thresholds: &[f64]) -> Vec<(f64, Option<usize>)> {
        steps_to_threshold(&self.probes, thresholds)
    }
}

/// For each threshold, the first probed step whose validation RMSE is at or
/// below it (`None`: never reached).
pub fn steps_to_threshold(probes: &[Probe], thresholds: &[f64]) -> Vec<(f64, Option<usize>)> {
    thresholds
        .iter()
        .map(|&th| (th, probes.iter().find(|p| p.val_rmse <= th).map(|p| p.step)))
        .collect()
}

/// Endless shuffled index stream; reshuffles at every pass.
struct Stream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Stream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains `model` in place and returns the history and snapshots.
pub fn train(model: Pmnet<f32>, data: &TrainData, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs non-empty train and validation sets".into(),
        ));
    }
    let n_model = model.config().input_size;
    if data.train.size != n_model || data.val.size != n_model {
        return Err(Error::Shape(format!(
            "model input is {n_model}px, data is {}px",
            data.train.size
        )));
    }
    let started = Instant::now();
    let mut model = model;
    let mut adam = Adam::new(&model, cfg);
    let mut stream = Stream::new(data.train.len(), cfg.seed);
    let n = data.train.len();
    let bs = cfg.batch_size.min(n);

    let mut step = 0usize;
    let mut step_history = Vec::new();
    let mut epoch_history: Vec<EpochRecord> = Vec::new();
    let mut probes = Vec::new();
    let mut best: Option<(usize, f64, Pmnet<f32>)> = None;

    let probe = |model: &Pmnet<f32>, step: usize, probes: &mut Vec<Probe>| -> Result<bool> {
        let (val_mse, val_rmse) = validate(model, &data.val, cfg.batch_size)?;
        probes.push(Probe {
            step,
            val_mse,
            val_rmse,
        });
        log::debug!("step {step}: val rmse {val_rmse:.5}");
        Ok(cfg.stop_at_val_rmse.is_some_and(|th| val_rmse <= th))
    };
    let mut stop = probe(&model, 0, &mut probes)?;

    for epoch in 0..cfg.epochs {
        if stop {
            break;
        }
        let lr = lr_at_epoch(cfg, epoch);
        let batches: Vec<Vec<usize>> = match cfg.epoch_steps {
            Some(k) => (0..k).map(|_| stream.take(bs)).collect(),
            None => {
                // one pass; the tail batch may be short
                let pass = stream.take(n);
                pass.chunks(bs).map(|c| c.to_vec()).collect()
            }
        };
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for idx in batches {
            let (x, t) = data.train.batch(&idx);
            let (y, cache) = model.forward(&x, true)?;
            let loss = mse_loss(&y, &t)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: step + 1,
                    loss,
                });
            }
            model.zero_grad();
            model.backward(&cache, &mse_grad(&y, &t))?;
            adam.step(&mut model, lr);
            step += 1;
            if model
                .named_params()
                .iter()
                .any(|(_, p)| p.value.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                });
            }
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
            step_history.push(StepRecord {
                step,
                train_mse: loss,
            });
            if step % cfg.probe_every == 0 {
                stop = probe(&model, step, &mut probes)?;
            }
            if stop || cfg.max_steps.is_some_and(|m| step >= m) {
                stop = true;
                break;
            }
        }
        if seen == 0 {
            break;
        }
        let (val_mse, val_rmse) = match probes.last() {
            Some(p) if p.step == step => (p.val_mse, p.val_rmse),
            _ => validate(&model, &data.val, cfg.batch_size)?,
        };
        let rec = EpochRecord {
            epoch,
            lr,
            end_step: step,
            train_mse: loss_sum / seen as f64,
            val_mse,
            val_rmse,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} train mse {:.6} val mse {val_mse:.6} val rmse {val_rmse:.5}",
            rec.train_mse
        );
        epoch_history.push(rec);
        if best.as_ref().map_or(true, |b| val_mse < b.1) {
            best = Some((epoch, val_mse, model.clone()));
        }
    }

    let (best_epoch, best_val_mse, best_model) = match best {
        Some(b) => b,
        None => (0, probes[0].val_mse, model.clone()),
    };
    Ok(TrainRun {
        step_history,
        epoch_history,
        probes,
        best_epoch,
        best_val_mse,
        wall_time_s: started.elapsed().as_secs_f64(),
        model,
        best_model,
        n_train: n,
    })
}

/// Keeps the samples of a seeded random `fraction` of the maps (at least
/// one map). Map-exclusive by construction.
pub fn subsample_maps(samples: &[GraySample], fraction: f64, seed: u64) -> Result<Vec<GraySample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let maps: BTreeSet<&str> = samples.iter().map(|s| s.meta.map_id.as_str()).collect();
    let mut maps: Vec<&str> = maps.into_iter().collect();
    maps.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = ((fraction * maps.len() as f64).round() as usize).clamp(1, maps.len());
    let kept: BTreeSet<&str> = maps[..keep].iter().copied().collect();
    Ok(samples
        .iter()
        .filter(|s| kept.contains(s.meta.map_id.as_str()))
        .cloned()
        .collect())
}

/// Fine-tunes all layers of `pretrained` (or a fresh `model_cfg` network
/// when `None`) on a map-exclusive `fraction` of `train`; validation is
/// untouched.
pub fn finetune(
    pretrained: Option<&Pmnet<f32>>,
    model_cfg: &PmnetConfig,
    train_samples: &[GraySample],
    val_samples: &[GraySample],
    fraction: f64,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    let model = match pretrained {
        Some(m) => {
            if !m.config().compatible_with(model_cfg) {
                return Err(Error::Incompatible(format!(
                    "pretrained network {:?} does not match requested {:?}",
                    m.config(),
                    model_cfg
                )));
            }
            m.clone()
        }
        None => Pmnet::new(model_cfg)?,
    };
    let kept = subsample_maps(train_samples, fraction, cfg.seed)?;
    log::info!(
        "fine-tuning on {} of {} training samples (fraction {fraction})",
        kept.len(),
        train_samples.len()
    );
    train(model, &TrainData::new(&kept, val_samples)?, cfg)
}

/// One row of a data-fraction sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pretrained: String,
    pub fraction: f64,
    pub n_train: usize,
    pub steps: usize,
    pub best_val_mse: f64,
    pub steps_to_threshold: Vec<(f64, Option<usize>)>,
    pub report: crate::eval::MetricReport,
}

/// Runs [`finetune`] for every (pretrained option, fraction) pair and
/// evaluates each best checkpoint on the validation samples.
pub fn data_fraction_sweep(
    pretrained: &[(String, Option<&Pmnet<f32>>)],
    model_cfg: &PmnetConfig,
    train_samples: &[GraySample],
    val_samples: &[GraySample],
    fractions: &[f64],
    thresholds: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (name, model) in pretrained {
        for &fraction in fractions {
            let run = finetune(*model, model_cfg, train_samples, val_samples, fraction, cfg)?;
            let report = crate::eval::evaluate_model(
                crate::eval::Predictor::Pmnet(&run.best_model),
                val_samples,
                &format!("{name}@{fraction}"),
                "val",
                crate::eval::ChannelMask::Intersection,
            )?;
            rows.push(SweepRow {
                pretrained: name.clone(),
                fraction,
                n_train: run.n_train,
                steps: run.steps(),
                best_val_mse: run.best_val_mse,
                steps_to_threshold: run.steps_to_threshold(thresholds),
                report,
            });
        }
    }
    Ok(rows)
}

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use base64::Engine;
use clap::{Args, Parser, Subcommand, ValueEnum};
use pmnet_app::predict::{run_prediction, InlineMap, PredictRequest};
use pmnet_app::registry::ModelEntry;
use pmnet_app::{router, AppState, Loaded, MapStore, Registry, ENV_DATA_ROOT, ENV_REGISTRY};
use pmnet_core::dataset::{
    generate_dataset, load_scenes, write_dataset, AugmentModes, CropConfig, DatasetConfig,
    DatasetManifest, GraySample, Sampling, Split,
};
use pmnet_core::eval::{evaluate_model, write_reports_csv, ChannelMask};
use pmnet_core::model::{load_checkpoint, Pmnet, PmnetConfig};
use pmnet_core::propagation::Generator;
use pmnet_core::raster::{read_json, write_json};
use pmnet_core::train::{data_fraction_sweep, finetune, train, write_run, TrainConfig, TrainData};

/// Pathloss-map prediction workbench.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate maps, ground truth and samples into a dataset root.
    Generate(GenerateArgs),
    /// Re-sample the scenes of a dataset into a new dataset root.
    Preprocess(PreprocessArgs),
    /// Train PMNet from scratch.
    Train(TrainArgs),
    /// Fine-tune a pretrained checkpoint on a fraction of the training maps.
    Finetune(FinetuneArgs),
    /// Fine-tune over several data fractions, with and without pretraining.
    Sweep(SweepArgs),
    /// Compute RMSE, RoI and channel errors for a model on a split.
    Evaluate(EvaluateArgs),
    /// Predict one pathloss map and write it as a gray PNG.
    Predict(PredictArgs),
    /// Serve /predict, /maps, /models and /healthz over HTTP.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    #[value(name = "3gpp")]
    ThreeGpp,
    Raylaunch,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    Whole,
    Crop,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Intersection,
    Gt,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

#[derive(Args)]
struct SamplingFlags {
    /// Whole scenes or TX-anchored crops.
    #[arg(long, value_enum)]
    sampling: Option<SamplingArg>,
    /// Side of the emitted samples.
    #[arg(long)]
    out_size: Option<usize>,
    /// Crop window side in scene pixels.
    #[arg(long)]
    window: Option<usize>,
    /// Step between TX offsets inside a crop window.
    #[arg(long)]
    stride: Option<usize>,
    /// Add the three rotations of every sample.
    #[arg(long)]
    rotate: bool,
    /// Add the three flips of every sample.
    #[arg(long)]
    flip: bool,
    /// Fraction of maps assigned to training.
    #[arg(long)]
    train_fraction: Option<f64>,
}

impl SamplingFlags {
    fn apply(&self, cfg: &mut DatasetConfig) {
        let out_size = self.out_size.unwrap_or(cfg.sampling.out_size());
        match self.sampling {
            Some(SamplingArg::Whole) => cfg.sampling = Sampling::Whole { out_size },
            Some(SamplingArg::Crop) => {
                let base = match cfg.sampling {
                    Sampling::Crop(c) => c,
                    Sampling::Whole { .. } => CropConfig::default(),
                };
                cfg.sampling = Sampling::Crop(CropConfig { out_size, ..base });
            }
            None => match &mut cfg.sampling {
                Sampling::Whole { out_size: o } => *o = out_size,
                Sampling::Crop(c) => c.out_size = out_size,
            },
        }
        if let Sampling::Crop(c) = &mut cfg.sampling {
            if let Some(w) = self.window {
                c.window = w;
            }
            if let Some(s) = self.stride {
                c.stride = s;
            }
        }
        if self.rotate || self.flip {
            cfg.augment = AugmentModes {
                rotate: self.rotate,
                flip: self.flip,
            };
        }
        if let Some(f) = self.train_fraction {
            cfg.train_fraction = f;
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset root to write.
    #[arg(long, env = ENV_DATA_ROOT)]
    root: PathBuf,
    /// Dataset configuration (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of maps.
    #[arg(long)]
    maps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    generator: Option<GeneratorArg>,
    /// Map side in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Target building fraction.
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    meters_per_pixel: Option<f64>,
    #[arg(long)]
    tx_per_map: Option<usize>,
    /// Prefix of the map ids.
    #[arg(long)]
    name: Option<String>,
    /// Rays per ray-launch scene.
    #[arg(long)]
    rays: Option<usize>,
    #[command(flatten)]
    sampling: SamplingFlags,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Source dataset root.
    #[arg(long, env = ENV_DATA_ROOT)]
    root: PathBuf,
    /// Destination dataset root.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    sampling: SamplingFlags,
}

#[derive(Args)]
struct TrainFlags {
    /// Dataset root.
    #[arg(long, env = ENV_DATA_ROOT)]
    root: PathBuf,
    /// Run directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Training configuration (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Network configuration (JSON); overrides --profile.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    profile: ProfileArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Stop at the first probe with validation RMSE at or below this.
    #[arg(long)]
    stop_at: Option<f64>,
    /// Validation RMSE thresholds reported as steps-to-threshold.
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    thresholds: Vec<f64>,
}

impl TrainFlags {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr_initial = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        if self.stop_at.is_some() {
            cfg.stop_at_val_rmse = self.stop_at;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn model_config(&self) -> Result<PmnetConfig> {
        let cfg = match &self.model_config {
            Some(p) => read_json(p)?,
            None => match self.profile {
                ProfileArg::Desk => PmnetConfig::desk(),
                ProfileArg::Full => PmnetConfig::full(),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// Checkpoint file or registry model id; omit to start from scratch.
    #[arg(long)]
    pretrained: Option<String>,
    #[arg(long, env = ENV_REGISTRY)]
    registry: Option<PathBuf>,
    /// Fraction of the training maps to use.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// Pretrained checkpoints as `name=path` (or a registry id); repeatable.
    #[arg(long)]
    pretrained: Vec<String>,
    #[arg(long, env = ENV_REGISTRY)]
    registry: Option<PathBuf>,
    /// Leave out the from-scratch rows.
    #[arg(long)]
    no_scratch: bool,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.5,0.9")]
    fractions: Vec<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset root.
    #[arg(long, env = ENV_DATA_ROOT)]
    root: PathBuf,
    /// "3gpp", "raylaunch", a registry id or a checkpoint file.
    #[arg(long)]
    model: String,
    #[arg(long, env = ENV_REGISTRY)]
    registry: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Pixels the channel error is computed over.
    #[arg(long, value_enum, default_value = "intersection")]
    mask: MaskArg,
    /// Directory for report.json and report.csv.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// "3gpp", "raylaunch", a registry id or a checkpoint file.
    #[arg(long)]
    model: String,
    #[arg(long, env = ENV_REGISTRY)]
    registry: Option<PathBuf>,
    /// Dataset root holding the named maps.
    #[arg(long, env = ENV_DATA_ROOT)]
    root: Option<PathBuf>,
    /// Map id from the dataset root.
    #[arg(long, conflicts_with = "map_png", required_unless_present = "map_png")]
    map: Option<String>,
    /// Obstacle image (FREE 255, FOLIAGE 128, BUILDING 0).
    #[arg(long)]
    map_png: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    meters_per_pixel: f64,
    /// TX pixel as `x,y`.
    #[arg(long, value_delimiter = ',', required = true)]
    tx: Vec<usize>,
    /// Gray pathloss PNG to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the service-style JSON response here.
    #[arg(long)]
    response: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Dataset root whose maps are served.
    #[arg(long, env = ENV_DATA_ROOT)]
    root: Option<PathBuf>,
    /// Directory of checkpoints and run directories.
    #[arg(long, env = ENV_REGISTRY)]
    registry: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => run_training(&a.train, None, None, 1.0),
        Command::Finetune(a) => {
            let pre = a
                .pretrained
                .as_deref()
                .map(|p| load_pmnet(p, a.registry.as_deref()))
                .transpose()?;
            run_training(&a.train, pre.as_ref(), a.pretrained.as_deref(), a.fraction)
        }
        Command::Sweep(a) => sweep(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Serve(a) => serve(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg: DatasetConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(v) = a.maps {
        cfg.n_maps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(g) = a.generator {
        cfg.generator = match g {
            GeneratorArg::ThreeGpp => Generator::ThreeGpp,
            GeneratorArg::Raylaunch => Generator::RayLaunch,
        };
    }
    if let Some(v) = a.size {
        cfg.map.size = v;
        if a.sampling.out_size.is_none() {
            if let Sampling::Whole { .. } = cfg.sampling {
                cfg.sampling = Sampling::Whole { out_size: v };
            }
        }
    }
    if let Some(v) = a.density {
        cfg.map.density = v;
    }
    if let Some(v) = a.meters_per_pixel {
        cfg.map.meters_per_pixel = v;
    }
    if let Some(v) = a.tx_per_map {
        cfg.tx_per_map = v;
    }
    if let Some(v) = a.name {
        cfg.name = v;
    }
    if let Some(v) = a.rays {
        cfg.raylaunch.n_rays = v;
    }
    a.sampling.apply(&mut cfg);
    let m = generate_dataset(&cfg, &a.root)
        .with_context(|| format!("generating into {}", a.root.display()))?;
    println!(
        "{} maps, {} samples ({} px) in {}",
        m.map_ids().len(),
        m.samples.len(),
        m.sample_size,
        a.root.display()
    );
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let src = DatasetManifest::load(&a.root)
        .with_context(|| format!("no dataset at {}", a.root.display()))?;
    let mut cfg = src.config.unwrap_or_default();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    a.sampling.apply(&mut cfg);
    let scenes = load_scenes(&a.root)?;
    let m = write_dataset(&cfg, &scenes, &a.out)?;
    println!(
        "{} scenes -> {} samples in {}",
        scenes.len(),
        m.samples.len(),
        a.out.display()
    );
    Ok(())
}

fn load_split(root: &Path) -> Result<(Vec<GraySample>, Vec<GraySample>)> {
    let m =
        DatasetManifest::load(root).with_context(|| format!("no dataset at {}", root.display()))?;
    Ok((
        m.load_samples(root, Split::Train)?,
        m.load_samples(root, Split::Val)?,
    ))
}

/// Builds a registry holding `model_ref`: baselines, the registry directory, and
/// `model_ref` itself when it names a checkpoint file.
fn registry_for(model_ref: &str, registry: Option<&Path>) -> Result<Registry> {
    let mut reg = match registry {
        Some(dir) => Registry::scan(dir).with_context(|| format!("scanning {}", dir.display()))?,
        None => Registry::baselines(),
    };
    let path = Path::new(model_ref);
    if reg.get(model_ref).is_none() && path.is_file() {
        let (model, meta) = load_checkpoint(path)?;
        reg.insert(
            model_ref,
            ModelEntry::Pmnet {
                model: Box::new(model),
                path: path.to_path_buf(),
                meta,
            },
        );
    }
    if reg.get(model_ref).is_none() {
        bail!("unknown model {model_ref:?}: not a baseline, registry id or checkpoint file");
    }
    Ok(reg)
}

fn load_pmnet(model_ref: &str, registry: Option<&Path>) -> Result<Pmnet<f32>> {
    match registry_for(model_ref, registry)?.get(model_ref) {
        Some(ModelEntry::Pmnet { model, .. }) => Ok((**model).clone()),
        _ => bail!("{model_ref:?} is not a PMNet checkpoint"),
    }
}

fn run_training(
    a: &TrainFlags,
    pretrained: Option<&Pmnet<f32>>,
    source: Option<&str>,
    fraction: f64,
) -> Result<()> {
    let cfg = a.train_config()?;
    let model_cfg = match pretrained {
        Some(m) if a.model_config.is_none() => m.config().clone(),
        _ => a.model_config()?,
    };
    let (tr, va) = load_split(&a.root)?;
    let run = if pretrained.is_some() || fraction < 1.0 {
        finetune(pretrained, &model_cfg, &tr, &va, fraction, &cfg)?
    } else {
        train(Pmnet::new(&model_cfg)?, &TrainData::new(&tr, &va)?, &cfg)?
    };
    let report = evaluate_model(
        pmnet_core::eval::Predictor::Pmnet(&run.best_model),
        &va,
        &a.out.display().to_string(),
        &a.root.display().to_string(),
        ChannelMask::Intersection,
    )?;
    let summary = write_run(
        &a.out,
        &cfg,
        &run,
        source,
        fraction,
        &a.thresholds,
        Some(&report),
        &a.root.display().to_string(),
    )?;
    println!(
        "{} steps, best epoch {} (val MSE {:.6}), val RMSE {:.5}, run in {}",
        summary.steps,
        summary.best_epoch,
        summary.best_val_mse,
        report.rmse,
        a.out.display()
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = a.train.train_config()?;
    let mut named: Vec<(String, Pmnet<f32>)> = Vec::new();
    for model_ref in &a.pretrained {
        let (name, what) = model_ref
            .split_once('=')
            .unwrap_or((model_ref.as_str(), model_ref.as_str()));
        named.push((name.to_string(), load_pmnet(what, a.registry.as_deref())?));
    }
    let model_cfg = match named.first() {
        Some((_, m)) if a.train.model_config.is_none() => m.config().clone(),
        _ => a.train.model_config()?,
    };
    let mut options: Vec<(String, Option<&Pmnet<f32>>)> =
        named.iter().map(|(n, m)| (n.clone(), Some(m))).collect();
    if !a.no_scratch {
        options.push(("scratch".into(), None));
    }
    let (tr, va) = load_split(&a.train.root)?;
    let rows = data_fraction_sweep(
        &options,
        &model_cfg,
        &tr,
        &va,
        &a.fractions,
        &a.train.thresholds,
        &cfg,
    )?;
    std::fs::create_dir_all(&a.train.out)?;
    write_json(
        &a.train.out.join("config.json"),
        &serde_json::json!({
            "train": cfg,
            "model": model_cfg,
            "pretrained": a.pretrained,
            "scratch": !a.no_scratch,
            "fractions": a.fractions,
            "thresholds": a.train.thresholds,
            "dataset": a.train.root,
        }),
    )?;
    write_json(&a.train.out.join("sweep.json"), &rows)?;
    let reports: Vec<_> = rows.iter().map(|r| r.report.clone()).collect();
    write_reports_csv(&reports, &a.train.out.join("sweep.csv"))?;
    for r in &rows {
        println!(
            "{:>10} fraction {:.2}: {} samples, {} steps, val RMSE {:.5}",
            r.pretrained, r.fraction, r.n_train, r.steps, r.report.rmse
        );
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let reg = registry_for(&a.model, a.registry.as_deref())?;
    let entry = reg
        .get(&a.model)
        .ok_or_else(|| anyhow!("unknown model {:?}", a.model))?;
    let m = DatasetManifest::load(&a.root)
        .with_context(|| format!("no dataset at {}", a.root.display()))?;
    let (split, split_name) = match a.split {
        SplitArg::Train => (Split::Train, "train"),
        SplitArg::Val => (Split::Val, "val"),
    };
    let samples = m.load_samples(&a.root, split)?;
    let mask = match a.mask {
        MaskArg::Intersection => ChannelMask::Intersection,
        MaskArg::Gt => ChannelMask::GroundTruth,
    };
    let dataset_id = format!("{}:{split_name}", a.root.display());
    let report = evaluate_model(entry.predictor(), &samples, &a.model, &dataset_id, mask)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(
        &a.out.join("config.json"),
        &serde_json::json!({
            "model": a.model,
            "dataset": a.root,
            "split": split_name,
            "mask": match a.mask { MaskArg::Intersection => "intersection", MaskArg::Gt => "gt" },
        }),
    )?;
    report.save_json(&a.out.join("report.json"))?;
    write_reports_csv(std::slice::from_ref(&report), &a.out.join("report.csv"))?;
    println!(
        "{} on {dataset_id} (n={}): RMSE {:.5} ({:.2} gray), RoI error {:.4}, channel error {:.2} dB",
        report.model_id, report.n, report.rmse, report.rmse_gray, report.roi_err, report.chan_err_db
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let reg = registry_for(&a.model, a.registry.as_deref())?;
    let maps = match (&a.root, &a.map) {
        (Some(root), Some(_)) => MapStore::load(root)?,
        (None, Some(_)) => bail!("--map needs a dataset root (--root or {ENV_DATA_ROOT})"),
        _ => MapStore::default(),
    };
    let inline = a
        .map_png
        .as_ref()
        .map(|p| -> Result<InlineMap> {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(InlineMap {
                png: base64::engine::general_purpose::STANDARD.encode(bytes),
                meters_per_pixel: a.meters_per_pixel,
            })
        })
        .transpose()?;
    if a.tx.len() != 2 {
        bail!("--tx takes two values, x,y");
    }
    let req = PredictRequest {
        model_id: a.model.clone(),
        map_id: a.map.clone(),
        map: inline,
        tx: [a.tx[0], a.tx[1]],
    };
    let pred = run_prediction(&reg, &maps, &req)?;
    std::fs::write(&a.out, &pred.png).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{} px map in {:.1} ms -> {}",
        pred.gray.width,
        pred.latency_ms,
        a.out.display()
    );
    if let Some(path) = &a.response {
        write_json(path, &pred.into_response(&req))?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .context("bad --host/--port")?;
    let state = AppState::loading();
    let loader = state.clone();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        tokio::task::spawn_blocking(move || {
            let registry = match &a.registry {
                Some(dir) => Registry::scan(dir),
                None => Ok(Registry::baselines()),
            };
            let maps = match &a.root {
                Some(root) => MapStore::load(root),
                None => Ok(MapStore::default()),
            };
            match (registry, maps) {
                (Ok(registry), Ok(maps)) => {
                    log::info!("serving {} models and {} maps", registry.len(), maps.len());
                    loader.publish(Loaded { registry, maps });
                }
                (Err(e), _) => log::error!("registry: {e}"),
                (_, Err(e)) => log::error!("maps: {e}"),
            }
        });
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

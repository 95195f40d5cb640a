//! Models the service and CLI can predict with: every checkpoint found in a
//! registry directory plus the two analytic baselines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pmnet_core::eval::Predictor;
use pmnet_core::model::{load_checkpoint, CheckpointMeta, Pmnet};
use pmnet_core::propagation::RayLaunchConfig;
use serde::Serialize;

pub const THREE_GPP_ID: &str = "3gpp";
pub const RAYLAUNCH_ID: &str = "raylaunch";

#[derive(Debug, Clone)]
pub enum ModelEntry {
    Pmnet {
        model: Box<Pmnet<f32>>,
        path: PathBuf,
        meta: CheckpointMeta,
    },
    ThreeGpp,
    RayLaunch(RayLaunchConfig),
}

impl ModelEntry {
    pub fn predictor(&self) -> Predictor<'_> {
        match self {
            ModelEntry::Pmnet { model, .. } => Predictor::Pmnet(model),
            ModelEntry::ThreeGpp => Predictor::ThreeGpp,
            ModelEntry::RayLaunch(rl) => Predictor::RayLaunch(rl),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub kind: &'static str,
    /// Map side the model accepts; `None` for any size.
    pub input_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    entries: BTreeMap<String, ModelEntry>,
}

impl Registry {
    /// Just the analytic baselines.
    pub fn baselines() -> Self {
        let mut entries = BTreeMap::new();
        entries.insert(THREE_GPP_ID.to_string(), ModelEntry::ThreeGpp);
        entries.insert(
            RAYLAUNCH_ID.to_string(),
            ModelEntry::RayLaunch(RayLaunchConfig::default()),
        );
        Self { entries }
    }

    /// Baselines plus checkpoints under `dir`: `<id>.ckpt` files at the top
    /// level and training run directories `<id>/checkpoints/best.ckpt`.
    /// Unreadable checkpoints are skipped with a warning.
    pub fn scan(dir: &Path) -> std::io::Result<Self> {
        let mut reg = Self::baselines();
        let mut found: Vec<(String, PathBuf)> = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(name) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .map(str::to_string)
            else {
                continue;
            };
            if path.is_file() && path.extension().is_some_and(|e| e == "ckpt") {
                found.push((name, path));
            } else if path.is_dir() {
                let best = path.join("checkpoints").join("best.ckpt");
                if best.is_file() {
                    let id = path
                        .file_name()
                        .and_then(|s| s.to_str())
                        .unwrap_or(&name)
                        .to_string();
                    found.push((id, best));
                }
            }
        }
        found.sort();
        for (id, path) in found {
            if reg.entries.contains_key(&id) {
                log::warn!(
                    "skipping {}: model id {id:?} is already taken",
                    path.display()
                );
                continue;
            }
            match load_checkpoint(&path) {
                Ok((model, meta)) => {
                    log::info!("loaded {id} from {}", path.display());
                    reg.entries.insert(
                        id,
                        ModelEntry::Pmnet {
                            model: Box::new(model),
                            path,
                            meta,
                        },
                    );
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        Ok(reg)
    }

    pub fn insert(&mut self, id: impl Into<String>, entry: ModelEntry) {
        self.entries.insert(id.into(), entry);
    }

    pub fn get(&self, id: &str) -> Option<&ModelEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn list(&self) -> Vec<ModelInfo> {
        self.entries
            .iter()
            .map(|(id, e)| match e {
                ModelEntry::Pmnet { model, meta, .. } => ModelInfo {
                    model_id: id.clone(),
                    kind: "pmnet",
                    input_size: Some(model.config().input_size),
                    epoch: Some(meta.epoch),
                    val_mse: meta.val_mse,
                },
                ModelEntry::ThreeGpp => ModelInfo {
                    model_id: id.clone(),
                    kind: THREE_GPP_ID,
                    input_size: None,
                    epoch: None,
                    val_mse: None,
                },
                ModelEntry::RayLaunch(_) => ModelInfo {
                    model_id: id.clone(),
                    kind: RAYLAUNCH_ID,
                    input_size: None,
                    epoch: None,
                    val_mse: None,
                },
            })
            .collect()
    }
}

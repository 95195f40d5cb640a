//! Command-line tools and the HTTP inference service around `pmnet-core`.

pub mod maps;
pub mod predict;
pub mod registry;
pub mod service;

pub use maps::MapStore;
pub use predict::{run_prediction, PredictError, PredictRequest, PredictResponse};
pub use registry::Registry;
pub use service::{router, AppState, Loaded};

/// Dataset root used when `--root` is not given.
pub const ENV_DATA_ROOT: &str = "PMNET_DATA_ROOT";
/// Registry directory used when `--registry` is not given.
pub const ENV_REGISTRY: &str = "PMNET_REGISTRY";

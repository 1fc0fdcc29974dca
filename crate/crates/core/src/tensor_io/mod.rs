//! Tensor container, the `PPDL` binary format, and prediction bundles.

mod bundle;
mod format;

pub use bundle::{load_bundle, save_bundle, BundleError, GroundTruth, PredictionBundle, SemanticPrediction, MANIFEST_NAME};
pub use format::{read_tensor, write_tensor, DType, Tensor, TensorData, TensorError, FORMAT_VERSION, MAGIC, MAX_RANK};

//! Numerical core for uncertainty-aware panoptic segmentation.
//!
//! The crate is organised around the dataflow of a Panoptic-DeepLab style
//! network whose semantic and offset heads emit distributions instead of
//! point estimates:
//!
//! - [`tensor_io`]: the `PPDL` binary tensor format and manifest-driven
//!   prediction bundles.
//! - [`semantic`]: temperature-scaled softmax, temperature fitting,
//!   Dirichlet (evidential) quantities and losses with analytic gradients.
//! - [`spatial`]: Gaussian NLL and energy-score losses for offset
//!   distributions, scalar spatial uncertainty, deterministic sampling.
//! - [`postprocess`]: center detection, pixel grouping (single and
//!   multi-sample), majority-vote class fusion, total uncertainty.
//! - [`metrics`]: segment matching, Panoptic Quality, uECE/pECE and the
//!   decoupled spatial/semantic variants, energy score and offset statistics.
//! - [`synth`]: seeded synthetic scenes with exact ground truth, plus
//!   brute-force oracles.
//! - [`gradcheck`]: finite-difference verification of every loss gradient.
//! - [`cli`]: the batch command surface used by the `panu` binary.
//!
//! All reductions use fixed-order pairwise summation, so results are
//! bitwise identical for any rayon thread count.

pub mod cli;
pub mod gradcheck;
pub mod metrics;
pub mod postprocess;
pub mod reduce;
pub mod rng;
pub mod semantic;
pub mod spatial;
pub mod synth;
pub mod tensor_io;
mod uncertainty;

pub use postprocess::{run_pipeline, PanopticMap, PipelineConfig, PipelineOutput, PostprocessConfig};
pub use semantic::{DirichletMap, ProbMap, UncertaintyMode};
pub use spatial::{OffsetField, OffsetKind, VarianceNormalizer};
pub use tensor_io::{GroundTruth, PredictionBundle, SemanticPrediction, Tensor};
pub use uncertainty::{UncertaintyError, UncertaintyMap};

/// Class identifier. Ground truth may also carry the bundle's ignore label.
pub type ClassId = u32;

/// Instance identifier; `0` marks stuff (or unassigned thing) pixels.
pub type InstanceId = u32;

/// How per-pixel loss terms are reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Sum over masked pixels.
    Sum,
    /// Mean over masked pixels (zero when the mask is empty).
    #[default]
    Mean,
}

impl Reduction {
    pub(crate) fn scale(self, masked: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean if masked == 0 => 0.0,
            Reduction::Mean => 1.0 / masked as f64,
        }
    }
}

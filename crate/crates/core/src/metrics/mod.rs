//! Evaluation metrics.
//!
//! Every metric shares one segment matching (same class, IoU > 0.5).
//! Ignore-label pixels never enter a metric. Segment-level calibration
//! evaluates each TP or FP segment over its own predicted pixels; false
//! negatives only affect Panoptic Quality.

mod calibration;
mod distribution;
mod matching;
mod oracle;
mod report;

use thiserror::Error;

pub use calibration::{
    bin_index, logit_uece, pece, pece_sem, pece_spa, segment_calibration, uece, AccuracyRule, BinStats, CalibrationBins,
    SegmentCalibration, SegmentContext,
};
pub use distribution::{
    energy_score_metric, energy_score_terms, offset_stats, offset_stats_accumulate, GaussianSampling, MeanAccumulator,
    OffsetStats, OffsetStatsAccumulator,
};
pub use matching::{
    gt_segment, match_segments, panoptic_quality, pred_segment, ClassCounts, PanopticQuality, PqSummary, SegmentKey,
    SegmentMatching, TruePositive,
};
pub use oracle::{oracle_substitute, OracleOptions, ORACLE_LOGIT_GAP};
pub use report::{
    evaluate_image, ClassReport, ConfigEcho, EvalConfig, ImageEvaluation, ImageReport, MetricReport,
    ReliabilityBins, SegmentCounts,
};

use crate::postprocess::PostprocessError;
use crate::spatial::SpatialError;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("no pixels to evaluate")]
    EmptyInput,
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("bin count must be >= 1")]
    InvalidBins,
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
}

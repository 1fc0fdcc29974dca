//! Offset-distribution quality: energy score and offset statistics.

use ndarray::{ArrayView2, ArrayView3};

use super::MetricsError;
use crate::reduce::pairwise_sum;
use crate::spatial::{energy_score, sample_gaussian_offsets, OffsetField};

/// Sum and count of per-pixel values. Merging in a fixed order keeps pooled
/// means deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanAccumulator {
    pub sum: f64,
    pub count: usize,
}

impl MeanAccumulator {
    pub fn from_values(values: &[f64]) -> Self {
        Self {
            sum: pairwise_sum(values),
            count: values.len(),
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// How Gaussian fields are turned into samples for the energy score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianSampling {
    pub samples: usize,
    pub seed: u64,
}

impl Default for GaussianSampling {
    fn default() -> Self {
        Self { samples: 10, seed: 0 }
    }
}

fn check_shapes(field: &OffsetField, gt: ArrayView3<f64>, mask: ArrayView2<bool>) -> Result<(), MetricsError> {
    let (h, w) = field.dim();
    if gt.dim() != (h, w, 2) {
        return Err(MetricsError::ShapeMismatch(field.shape(), gt.shape().to_vec()));
    }
    if mask.dim() != (h, w) {
        return Err(MetricsError::ShapeMismatch(field.shape(), mask.shape().to_vec()));
    }
    Ok(())
}

fn masked_pixels(mask: ArrayView2<bool>) -> Vec<(usize, usize)> {
    mask.indexed_iter().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Per-pixel energy scores over the masked pixels, in row-major order.
pub fn energy_score_terms(
    offsets: &OffsetField,
    gt_offsets: ArrayView3<f64>,
    mask: ArrayView2<bool>,
    sampling: GaussianSampling,
) -> Result<Vec<f64>, MetricsError> {
    check_shapes(offsets, gt_offsets, mask)?;
    let sampled;
    let field = match offsets {
        OffsetField::Gaussian { .. } => {
            sampled = sample_gaussian_offsets(offsets, sampling.samples, sampling.seed)?;
            &sampled
        }
        f => f,
    };
    Ok(masked_pixels(mask)
        .into_iter()
        .map(|(y, x)| energy_score(&field.vectors_at(y, x), [gt_offsets[[y, x, 0]], gt_offsets[[y, x, 1]]]))
        .collect())
}

/// Mean energy score over masked pixels. Point fields count as one sample;
/// Gaussian fields are sampled first.
pub fn energy_score_metric(
    offsets: &OffsetField,
    gt_offsets: ArrayView3<f64>,
    mask: ArrayView2<bool>,
    sampling: GaussianSampling,
) -> Result<f64, MetricsError> {
    let terms = energy_score_terms(offsets, gt_offsets, mask, sampling)?;
    MeanAccumulator::from_values(&terms).mean().ok_or(MetricsError::EmptyMask)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OffsetStatsAccumulator {
    pub length: MeanAccumulator,
    pub squared_error: MeanAccumulator,
}

impl OffsetStatsAccumulator {
    pub fn merge(&mut self, other: &Self) {
        self.length.merge(&other.length);
        self.squared_error.merge(&other.squared_error);
    }

    pub fn finish(&self) -> Option<OffsetStats> {
        Some(OffsetStats {
            avg_length: self.length.mean()?,
            rmse: self.squared_error.mean()?.sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetStats {
    pub avg_length: f64,
    pub rmse: f64,
}

/// Length and squared-error sums over every predicted vector of the masked
/// pixels (each sample counts once; Gaussian fields use their mean).
pub fn offset_stats_accumulate(
    offsets: &OffsetField,
    gt_offsets: ArrayView3<f64>,
    mask: ArrayView2<bool>,
) -> Result<OffsetStatsAccumulator, MetricsError> {
    check_shapes(offsets, gt_offsets, mask)?;
    let mut lengths = Vec::new();
    let mut sq = Vec::new();
    for (y, x) in masked_pixels(mask) {
        let (gx, gy) = (gt_offsets[[y, x, 0]], gt_offsets[[y, x, 1]]);
        for v in offsets.vectors_at(y, x) {
            lengths.push(v[0].hypot(v[1]));
            sq.push((v[0] - gx).powi(2) + (v[1] - gy).powi(2));
        }
    }
    Ok(OffsetStatsAccumulator {
        length: MeanAccumulator::from_values(&lengths),
        squared_error: MeanAccumulator::from_values(&sq),
    })
}

pub fn offset_stats(
    offsets: &OffsetField,
    gt_offsets: ArrayView3<f64>,
    mask: ArrayView2<bool>,
) -> Result<OffsetStats, MetricsError> {
    offset_stats_accumulate(offsets, gt_offsets, mask)?
        .finish()
        .ok_or(MetricsError::EmptyMask)
}

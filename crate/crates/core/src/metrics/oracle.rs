//! Ground-truth substitution for oracle studies.

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::semantic::argmax_last;
use crate::spatial::OffsetField;
use crate::tensor_io::{GroundTruth, PredictionBundle, SemanticPrediction};

/// Logit gap between the one-hot class and the rest; e^-100 underflows the
/// softmax remainder below f64 resolution around 1.
pub const ORACLE_LOGIT_GAP: f64 = 100.0;

/// Which predicted components to replace with ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OracleOptions {
    pub centers: bool,
    pub semantics: bool,
    pub offsets: bool,
}

impl OracleOptions {
    pub fn any(&self) -> bool {
        self.centers || self.semantics || self.offsets
    }
}

/// Replace the selected components of `bundle` by ground truth.
///
/// - centers: heatmap of 1.0 impulses at rounded instance centers of mass;
/// - semantics: one-hot logits at temperature 1 (ignore pixels keep the
///   predicted argmax);
/// - offsets: gt offsets on gt thing pixels for every sample / mean, other
///   pixels and Gaussian variances untouched.
pub fn oracle_substitute(
    bundle: &PredictionBundle,
    gt: &GroundTruth,
    options: OracleOptions,
) -> Result<PredictionBundle, MetricsError> {
    let (h, w) = (bundle.height(), bundle.width());
    if gt.dim() != (h, w) {
        return Err(MetricsError::ShapeMismatch(vec![h, w], vec![gt.dim().0, gt.dim().1]));
    }
    let mut out = bundle.clone();
    if options.centers {
        out.center_heatmap.fill(0.0);
        for &(cy, cx) in gt.instance_centers(&bundle.thing_ids).values() {
            let y = (cy.round() as usize).min(h - 1);
            let x = (cx.round() as usize).min(w - 1);
            out.center_heatmap[[y, x]] = 1.0;
        }
    }
    if options.semantics {
        let c = bundle.num_classes();
        let predicted = argmax_last(bundle.semantic.values().view());
        let mut z = Array3::from_elem((h, w, c), -ORACLE_LOGIT_GAP);
        for ((y, x), &g) in gt.semantic().indexed_iter() {
            let k = if g == bundle.ignore_label { predicted[[y, x]] } else { g };
            z[[y, x, k as usize]] = 0.0;
        }
        out.semantic = SemanticPrediction::Logits(z);
        out.temperature = 1.0;
    }
    if options.offsets {
        let gt_off = gt.offsets(&bundle.thing_ids);
        let mask = gt.thing_mask(&bundle.thing_ids);
        let overwrite = |target: &mut Array3<f64>| {
            for ((y, x), &m) in mask.indexed_iter() {
                if m {
                    target[[y, x, 0]] = gt_off[[y, x, 0]];
                    target[[y, x, 1]] = gt_off[[y, x, 1]];
                }
            }
        };
        match &mut out.offsets {
            OffsetField::Point(p) => overwrite(p),
            OffsetField::Gaussian { mean, .. } => overwrite(mean),
            OffsetField::Samples(s) => {
                for mut sample in s.axis_iter_mut(Axis(2)) {
                    for ((y, x), &m) in mask.indexed_iter() {
                        if m {
                            sample[[y, x, 0]] = gt_off[[y, x, 0]];
                            sample[[y, x, 1]] = gt_off[[y, x, 1]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

//! Panoptic-DeepLab style fusion of semantic, center and offset outputs.
//!
//! 1. stuff pixels copy the semantic argmax;
//! 2. centers = heatmap peaks above a threshold after max-pool NMS;
//! 3. thing pixels join the center nearest to `position + offset` (by
//!    majority over samples for sample fields);
//! 4. each instance takes the majority thing class of its pixels.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2, ArrayView3, ArrayView4, Zip};
use rayon::prelude::*;
use thiserror::Error;

use crate::semantic::{
    dirichlet_from_evidence, semantic_uncertainty, softmax_with_temperature, SemanticError, SemanticInput,
    UncertaintyMode,
};
use crate::spatial::{
    spatial_uncertainty_from_samples, spatial_uncertainty_from_variance, total_variance, OffsetField, OffsetKind,
    SpatialError, VarianceNormalizer,
};
use crate::tensor_io::{PredictionBundle, SemanticPrediction};
use crate::uncertainty::UncertaintyMap;
use crate::{ClassId, InstanceId};

#[derive(Debug, Error, PartialEq)]
pub enum PostprocessError {
    #[error("expected {expected:?} offsets, got {found:?}")]
    KindMismatch { expected: OffsetKind, found: OffsetKind },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("invalid postprocess config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocessConfig {
    pub heatmap_threshold: f64,
    /// Side of the square NMS window; odd.
    pub nms_kernel: usize,
    pub top_k: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            heatmap_threshold: 0.1,
            nms_kernel: 7,
            top_k: 200,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        if self.nms_kernel.is_multiple_of(2) {
            return Err(PostprocessError::InvalidConfig(format!(
                "nms_kernel must be odd, got {}",
                self.nms_kernel
            )));
        }
        if !(self.heatmap_threshold > 0.0 && self.heatmap_threshold < 1.0) {
            return Err(PostprocessError::InvalidConfig(format!(
                "heatmap_threshold must lie in (0, 1), got {}",
                self.heatmap_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub y: usize,
    pub x: usize,
    pub score: f64,
}

/// Detected centers, highest score first. Index `k` becomes instance id `k + 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CenterList(pub Vec<Center>);

impl CenterList {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Center> {
        self.0.iter()
    }

    /// Index of the center nearest to `(ty, tx)`; ties go to the lower index.
    fn nearest(&self, ty: f64, tx: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, c) in self.0.iter().enumerate() {
            let dy = c.y as f64 - ty;
            let dx = c.x as f64 - tx;
            let d = dy * dy + dx * dx;
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        best.map(|(k, _)| k)
    }
}

/// Per-pixel class and instance assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticMap {
    pub class_id: Array2<ClassId>,
    /// 0 for stuff and for thing pixels left without a center.
    pub instance_id: Array2<InstanceId>,
}

impl PanopticMap {
    pub fn dim(&self) -> (usize, usize) {
        self.class_id.dim()
    }
}

/// Heatmap peaks: value ≥ threshold and strictly greater than every other
/// pixel of the NMS window, where equal values lose to the earlier pixel in
/// row-major order.
pub fn find_centers(heatmap: ArrayView2<f64>, config: &PostprocessConfig) -> CenterList {
    let (h, w) = heatmap.dim();
    let r = config.nms_kernel / 2;
    let mut centers: Vec<Center> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).filter_map(move |x| {
                let v = heatmap[[y, x]];
                if v.is_nan() || v < config.heatmap_threshold {
                    return None;
                }
                let idx = y * w + x;
                for qy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                    for qx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                        let q = heatmap[[qy, qx]];
                        let qidx = qy * w + qx;
                        if qidx != idx && (q > v || (q == v && qidx < idx)) {
                            return None;
                        }
                    }
                }
                Some(Center { y, x, score: v })
            })
        })
        .collect();
    centers.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.y, a.x).cmp(&(b.y, b.x))));
    centers.truncate(config.top_k);
    CenterList(centers)
}

fn check_mask(h: usize, w: usize, mask: &ArrayView2<bool>) -> Result<(), PostprocessError> {
    if mask.dim() != (h, w) {
        return Err(PostprocessError::ShapeMismatch(vec![h, w], mask.shape().to_vec()));
    }
    Ok(())
}

fn assign_from_vectors(
    offsets: ArrayView3<f64>,
    centers: &CenterList,
    thing_mask: ArrayView2<bool>,
) -> Array2<InstanceId> {
    let (h, w, _) = offsets.dim();
    let mut out = Array2::zeros((h, w));
    if centers.is_empty() {
        return out;
    }
    Zip::indexed(&mut out).and(&thing_mask).par_for_each(|(y, x), o, &thing| {
        if thing {
            let ty = y as f64 + offsets[[y, x, 1]];
            let tx = x as f64 + offsets[[y, x, 0]];
            *o = centers.nearest(ty, tx).map_or(0, |k| k as InstanceId + 1);
        }
    });
    out
}

/// Group thing pixels by the center closest to `position + offset`.
pub fn assign_pixels(
    offsets: &OffsetField,
    centers: &CenterList,
    thing_mask: ArrayView2<bool>,
) -> Result<Array2<InstanceId>, PostprocessError> {
    let OffsetField::Point(m) = offsets else {
        return Err(PostprocessError::KindMismatch {
            expected: OffsetKind::Point,
            found: offsets.kind(),
        });
    };
    check_mask(m.dim().0, m.dim().1, &thing_mask)?;
    Ok(assign_from_vectors(m.view(), centers, thing_mask))
}

fn assign_from_samples(samples: ArrayView4<f64>, centers: &CenterList, thing_mask: ArrayView2<bool>) -> Array2<InstanceId> {
    let (h, w, m, _) = samples.dim();
    let mut out = Array2::zeros((h, w));
    if centers.is_empty() {
        return out;
    }
    Zip::indexed(&mut out).and(&thing_mask).par_for_each(|(y, x), o, &thing| {
        if !thing {
            return;
        }
        let mut votes = vec![0usize; centers.len()];
        for j in 0..m {
            let ty = y as f64 + samples[[y, x, j, 1]];
            let tx = x as f64 + samples[[y, x, j, 0]];
            if let Some(k) = centers.nearest(ty, tx) {
                votes[k] += 1;
            }
        }
        // first maximum = lowest center index on ties
        let mut best = 0;
        for (k, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = k;
            }
        }
        *o = best as InstanceId + 1;
    });
    out
}

/// Multi-sample grouping: each sample votes for its nearest center and the
/// pixel takes the modal center.
pub fn assign_pixels_multisample(
    offsets: &OffsetField,
    centers: &CenterList,
    thing_mask: ArrayView2<bool>,
) -> Result<Array2<InstanceId>, PostprocessError> {
    let OffsetField::Samples(s) = offsets else {
        return Err(PostprocessError::KindMismatch {
            expected: OffsetKind::Samples,
            found: offsets.kind(),
        });
    };
    check_mask(s.dim().0, s.dim().1, &thing_mask)?;
    Ok(assign_from_samples(s.view(), centers, thing_mask))
}

/// Fuse instance ids with the semantic argmax.
///
/// Stuff pixels keep their semantic class. Each instance takes the most
/// frequent thing class among its pixels (lower id on ties); an instance
/// with no thing-class pixel at all is dissolved into stuff.
pub fn majority_vote_classes(
    instance_ids: ArrayView2<InstanceId>,
    semantic_argmax: ArrayView2<ClassId>,
    thing_ids: &BTreeSet<ClassId>,
) -> Result<PanopticMap, PostprocessError> {
    if instance_ids.dim() != semantic_argmax.dim() {
        return Err(PostprocessError::ShapeMismatch(
            instance_ids.shape().to_vec(),
            semantic_argmax.shape().to_vec(),
        ));
    }
    let mut hist: BTreeMap<InstanceId, BTreeMap<ClassId, usize>> = BTreeMap::new();
    for (&inst, &cls) in instance_ids.iter().zip(semantic_argmax.iter()) {
        if inst > 0 && thing_ids.contains(&cls) {
            *hist.entry(inst).or_default().entry(cls).or_default() += 1;
        }
    }
    let winner: BTreeMap<InstanceId, ClassId> = hist
        .into_iter()
        .map(|(inst, counts)| {
            let mut best: Option<(ClassId, usize)> = None;
            for (cls, n) in counts {
                if best.is_none_or(|(_, bn)| n > bn) {
                    best = Some((cls, n));
                }
            }
            (inst, best.expect("non-empty histogram").0)
        })
        .collect();
    let mut class_id = semantic_argmax.to_owned();
    let mut instance_id = instance_ids.to_owned();
    Zip::from(&mut class_id).and(&mut instance_id).for_each(|c, i| {
        if *i > 0 {
            match winner.get(i) {
                Some(&w) => *c = w,
                None => *i = 0,
            }
        }
    });
    Ok(PanopticMap { class_id, instance_id })
}

/// Elementwise `max(unc_spa, unc_sem)`; missing spatial uncertainty counts
/// as zero.
pub fn total_uncertainty(
    unc_spa: Option<&UncertaintyMap>,
    unc_sem: &UncertaintyMap,
) -> Result<UncertaintyMap, PostprocessError> {
    let Some(spa) = unc_spa else {
        return Ok(unc_sem.clone());
    };
    if spa.dim() != unc_sem.dim() {
        return Err(PostprocessError::ShapeMismatch(
            spa.values().shape().to_vec(),
            unc_sem.values().shape().to_vec(),
        ));
    }
    let mut out = unc_sem.values().clone();
    Zip::from(&mut out).and(spa.values()).for_each(|o, &s| *o = o.max(s));
    Ok(UncertaintyMap::from_clamped(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PipelineConfig {
    pub postprocess: PostprocessConfig,
    /// Semantic uncertainty extraction; `None` picks MCP for logits and the
    /// evidential uncertainty for Dirichlet outputs.
    pub semantic_mode: Option<UncertaintyMode>,
    /// Normaliser for spatial uncertainty; `None` uses the bundle's own
    /// maximum total variance.
    pub variance_normalizer: Option<VarianceNormalizer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub panoptic: PanopticMap,
    pub centers: CenterList,
    pub semantic_argmax: Array2<ClassId>,
    /// `None` for point offsets, which carry no spatial uncertainty.
    pub unc_spa: Option<UncertaintyMap>,
    pub unc_sem: UncertaintyMap,
    pub unc_total: UncertaintyMap,
}

/// Decode a bundle into a panoptic map and its three uncertainty maps.
pub fn run_pipeline(bundle: &PredictionBundle, config: &PipelineConfig) -> Result<PipelineOutput, PostprocessError> {
    config.postprocess.validate()?;
    let (semantic_argmax, unc_sem) = match &bundle.semantic {
        SemanticPrediction::Logits(z) => {
            let probs = softmax_with_temperature(z.view(), bundle.temperature)?;
            let mode = config.semantic_mode.unwrap_or(UncertaintyMode::Mcp);
            (probs.argmax(), semantic_uncertainty(SemanticInput::Probs(&probs), mode)?)
        }
        SemanticPrediction::Dirichlet(raw) => {
            let alpha = dirichlet_from_evidence(raw)?;
            let argmax = crate::semantic::argmax_last(alpha.alpha().view());
            let mode = config.semantic_mode.unwrap_or(UncertaintyMode::Evidential);
            (argmax, semantic_uncertainty(SemanticInput::Dirichlet(&alpha), mode)?)
        }
    };
    let thing_mask = semantic_argmax.mapv(|c| bundle.thing_ids.contains(&c));
    let centers = find_centers(bundle.center_heatmap.view(), &config.postprocess);
    let instances = match &bundle.offsets {
        OffsetField::Samples(s) => assign_from_samples(s.view(), &centers, thing_mask.view()),
        field => assign_from_vectors(field.point_estimate().expect("point or gaussian"), &centers, thing_mask.view()),
    };
    let panoptic = majority_vote_classes(instances.view(), semantic_argmax.view(), &bundle.thing_ids)?;

    let unc_spa = match bundle.offsets.kind() {
        OffsetKind::Point => None,
        kind => {
            let normalizer = match config.variance_normalizer {
                Some(n) => Some(n),
                None => {
                    let max = total_variance(&bundle.offsets)?.fold(0.0f64, |m, &v| m.max(v));
                    (max > 0.0).then(|| VarianceNormalizer::new(max)).transpose()?
                }
            };
            Some(match normalizer {
                None => UncertaintyMap::zeros(bundle.height(), bundle.width()),
                Some(n) if kind == OffsetKind::Gaussian => spatial_uncertainty_from_variance(&bundle.offsets, &n)?,
                Some(n) => spatial_uncertainty_from_samples(&bundle.offsets, &n)?,
            })
        }
    };
    let unc_total = total_uncertainty(unc_spa.as_ref(), &unc_sem)?;
    Ok(PipelineOutput {
        panoptic,
        centers,
        semantic_argmax,
        unc_spa,
        unc_sem,
        unc_total,
    })
}

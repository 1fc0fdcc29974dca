//! Confidence-binned calibration error at pixel and segment level.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::matching::{gt_segment, pred_segment, SegmentKey, SegmentMatching};
use super::MetricsError;
use crate::postprocess::PanopticMap;
use crate::reduce::pairwise_mean;
use crate::tensor_io::GroundTruth;
use crate::uncertainty::UncertaintyMap;
use crate::ClassId;

/// Bin of confidence `c` among `r` right-closed intervals
/// `[0, 1/r], (1/r, 2/r], ..., ((r-1)/r, 1]`.
pub fn bin_index(c: f64, r: usize) -> usize {
    let rf = r as f64;
    let mut b = ((c * rf).ceil() as usize).saturating_sub(1).min(r - 1);
    // c * r can round across an edge; settle against the edges b/r directly
    while b > 0 && c <= b as f64 / rf {
        b -= 1;
    }
    while b + 1 < r && c > (b + 1) as f64 / rf {
        b += 1;
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
    pub confidence: Option<f64>,
}

/// Running per-bin sums. Sums accumulate in push order, so merging
/// accumulators in a fixed order is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBins {
    r: usize,
    count: Vec<usize>,
    correct: Vec<usize>,
    conf_sum: Vec<f64>,
}

impl CalibrationBins {
    pub fn new(r: usize) -> Result<Self, MetricsError> {
        if r == 0 {
            return Err(MetricsError::InvalidBins);
        }
        Ok(Self {
            r,
            count: vec![0; r],
            correct: vec![0; r],
            conf_sum: vec![0.0; r],
        })
    }

    pub fn from_pixels(accuracy: &[bool], confidence: &[f64], r: usize) -> Result<Self, MetricsError> {
        if accuracy.len() != confidence.len() {
            return Err(MetricsError::ShapeMismatch(vec![accuracy.len()], vec![confidence.len()]));
        }
        let mut bins = Self::new(r)?;
        for (&a, &c) in accuracy.iter().zip(confidence) {
            bins.push(a, c)?;
        }
        Ok(bins)
    }

    pub fn push(&mut self, correct: bool, confidence: f64) -> Result<(), MetricsError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(MetricsError::InvalidConfidence(confidence));
        }
        let b = bin_index(confidence, self.r);
        self.count[b] += 1;
        self.correct[b] += correct as usize;
        self.conf_sum[b] += confidence;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.r, other.r, "bin counts differ");
        for b in 0..self.r {
            self.count[b] += other.count[b];
            self.correct[b] += other.correct[b];
            self.conf_sum[b] += other.conf_sum[b];
        }
    }

    pub fn num_bins(&self) -> usize {
        self.r
    }

    pub fn total(&self) -> usize {
        self.count.iter().sum()
    }

    /// `Σ_r |B_r|/N · |acc(B_r) − conf(B_r)|`; `None` when no pixel was pushed.
    pub fn ece(&self) -> Option<f64> {
        let n = self.total();
        if n == 0 {
            return None;
        }
        let mut e = 0.0;
        for b in 0..self.r {
            if self.count[b] == 0 {
                continue;
            }
            let nb = self.count[b] as f64;
            let acc = self.correct[b] as f64 / nb;
            let conf = self.conf_sum[b] / nb;
            e += nb / n as f64 * (acc - conf).abs();
        }
        Some(e)
    }

    pub fn stats(&self) -> Vec<BinStats> {
        (0..self.r)
            .map(|b| {
                let nb = self.count[b];
                BinStats {
                    lower: b as f64 / self.r as f64,
                    upper: (b + 1) as f64 / self.r as f64,
                    count: nb,
                    accuracy: (nb > 0).then(|| self.correct[b] as f64 / nb as f64),
                    confidence: (nb > 0).then(|| self.conf_sum[b] / nb as f64),
                }
            })
            .collect()
    }
}

/// Pixel-level uncertainty-aware ECE.
pub fn uece(accuracy: &[bool], confidence: &[f64], r: usize) -> Result<f64, MetricsError> {
    CalibrationBins::from_pixels(accuracy, confidence, r)?
        .ece()
        .ok_or(MetricsError::EmptyInput)
}

/// uECE of temperature-scaled softmax predictions: accuracy is
/// `argmax == label`, confidence the maximum class probability.
pub fn logit_uece(logits: ArrayView2<f64>, labels: &[usize], t: f64, r: usize) -> Result<f64, MetricsError> {
    if logits.nrows() != labels.len() {
        return Err(MetricsError::ShapeMismatch(logits.shape().to_vec(), vec![labels.len()]));
    }
    let mut acc = Vec::with_capacity(labels.len());
    let mut conf = Vec::with_capacity(labels.len());
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut best = 0;
        let mut z = 0.0;
        for (k, &v) in row.iter().enumerate() {
            z += ((v - m) / t).exp();
            if v > row[best] {
                best = k;
            }
        }
        acc.push(best == y);
        conf.push((1.0 / z).min(1.0));
    }
    uece(&acc, &conf, r)
}

/// Pixel accuracy rule for the segment-level ECE variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccuracyRule {
    /// Pixel lies in both `f` and its matched `g` with the correct class.
    Panoptic,
    /// Pixel lies in both `f` and its matched `g`.
    Spatial,
    /// Pixel carries the ground-truth class, whatever its instance.
    Semantic,
}

/// Per-segment calibration of one image: one uECE per TP or FP segment plus
/// bins pooled over all their pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCalibration {
    pub segment_ece: Vec<(SegmentKey, f64)>,
    pub pooled_bins: CalibrationBins,
}

impl SegmentCalibration {
    /// Mean segment uECE; `None` without TP or FP segments.
    pub fn mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.segment_ece.iter().map(|(_, e)| *e).collect();
        pairwise_mean(&v)
    }
}

/// Inputs shared by the segment-level ECE variants.
#[derive(Clone, Copy)]
pub struct SegmentContext<'a> {
    pub pred: &'a PanopticMap,
    pub gt: &'a GroundTruth,
    pub matching: &'a SegmentMatching,
    pub ignore_label: ClassId,
    pub thing_ids: &'a BTreeSet<ClassId>,
    pub bins: usize,
}

/// Average per-segment uECE over TP and FP segments. Each segment is
/// evaluated over its own pixels, excluding gt-ignore pixels.
pub fn segment_calibration(
    ctx: SegmentContext<'_>,
    uncertainty: &UncertaintyMap,
    rule: AccuracyRule,
) -> Result<SegmentCalibration, MetricsError> {
    let (h, w) = ctx.pred.dim();
    if ctx.gt.dim() != (h, w) || uncertainty.dim() != (h, w) {
        return Err(MetricsError::ShapeMismatch(
            vec![h, w],
            vec![uncertainty.dim().0, uncertainty.dim().1],
        ));
    }
    // None: false positive
    let mut evaluated: BTreeMap<SegmentKey, Option<SegmentKey>> = BTreeMap::new();
    for tp in &ctx.matching.true_positives {
        evaluated.insert(tp.pred, Some(tp.gt));
    }
    for fp in &ctx.matching.false_positives {
        evaluated.insert(*fp, None);
    }
    let mut per_segment: BTreeMap<SegmentKey, CalibrationBins> = BTreeMap::new();
    let mut pooled = CalibrationBins::new(ctx.bins)?;
    let (gc, gi) = (ctx.gt.semantic(), ctx.gt.instances());
    for (((idx, &pc), &pi), &u) in ctx
        .pred
        .class_id
        .indexed_iter()
        .zip(ctx.pred.instance_id.iter())
        .zip(uncertainty.values().iter())
    {
        let Some(f) = pred_segment(pc, pi, ctx.thing_ids) else {
            continue;
        };
        let Some(&partner) = evaluated.get(&f) else {
            continue;
        };
        let Some(g_here) = gt_segment(gc[idx], gi[idx], ctx.ignore_label) else {
            continue;
        };
        let correct = match (rule, partner) {
            (AccuracyRule::Semantic, _) => pc == g_here.class,
            (_, None) => false,
            (AccuracyRule::Spatial, Some(g)) => g_here == g,
            (AccuracyRule::Panoptic, Some(g)) => g_here == g && pc == g_here.class,
        };
        let conf = 1.0 - u;
        per_segment
            .entry(f)
            .or_insert_with(|| CalibrationBins::new(ctx.bins).expect("bins validated"))
            .push(correct, conf)?;
        pooled.push(correct, conf)?;
    }
    let segment_ece = per_segment
        .into_iter()
        .filter_map(|(k, b)| b.ece().map(|e| (k, e)))
        .collect();
    Ok(SegmentCalibration {
        segment_ece,
        pooled_bins: pooled,
    })
}

/// Segment-averaged ECE with total uncertainty; `None` without segments.
pub fn pece(ctx: SegmentContext<'_>, unc_total: &UncertaintyMap) -> Result<Option<f64>, MetricsError> {
    Ok(segment_calibration(ctx, unc_total, AccuracyRule::Panoptic)?.mean())
}

/// Spatial variant: instance-overlap accuracy against spatial confidence.
pub fn pece_spa(ctx: SegmentContext<'_>, unc_spa: &UncertaintyMap) -> Result<Option<f64>, MetricsError> {
    Ok(segment_calibration(ctx, unc_spa, AccuracyRule::Spatial)?.mean())
}

/// Semantic variant: class accuracy against semantic confidence.
pub fn pece_sem(ctx: SegmentContext<'_>, unc_sem: &UncertaintyMap) -> Result<Option<f64>, MetricsError> {
    Ok(segment_calibration(ctx, unc_sem, AccuracyRule::Semantic)?.mean())
}

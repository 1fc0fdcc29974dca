//! Segment extraction and IoU matching for Panoptic Quality.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::postprocess::PanopticMap;
use crate::tensor_io::GroundTruth;
use crate::{ClassId, InstanceId};

/// A panoptic segment: every pixel carrying this `(class, instance)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentKey {
    pub class: ClassId,
    pub instance: InstanceId,
}

impl SegmentKey {
    pub fn new(class: ClassId, instance: InstanceId) -> Self {
        Self { class, instance }
    }
}

/// Segment of a predicted pixel; thing pixels without an instance are void.
pub fn pred_segment(class: ClassId, instance: InstanceId, thing_ids: &BTreeSet<ClassId>) -> Option<SegmentKey> {
    if instance == 0 && thing_ids.contains(&class) {
        None
    } else {
        Some(SegmentKey::new(class, instance))
    }
}

/// Segment of a ground-truth pixel; ignore-label pixels are void.
pub fn gt_segment(class: ClassId, instance: InstanceId, ignore_label: ClassId) -> Option<SegmentKey> {
    (class != ignore_label).then(|| SegmentKey::new(class, instance))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruePositive {
    pub pred: SegmentKey,
    pub gt: SegmentKey,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentMatching {
    /// Sorted by gt segment.
    pub true_positives: Vec<TruePositive>,
    pub false_positives: Vec<SegmentKey>,
    pub false_negatives: Vec<SegmentKey>,
}

impl SegmentMatching {
    pub fn is_empty(&self) -> bool {
        self.true_positives.is_empty() && self.false_positives.is_empty() && self.false_negatives.is_empty()
    }

    pub fn gt_for(&self, pred: SegmentKey) -> Option<SegmentKey> {
        self.true_positives.iter().find(|tp| tp.pred == pred).map(|tp| tp.gt)
    }
}

/// Match predicted and ground-truth segments.
///
/// A pair is a true positive when both share a class and IoU > 0.5. The
/// prediction's overlap with gt void is removed from the union; unmatched
/// predictions lying more than half on void are not counted as false
/// positives.
pub fn match_segments(
    pred: &PanopticMap,
    gt: &GroundTruth,
    ignore_label: ClassId,
    thing_ids: &BTreeSet<ClassId>,
) -> Result<SegmentMatching, MetricsError> {
    if pred.dim() != gt.dim() {
        return Err(MetricsError::ShapeMismatch(
            vec![pred.dim().0, pred.dim().1],
            vec![gt.dim().0, gt.dim().1],
        ));
    }
    let mut pred_area: BTreeMap<SegmentKey, u64> = BTreeMap::new();
    let mut pred_void: BTreeMap<SegmentKey, u64> = BTreeMap::new();
    let mut gt_area: BTreeMap<SegmentKey, u64> = BTreeMap::new();
    let mut inter: BTreeMap<(SegmentKey, SegmentKey), u64> = BTreeMap::new();

    let pixels = pred
        .class_id
        .iter()
        .zip(pred.instance_id.iter())
        .zip(gt.semantic().iter().zip(gt.instances().iter()));
    for ((&pc, &pi), (&gc, &gi)) in pixels {
        let p = pred_segment(pc, pi, thing_ids);
        let g = gt_segment(gc, gi, ignore_label);
        if let Some(g) = g {
            *gt_area.entry(g).or_default() += 1;
        }
        if let Some(p) = p {
            *pred_area.entry(p).or_default() += 1;
            match g {
                Some(g) => *inter.entry((p, g)).or_default() += 1,
                None => *pred_void.entry(p).or_default() += 1,
            }
        }
    }

    let mut matched_pred = BTreeSet::new();
    let mut matched_gt = BTreeSet::new();
    let mut true_positives = Vec::new();
    for (&(p, g), &n) in &inter {
        if p.class != g.class {
            continue;
        }
        let union = pred_area[&p] - pred_void.get(&p).copied().unwrap_or(0) + gt_area[&g] - n;
        let iou = n as f64 / union as f64;
        if iou > 0.5 {
            matched_pred.insert(p);
            matched_gt.insert(g);
            true_positives.push(TruePositive { pred: p, gt: g, iou });
        }
    }
    true_positives.sort_by_key(|tp| tp.gt);

    let false_positives = pred_area
        .iter()
        .filter(|(p, _)| !matched_pred.contains(*p))
        .filter(|(p, &area)| pred_void.get(*p).copied().unwrap_or(0) * 2 <= area)
        .map(|(p, _)| *p)
        .collect();
    let false_negatives = gt_area.keys().filter(|g| !matched_gt.contains(*g)).copied().collect();
    Ok(SegmentMatching {
        true_positives,
        false_positives,
        false_negatives,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

impl ClassCounts {
    fn denom(&self) -> f64 {
        self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64
    }

    pub fn quality(&self) -> PanopticQuality {
        quality_from(self.tp, self.fp, self.fn_, self.iou_sum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanopticQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// No segment on either side: PQ is reported as 0.
    pub no_segments: bool,
}

fn quality_from(tp: usize, fp: usize, fn_: usize, iou_sum: f64) -> PanopticQuality {
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    if denom == 0.0 {
        return PanopticQuality {
            pq: 0.0,
            sq: 0.0,
            rq: 0.0,
            no_segments: true,
        };
    }
    PanopticQuality {
        pq: iou_sum / denom,
        sq: if tp > 0 { iou_sum / tp as f64 } else { 0.0 },
        rq: tp as f64 / denom,
        no_segments: false,
    }
}

/// Panoptic Quality of one matching, with per-class counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PqSummary {
    /// Pooled over all segments: `Σ IoU / (TP + FP/2 + FN/2)`.
    pub overall: PanopticQuality,
    pub per_class: BTreeMap<ClassId, ClassCounts>,
}

impl PqSummary {
    /// Unweighted mean of per-class PQ/SQ/RQ over classes with any segment.
    pub fn class_mean(&self) -> Option<PanopticQuality> {
        class_mean(&self.per_class)
    }
}

pub(crate) fn class_mean(per_class: &BTreeMap<ClassId, ClassCounts>) -> Option<PanopticQuality> {
    let qs: Vec<PanopticQuality> = per_class
        .values()
        .filter(|c| c.denom() > 0.0)
        .map(ClassCounts::quality)
        .collect();
    if qs.is_empty() {
        return None;
    }
    let n = qs.len() as f64;
    Some(PanopticQuality {
        pq: qs.iter().map(|q| q.pq).sum::<f64>() / n,
        sq: qs.iter().map(|q| q.sq).sum::<f64>() / n,
        rq: qs.iter().map(|q| q.rq).sum::<f64>() / n,
        no_segments: false,
    })
}

pub fn panoptic_quality(matching: &SegmentMatching) -> PqSummary {
    let mut per_class: BTreeMap<ClassId, ClassCounts> = BTreeMap::new();
    // TPs are sorted by gt segment; sum in that order
    let mut iou_sum = 0.0;
    for tp in &matching.true_positives {
        iou_sum += tp.iou;
        let c = per_class.entry(tp.gt.class).or_default();
        c.tp += 1;
        c.iou_sum += tp.iou;
    }
    for fp in &matching.false_positives {
        per_class.entry(fp.class).or_default().fp += 1;
    }
    for fn_ in &matching.false_negatives {
        per_class.entry(fn_.class).or_default().fn_ += 1;
    }
    PqSummary {
        overall: quality_from(
            matching.true_positives.len(),
            matching.false_positives.len(),
            matching.false_negatives.len(),
            iou_sum,
        ),
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn things() -> BTreeSet<ClassId> {
        [1].into_iter().collect()
    }

    fn map(class: Vec<u32>, inst: Vec<u32>, w: usize) -> (Array2<u32>, Array2<u32>) {
        let h = class.len() / w;
        (
            Array2::from_shape_vec((h, w), class).unwrap(),
            Array2::from_shape_vec((h, w), inst).unwrap(),
        )
    }

    #[test]
    fn identical_maps_match_perfectly() {
        let (c, i) = map(vec![0, 0, 1, 1, 1, 1, 0, 0], vec![0, 0, 1, 1, 2, 2, 0, 0], 4);
        let gt = GroundTruth::new(c.clone(), i.clone()).unwrap();
        let pred = PanopticMap { class_id: c, instance_id: i };
        let m = match_segments(&pred, &gt, 255, &things()).unwrap();
        assert_eq!(m.true_positives.len(), 3);
        assert!(m.true_positives.iter().all(|tp| tp.iou == 1.0));
        assert_eq!(panoptic_quality(&m).overall.pq, 1.0);
    }

    #[test]
    fn sixty_percent_overlap() {
        // gt instance covers 100 pixels; prediction covers 60 of them, nothing else
        let w = 100;
        let gt = GroundTruth::new(Array2::from_elem((1, w), 1), Array2::from_elem((1, w), 1)).unwrap();
        let mut pc = Array2::from_elem((1, w), 1);
        let mut pi = Array2::from_elem((1, w), 1);
        for x in 60..w {
            pc[[0, x]] = 0;
            pi[[0, x]] = 0;
        }
        let pred = PanopticMap { class_id: pc, instance_id: pi };
        let m = match_segments(&pred, &gt, 255, &things()).unwrap();
        assert_eq!(m.true_positives.len(), 1);
        assert!((m.true_positives[0].iou - 0.6).abs() < 1e-15);
        // stuff prediction of class 0 has no gt counterpart
        assert_eq!(m.false_positives, vec![SegmentKey::new(0, 0)]);
    }

    #[test]
    fn disjoint_segments() {
        let gt = GroundTruth::new(
            Array2::from_shape_vec((1, 4), vec![1, 1, 0, 0]).unwrap(),
            Array2::from_shape_vec((1, 4), vec![1, 1, 0, 0]).unwrap(),
        )
        .unwrap();
        let pred = PanopticMap {
            class_id: Array2::from_shape_vec((1, 4), vec![0, 0, 1, 1]).unwrap(),
            instance_id: Array2::from_shape_vec((1, 4), vec![0, 0, 1, 1]).unwrap(),
        };
        let m = match_segments(&pred, &gt, 255, &things()).unwrap();
        assert!(m.true_positives.is_empty());
        assert_eq!(m.false_positives.len(), 2);
        assert_eq!(m.false_negatives.len(), 2);
    }

    #[test]
    fn pq_formula_by_hand() {
        let m = SegmentMatching {
            true_positives: vec![TruePositive {
                pred: SegmentKey::new(1, 1),
                gt: SegmentKey::new(1, 1),
                iou: 0.6,
            }],
            false_positives: vec![SegmentKey::new(1, 2)],
            false_negatives: vec![SegmentKey::new(1, 3)],
        };
        let q = panoptic_quality(&m).overall;
        assert!((q.pq - 0.3).abs() < 1e-15);
        assert!((q.pq - q.sq * q.rq).abs() < 1e-12);
    }

    #[test]
    fn empty_prediction_and_no_segments() {
        let m = SegmentMatching {
            false_negatives: vec![SegmentKey::new(0, 0)],
            ..Default::default()
        };
        assert_eq!(panoptic_quality(&m).overall.pq, 0.0);
        let q = panoptic_quality(&SegmentMatching::default()).overall;
        assert!(q.no_segments);
        assert_eq!(q.pq, 0.0);
    }

    #[test]
    fn void_overlap_removed_from_union() {
        // gt: 4 thing pixels + 4 ignore; pred thing covers all 8
        let gt = GroundTruth::new(
            Array2::from_shape_vec((1, 8), vec![1, 1, 1, 1, 255, 255, 255, 255]).unwrap(),
            Array2::from_shape_vec((1, 8), vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap(),
        )
        .unwrap();
        let pred = PanopticMap {
            class_id: Array2::from_elem((1, 8), 1),
            instance_id: Array2::from_elem((1, 8), 1),
        };
        let m = match_segments(&pred, &gt, 255, &things()).unwrap();
        assert_eq!(m.true_positives[0].iou, 1.0);
    }
}

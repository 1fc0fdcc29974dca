//! Per-image evaluation and the pooled, serializable metric report.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::calibration::{segment_calibration, AccuracyRule, BinStats, CalibrationBins, SegmentCalibration, SegmentContext};
use super::distribution::{energy_score_terms, offset_stats_accumulate, GaussianSampling, MeanAccumulator, OffsetStatsAccumulator};
use super::matching::{class_mean, match_segments, panoptic_quality, ClassCounts, PanopticQuality};
use super::oracle::{oracle_substitute, OracleOptions};
use super::MetricsError;
use crate::postprocess::{run_pipeline, PipelineConfig};
use crate::reduce::pairwise_mean;
use crate::tensor_io::{GroundTruth, PredictionBundle};
use crate::uncertainty::UncertaintyMap;
use crate::ClassId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub pipeline: PipelineConfig,
    pub bins: usize,
    pub oracle: OracleOptions,
    /// Samples per pixel when scoring Gaussian offsets; image `i` uses seed
    /// `seed + i`.
    pub es_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            bins: 10,
            oracle: OracleOptions::default(),
            es_samples: 10,
            seed: 0,
        }
    }
}

/// Everything measured on one image, kept as mergeable sums.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEvaluation {
    pub per_class: BTreeMap<ClassId, ClassCounts>,
    pub overall: PanopticQuality,
    pub pece: SegmentCalibration,
    pub pece_spa: SegmentCalibration,
    pub pece_sem: SegmentCalibration,
    /// Pixel-level semantic calibration over non-ignore pixels.
    pub pixel_bins: CalibrationBins,
    pub energy: MeanAccumulator,
    pub offsets: OffsetStatsAccumulator,
}

/// Decode one bundle (after optional oracle substitution) and score it.
pub fn evaluate_image(
    bundle: &PredictionBundle,
    gt: &GroundTruth,
    config: &EvalConfig,
    image_index: u64,
) -> Result<ImageEvaluation, MetricsError> {
    let substituted;
    let bundle = if config.oracle.any() {
        substituted = oracle_substitute(bundle, gt, config.oracle)?;
        &substituted
    } else {
        bundle
    };
    let out = run_pipeline(bundle, &config.pipeline)?;
    let matching = match_segments(&out.panoptic, gt, bundle.ignore_label, &bundle.thing_ids)?;
    let pq = panoptic_quality(&matching);
    let ctx = SegmentContext {
        pred: &out.panoptic,
        gt,
        matching: &matching,
        ignore_label: bundle.ignore_label,
        thing_ids: &bundle.thing_ids,
        bins: config.bins,
    };
    let (h, w) = out.panoptic.dim();
    // point offsets carry no spatial uncertainty: fully confident
    let unc_spa = out.unc_spa.clone().unwrap_or_else(|| UncertaintyMap::zeros(h, w));

    let mut pixel_bins = CalibrationBins::new(config.bins)?;
    for ((idx, &g), &p) in gt.semantic().indexed_iter().zip(out.semantic_argmax.iter()) {
        if g != bundle.ignore_label {
            pixel_bins.push(p == g, out.unc_sem.confidence(idx.0, idx.1))?;
        }
    }

    let gt_offsets = gt.offsets(&bundle.thing_ids);
    let mask: Array2<bool> = gt.thing_mask(&bundle.thing_ids);
    let sampling = GaussianSampling {
        samples: config.es_samples,
        seed: config.seed.wrapping_add(image_index),
    };
    let energy = MeanAccumulator::from_values(&energy_score_terms(&bundle.offsets, gt_offsets.view(), mask.view(), sampling)?);
    let offsets = offset_stats_accumulate(&bundle.offsets, gt_offsets.view(), mask.view())?;

    Ok(ImageEvaluation {
        per_class: pq.per_class,
        overall: pq.overall,
        pece: segment_calibration(ctx, &out.unc_total, AccuracyRule::Panoptic)?,
        pece_spa: segment_calibration(ctx, &unc_spa, AccuracyRule::Spatial)?,
        pece_sem: segment_calibration(ctx, &out.unc_sem, AccuracyRule::Semantic)?,
        pixel_bins,
        energy,
        offsets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// TP + FP segments entering the pECE averages.
    pub calibrated_segments: usize,
    /// Pixels entering the pixel-level uECE.
    pub pixels: usize,
}

/// Metrics for one image in per-image mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub name: String,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub uece: Option<f64>,
    pub pece: Option<f64>,
    pub pece_spa: Option<f64>,
    pub pece_sem: Option<f64>,
    pub energy_score: Option<f64>,
    pub avg_offset_length: Option<f64>,
    pub offset_rmse: Option<f64>,
}

/// Echo of every setting that can change a reported number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub bundles: Vec<String>,
    pub bins: usize,
    pub heatmap_threshold: f64,
    pub nms_kernel: usize,
    pub top_k: usize,
    pub semantic_uncertainty: Option<String>,
    pub max_variance: Option<f64>,
    pub es_samples: usize,
    pub seed: u64,
    pub oracle_centers: bool,
    pub oracle_semantics: bool,
    pub oracle_offsets: bool,
    pub per_image: bool,
}

impl ConfigEcho {
    pub fn new(config: &EvalConfig, bundles: Vec<String>, per_image: bool) -> Self {
        let p = &config.pipeline;
        Self {
            bundles,
            bins: config.bins,
            heatmap_threshold: p.postprocess.heatmap_threshold,
            nms_kernel: p.postprocess.nms_kernel,
            top_k: p.postprocess.top_k,
            semantic_uncertainty: p.semantic_mode.map(|m| m.to_string()),
            max_variance: p.variance_normalizer.map(|n| n.max_total_variance()),
            es_samples: config.es_samples,
            seed: config.seed,
            oracle_centers: config.oracle.centers,
            oracle_semantics: config.oracle.semantics,
            oracle_offsets: config.oracle.offsets,
            per_image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub pece: Vec<BinStats>,
    pub pece_spa: Vec<BinStats>,
    pub pece_sem: Vec<BinStats>,
    pub uece: Vec<BinStats>,
}

/// Dataset-level metrics. Segment metrics pool all segments of all images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub no_segments: bool,
    pub pq_class_mean: Option<f64>,
    pub sq_class_mean: Option<f64>,
    pub rq_class_mean: Option<f64>,
    pub per_class: BTreeMap<ClassId, ClassReport>,
    pub counts: SegmentCounts,
    pub uece: Option<f64>,
    pub pece: Option<f64>,
    pub pece_spa: Option<f64>,
    pub pece_sem: Option<f64>,
    pub energy_score: Option<f64>,
    pub avg_offset_length: Option<f64>,
    pub offset_rmse: Option<f64>,
    pub bins: ReliabilityBins,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageReport>,
    pub config: ConfigEcho,
}

fn segment_mean<'a>(parts: impl Iterator<Item = &'a SegmentCalibration>) -> Option<f64> {
    let all: Vec<f64> = parts.flat_map(|s| s.segment_ece.iter().map(|(_, e)| *e)).collect();
    pairwise_mean(&all)
}

fn pooled_bins<'a>(bins: usize, parts: impl Iterator<Item = &'a CalibrationBins>) -> CalibrationBins {
    let mut acc = CalibrationBins::new(bins).expect("bins validated by the images");
    for p in parts {
        acc.merge(p);
    }
    acc
}

impl MetricReport {
    /// Pool image evaluations in the given order. `names` labels images
    /// when `per_image` is set.
    pub fn pool(images: &[ImageEvaluation], names: &[String], echo: ConfigEcho) -> Self {
        let bins = echo.bins;
        let mut per_class: BTreeMap<ClassId, ClassCounts> = BTreeMap::new();
        for img in images {
            for (&c, counts) in &img.per_class {
                let e = per_class.entry(c).or_default();
                e.tp += counts.tp;
                e.fp += counts.fp;
                e.fn_ += counts.fn_;
                e.iou_sum += counts.iou_sum;
            }
        }
        let total = per_class.values().fold(ClassCounts::default(), |mut a, c| {
            a.tp += c.tp;
            a.fp += c.fp;
            a.fn_ += c.fn_;
            a.iou_sum += c.iou_sum;
            a
        });
        let overall = total.quality();
        let cm = class_mean(&per_class);

        let pece_bins = pooled_bins(bins, images.iter().map(|i| &i.pece.pooled_bins));
        let spa_bins = pooled_bins(bins, images.iter().map(|i| &i.pece_spa.pooled_bins));
        let sem_bins = pooled_bins(bins, images.iter().map(|i| &i.pece_sem.pooled_bins));
        let pixel_bins = pooled_bins(bins, images.iter().map(|i| &i.pixel_bins));

        let mut energy = MeanAccumulator::default();
        let mut offsets = OffsetStatsAccumulator::default();
        for img in images {
            energy.merge(&img.energy);
            offsets.merge(&img.offsets);
        }
        let stats = offsets.finish();

        let image_reports = if echo.per_image {
            images
                .iter()
                .zip(names)
                .map(|(img, name)| {
                    let s = img.offsets.finish();
                    ImageReport {
                        name: name.clone(),
                        pq: img.overall.pq,
                        sq: img.overall.sq,
                        rq: img.overall.rq,
                        uece: img.pixel_bins.ece(),
                        pece: img.pece.mean(),
                        pece_spa: img.pece_spa.mean(),
                        pece_sem: img.pece_sem.mean(),
                        energy_score: img.energy.mean(),
                        avg_offset_length: s.map(|s| s.avg_length),
                        offset_rmse: s.map(|s| s.rmse),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };

        Self {
            pq: overall.pq,
            sq: overall.sq,
            rq: overall.rq,
            no_segments: overall.no_segments,
            pq_class_mean: cm.map(|q| q.pq),
            sq_class_mean: cm.map(|q| q.sq),
            rq_class_mean: cm.map(|q| q.rq),
            per_class: per_class
                .iter()
                .map(|(&c, k)| {
                    let q = k.quality();
                    (
                        c,
                        ClassReport {
                            pq: q.pq,
                            sq: q.sq,
                            rq: q.rq,
                            tp: k.tp,
                            fp: k.fp,
                            fn_: k.fn_,
                        },
                    )
                })
                .collect(),
            counts: SegmentCounts {
                tp: total.tp,
                fp: total.fp,
                fn_: total.fn_,
                calibrated_segments: images.iter().map(|i| i.pece.segment_ece.len()).sum(),
                pixels: pixel_bins.total(),
            },
            uece: pixel_bins.ece(),
            pece: segment_mean(images.iter().map(|i| &i.pece)),
            pece_spa: segment_mean(images.iter().map(|i| &i.pece_spa)),
            pece_sem: segment_mean(images.iter().map(|i| &i.pece_sem)),
            energy_score: energy.mean(),
            avg_offset_length: stats.map(|s| s.avg_length),
            offset_rmse: stats.map(|s| s.rmse),
            bins: ReliabilityBins {
                pece: pece_bins.stats(),
                pece_spa: spa_bins.stats(),
                pece_sem: sem_bins.stats(),
                uece: pixel_bins.stats(),
            },
            images: image_reports,
            config: echo,
        }
    }
}

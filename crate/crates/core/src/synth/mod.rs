//! Seeded synthetic scenes with exact ground truth.
//!
//! Layout: stuff classes `[0, num_stuff)` fill horizontal bands; thing
//! classes `[num_stuff, C)` are non-overlapping rectangles or discs painted
//! on top. Predictions are derived from the ground truth by the configured
//! corruptions; with all noise at zero the bundle decodes back to the gt.

mod oracles;

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::spatial::{OffsetField, VAR_FLOOR};
use crate::tensor_io::{GroundTruth, PredictionBundle, SemanticPrediction};
use crate::{ClassId, InstanceId};

pub use oracles::{brute_force_pq, brute_force_uece, random_panoptic_pair};

/// Floor applied to `ln q` before scaling, so one-hot probabilities stay finite.
pub const LOG_PROB_FLOOR: f64 = -100.0;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("could not place instance {instance} without overlap after {attempts} attempts")]
    ConfigInfeasible { instance: usize, attempts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Rectangles,
    Discs,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Uniform random positions, rejecting overlaps.
    Random,
    /// One instance centred in each cell of a near-square grid.
    Grid,
}

/// How predicted confidence relates to the empirical flip rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibrationMode {
    /// Softmax confidence equals the probability the label is correct.
    Perfect,
    /// Calibrated log-probabilities multiplied by the factor (> 1 sharpens).
    Overconfident(f64),
    /// Calibrated log-probabilities divided by the factor.
    Underconfident(f64),
}

impl CalibrationMode {
    fn logit_scale(self) -> f64 {
        match self {
            CalibrationMode::Perfect => 1.0,
            CalibrationMode::Overconfident(k) => k,
            CalibrationMode::Underconfident(k) => 1.0 / k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetModel {
    Point,
    Gaussian,
    /// `M` samples per pixel.
    Samples(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Stuff classes are `[0, num_stuff)`; the rest are thing classes.
    pub num_stuff: usize,
    pub num_instances: usize,
    pub shapes: ShapeFamily,
    pub layout: Layout,
    /// Half-extent range (pixels) of rectangles and disc radii.
    pub min_half_size: usize,
    pub max_half_size: usize,
    /// Mean probability that a pixel's predicted label is wrong.
    pub flip_rate: f64,
    pub calibration: CalibrationMode,
    /// Std-dev (pixels) of the offset error; also the predicted spread.
    pub offset_sigma: f64,
    pub offset_model: OffsetModel,
    /// Std-dev of the Gaussian bumps drawn in the center heatmap.
    pub heatmap_sigma: f64,
    /// Std-dev (pixels) of the displacement of predicted centers.
    pub center_jitter: f64,
    /// Extra false centers at random positions.
    pub spurious_centers: usize,
    pub ignore_label: ClassId,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 4,
            num_stuff: 2,
            num_instances: 4,
            shapes: ShapeFamily::Mixed,
            layout: Layout::Random,
            min_half_size: 4,
            max_half_size: 10,
            flip_rate: 0.0,
            calibration: CalibrationMode::Perfect,
            offset_sigma: 0.0,
            offset_model: OffsetModel::Point,
            heatmap_sigma: 2.0,
            center_jitter: 0.0,
            spurious_centers: 0,
            ignore_label: 255,
            seed: 0,
        }
    }
}

/// Placement attempts per instance before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.height == 0 || self.width == 0 {
            return bad("image must be non-empty".into());
        }
        if self.num_stuff == 0 || self.num_stuff >= self.num_classes {
            return bad(format!(
                "need 1 <= num_stuff < num_classes, got {} of {}",
                self.num_stuff, self.num_classes
            ));
        }
        if (self.ignore_label as usize) < self.num_classes {
            return bad(format!("ignore label {} collides with a class id", self.ignore_label));
        }
        if self.min_half_size == 0 || self.min_half_size > self.max_half_size {
            return bad(format!(
                "half-size range [{}, {}] invalid",
                self.min_half_size, self.max_half_size
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_rate) {
            return bad(format!("flip rate {} outside [0, 1]", self.flip_rate));
        }
        for (name, v) in [
            ("offset_sigma", self.offset_sigma),
            ("center_jitter", self.center_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.heatmap_sigma > 0.0 && self.heatmap_sigma.is_finite()) {
            return bad(format!("heatmap_sigma must be positive, got {}", self.heatmap_sigma));
        }
        match self.calibration {
            CalibrationMode::Overconfident(k) | CalibrationMode::Underconfident(k) if !(k > 0.0 && k.is_finite()) => {
                return bad(format!("calibration factor must be positive, got {k}"));
            }
            _ => {}
        }
        if self.offset_model == OffsetModel::Samples(0) {
            return bad("sample count must be >= 1".into());
        }
        Ok(())
    }

    pub fn thing_ids(&self) -> BTreeSet<ClassId> {
        (self.num_stuff as ClassId..self.num_classes as ClassId).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub gt: GroundTruth,
    pub bundle: PredictionBundle,
    /// Exact offsets `(dx, dy)` to each thing pixel's center of mass.
    pub gt_offsets: Array3<f64>,
    /// Mean of the offset distribution the bundle encodes; the gt offset
    /// is distributed as N(mean, σ²) around it.
    pub offset_mean: Array3<f64>,
    pub offset_sigma: f64,
    /// Mean ‖gt offset‖ over thing pixels (0 without thing pixels).
    pub mean_offset_length: f64,
    /// Per-pixel probability that the predicted label is correct.
    pub label_confidence: Array2<f64>,
    /// Instance centers of mass `(y, x)`, by instance id - 1.
    pub centers: Vec<(f64, f64)>,
}

struct Shape {
    disc: bool,
    cy: i64,
    cx: i64,
    hy: i64,
    hx: i64,
}

impl Shape {
    fn contains(&self, y: i64, x: i64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        if self.disc {
            dy * dy + dx * dx <= self.hy * self.hy
        } else {
            dy.abs() <= self.hy && dx.abs() <= self.hx
        }
    }

    fn pixels(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        (self.cy - self.hy..=self.cy + self.hy)
            .flat_map(move |y| (self.cx - self.hx..=self.cx + self.hx).map(move |x| (y, x)))
            .filter(|&(y, x)| self.contains(y, x))
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn draw_shape(rng: &mut ChaCha8Rng, cfg: &SceneConfig, cy: Option<(i64, i64)>) -> Option<Shape> {
    let disc = match cfg.shapes {
        ShapeFamily::Rectangles => false,
        ShapeFamily::Discs => true,
        ShapeFamily::Mixed => rng.gen_bool(0.5),
    };
    let (lo, hi) = (cfg.min_half_size as i64, cfg.max_half_size as i64);
    let hy = rng.gen_range(lo..=hi);
    let hx = if disc { hy } else { rng.gen_range(lo..=hi) };
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    if 2 * hy + 1 > h || 2 * hx + 1 > w {
        return None;
    }
    let (cy, cx) = match cy {
        Some(c) => c,
        None => (rng.gen_range(hy..h - hy), rng.gen_range(hx..w - hx)),
    };
    let fits = cy - hy >= 0 && cy + hy < h && cx - hx >= 0 && cx + hx < w;
    fits.then_some(Shape { disc, cy, cx, hy, hx })
}

fn place_instances(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Result<Vec<Shape>, SynthError> {
    let mut occupied = Array2::from_elem((cfg.height, cfg.width), false);
    let mut shapes = Vec::with_capacity(cfg.num_instances);
    let grid = (cfg.num_instances as f64).sqrt().ceil().max(1.0) as usize;
    for i in 0..cfg.num_instances {
        let anchor = match cfg.layout {
            Layout::Random => None,
            Layout::Grid => {
                let rows = cfg.num_instances.div_ceil(grid);
                let (r, c) = (i / grid, i % grid);
                let cy = ((2 * r + 1) * cfg.height / (2 * rows)) as i64;
                let cx = ((2 * c + 1) * cfg.width / (2 * grid)) as i64;
                Some((cy, cx))
            }
        };
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let Some(shape) = draw_shape(rng, cfg, anchor) else {
                continue;
            };
            if shape.pixels().all(|(y, x)| !occupied[[y as usize, x as usize]]) {
                placed = Some(shape);
                break;
            }
        }
        let shape = placed.ok_or(SynthError::ConfigInfeasible {
            instance: i + 1,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        for (y, x) in shape.pixels() {
            occupied[[y as usize, x as usize]] = true;
        }
        shapes.push(shape);
    }
    Ok(shapes)
}

/// Generate a scene. Identical configs give bitwise identical scenes.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w, c) = (cfg.height, cfg.width, cfg.num_classes);

    let mut class_id = Array2::from_shape_fn((h, w), |(y, _)| ((y * cfg.num_stuff) / h) as ClassId);
    let mut instance_id: Array2<InstanceId> = Array2::zeros((h, w));
    let shapes = place_instances(&mut rng, cfg)?;
    let n_things = (c - cfg.num_stuff) as u32;
    let mut centers = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        let class = cfg.num_stuff as ClassId + rng.gen_range(0..n_things);
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for (y, x) in shape.pixels() {
            class_id[[y as usize, x as usize]] = class;
            instance_id[[y as usize, x as usize]] = i as InstanceId + 1;
            sy += y as f64;
            sx += x as f64;
            n += 1.0;
        }
        centers.push((sy / n, sx / n));
    }

    let mut gt_offsets = Array3::zeros((h, w, 2));
    let mut length_sum = 0.0;
    let mut thing_pixels = 0usize;
    for ((y, x), &inst) in instance_id.indexed_iter() {
        if inst > 0 {
            let (cy, cx) = centers[inst as usize - 1];
            let (dx, dy) = (cx - x as f64, cy - y as f64);
            gt_offsets[[y, x, 0]] = dx;
            gt_offsets[[y, x, 1]] = dy;
            length_sum += dx.hypot(dy);
            thing_pixels += 1;
        }
    }
    let mean_offset_length = if thing_pixels > 0 { length_sum / thing_pixels as f64 } else { 0.0 };

    // semantics: label correct with probability p, p spread uniformly around 1 - flip_rate
    let f = cfg.flip_rate;
    let p_min = 1.0 / c as f64 + 1e-3;
    let scale = cfg.calibration.logit_scale();
    let mut logits = Array3::zeros((h, w, c));
    let mut label_confidence = Array2::zeros((h, w));
    for ((y, x), &g) in class_id.indexed_iter() {
        let (p, label) = if f == 0.0 {
            (1.0, g as usize)
        } else {
            let p = (1.0 - 2.0 * f * rng.gen::<f64>()).max(p_min);
            let label = if rng.gen_bool(p) {
                g as usize
            } else {
                let k = rng.gen_range(0..c - 1);
                if k >= g as usize { k + 1 } else { k }
            };
            (p, label)
        };
        label_confidence[[y, x]] = p;
        let rest = (1.0 - p) / (c - 1) as f64;
        for k in 0..c {
            let q = if k == label { p } else { rest };
            let lq = if q > 0.0 { q.ln().max(LOG_PROB_FLOOR) } else { LOG_PROB_FLOOR };
            logits[[y, x, k]] = scale * lq;
        }
    }

    // heatmap: max of Gaussian bumps at (jittered) rounded centers
    let mut peaks: Vec<(i64, i64)> = centers
        .iter()
        .map(|&(cy, cx)| {
            let (jy, jx) = if cfg.center_jitter > 0.0 {
                (cfg.center_jitter * normal(&mut rng), cfg.center_jitter * normal(&mut rng))
            } else {
                (0.0, 0.0)
            };
            (
                ((cy + jy).round() as i64).clamp(0, h as i64 - 1),
                ((cx + jx).round() as i64).clamp(0, w as i64 - 1),
            )
        })
        .collect();
    for _ in 0..cfg.spurious_centers {
        peaks.push((rng.gen_range(0..h as i64), rng.gen_range(0..w as i64)));
    }
    let two_s2 = 2.0 * cfg.heatmap_sigma * cfg.heatmap_sigma;
    let mut heatmap = Array2::zeros((h, w));
    for ((y, x), v) in heatmap.indexed_iter_mut() {
        for &(py, px) in &peaks {
            let d2 = ((y as i64 - py).pow(2) + (x as i64 - px).pow(2)) as f64;
            *v = f64::max(*v, (-d2 / two_s2).exp());
        }
    }

    // offsets: predicted mean = gt + N(0, σ²); samples are drawn around that mean
    let sigma = cfg.offset_sigma;
    let mut offset_mean = gt_offsets.clone();
    if sigma > 0.0 {
        for v in offset_mean.iter_mut() {
            *v += sigma * normal(&mut rng);
        }
    }
    let offsets = match cfg.offset_model {
        OffsetModel::Point => OffsetField::Point(offset_mean.clone()),
        OffsetModel::Gaussian => OffsetField::Gaussian {
            mean: offset_mean.clone(),
            var: Array3::from_elem((h, w, 2), (sigma * sigma).max(VAR_FLOOR)),
        },
        OffsetModel::Samples(m) => {
            let mut s = Array4::zeros((h, w, m, 2));
            for ((y, x, _, a), v) in s.indexed_iter_mut() {
                *v = offset_mean[[y, x, a]];
                if sigma > 0.0 {
                    *v += sigma * normal(&mut rng);
                }
            }
            OffsetField::Samples(s)
        }
    };

    let gt = GroundTruth::new(class_id, instance_id).expect("same shape");
    let bundle = PredictionBundle {
        semantic: SemanticPrediction::Logits(logits),
        temperature: 1.0,
        center_heatmap: heatmap,
        offsets,
        thing_ids: cfg.thing_ids(),
        ignore_label: cfg.ignore_label,
    };
    Ok(SyntheticScene {
        gt,
        bundle,
        gt_offsets,
        offset_mean,
        offset_sigma: sigma,
        mean_offset_length,
        label_confidence,
        centers,
    })
}

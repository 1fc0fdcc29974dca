//! Offset-distribution kernels.
//!
//! Offsets are `(dx, dy)` pixel vectors from a pixel to its instance center.
//! A field is either a point estimate, a diagonal Gaussian, or `M` samples
//! per pixel.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::reduce::pairwise_sum;
use crate::rng::NormalStream;
use crate::tensor_io::{Tensor, TensorData};
use crate::uncertainty::UncertaintyMap;
use crate::Reduction;

/// Minimum variance (pixels²) accepted by the Gaussian NLL.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SpatialError {
    #[error("expected {expected:?} offsets, got {found:?}")]
    KindMismatch { expected: OffsetKind, found: OffsetKind },
    #[error("variance {value} below floor {VAR_FLOOR} at flat index {index}")]
    VarianceBelowFloor { index: usize, value: f64 },
    #[error("non-positive variance {value} at flat index {index}")]
    NonPositiveVariance { index: usize, value: f64 },
    #[error("non-finite offset value at flat index {0}")]
    NonFinite(usize),
    #[error("offset tensor shape {0:?} does not match the offset kind")]
    BadShape(Vec<usize>),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("sample count must be >= 1")]
    NoSamples,
    #[error("max total variance must be positive and finite, got {0}")]
    InvalidNormalizer(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetKind {
    Point,
    Gaussian,
    Samples,
}

impl OffsetKind {
    pub fn name(self) -> &'static str {
        match self {
            OffsetKind::Point => "point",
            OffsetKind::Gaussian => "gaussian",
            OffsetKind::Samples => "samples",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OffsetField {
    /// H×W×2 offsets.
    Point(Array3<f64>),
    /// H×W×2 means and H×W×2 per-axis variances (diagonal covariance).
    Gaussian { mean: Array3<f64>, var: Array3<f64> },
    /// H×W×M×2 samples.
    Samples(Array4<f64>),
}

impl OffsetField {
    pub fn kind(&self) -> OffsetKind {
        match self {
            OffsetField::Point(_) => OffsetKind::Point,
            OffsetField::Gaussian { .. } => OffsetKind::Gaussian,
            OffsetField::Samples(_) => OffsetKind::Samples,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        match self {
            OffsetField::Point(m) | OffsetField::Gaussian { mean: m, .. } => (m.dim().0, m.dim().1),
            OffsetField::Samples(s) => (s.dim().0, s.dim().1),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            OffsetField::Point(m) => m.shape().to_vec(),
            OffsetField::Gaussian { mean, .. } => {
                let (h, w, _) = mean.dim();
                vec![h, w, 4]
            }
            OffsetField::Samples(s) => s.shape().to_vec(),
        }
    }

    /// Samples per pixel; 1 for point and Gaussian fields.
    pub fn num_samples(&self) -> usize {
        match self {
            OffsetField::Samples(s) => s.len_of(Axis(2)),
            _ => 1,
        }
    }

    /// The point estimate carried forward to grouping: the offset itself or
    /// the Gaussian mean. `None` for sample fields.
    pub fn point_estimate(&self) -> Option<ArrayView3<'_, f64>> {
        match self {
            OffsetField::Point(m) | OffsetField::Gaussian { mean: m, .. } => Some(m.view()),
            OffsetField::Samples(_) => None,
        }
    }

    /// Offset vectors at a pixel: the point estimate, or every sample.
    pub fn vectors_at(&self, y: usize, x: usize) -> Vec<[f64; 2]> {
        match self {
            OffsetField::Point(m) | OffsetField::Gaussian { mean: m, .. } => vec![[m[[y, x, 0]], m[[y, x, 1]]]],
            OffsetField::Samples(s) => (0..s.len_of(Axis(2)))
                .map(|j| [s[[y, x, j, 0]], s[[y, x, j, 1]]])
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), SpatialError> {
        fn finite<'a>(mut a: impl Iterator<Item = &'a f64>) -> Result<(), SpatialError> {
            match a.position(|v| !v.is_finite()) {
                Some(i) => Err(SpatialError::NonFinite(i)),
                None => Ok(()),
            }
        }
        match self {
            OffsetField::Point(m) => {
                if m.len_of(Axis(2)) != 2 {
                    return Err(SpatialError::BadShape(m.shape().to_vec()));
                }
                finite(m.iter())
            }
            OffsetField::Gaussian { mean, var } => {
                if mean.len_of(Axis(2)) != 2 || mean.dim() != var.dim() {
                    return Err(SpatialError::BadShape(mean.shape().to_vec()));
                }
                finite(mean.iter())?;
                finite(var.iter())?;
                match var.iter().position(|&v| v <= 0.0) {
                    Some(index) => Err(SpatialError::NonPositiveVariance {
                        index,
                        value: var.iter().nth(index).copied().unwrap_or_default(),
                    }),
                    None => Ok(()),
                }
            }
            OffsetField::Samples(s) => {
                if s.len_of(Axis(3)) != 2 {
                    return Err(SpatialError::BadShape(s.shape().to_vec()));
                }
                if s.len_of(Axis(2)) == 0 {
                    return Err(SpatialError::NoSamples);
                }
                finite(s.iter())
            }
        }
    }

    /// Decode from a tensor laid out as H×W×2, H×W×4 or H×W×M×2.
    pub fn from_tensor(kind: OffsetKind, t: &Tensor) -> Result<Self, SpatialError> {
        let bad = || SpatialError::BadShape(t.shape().to_vec());
        let field = match kind {
            OffsetKind::Point => {
                let a = t.to_array3_f64().map_err(|_| bad())?;
                if a.len_of(Axis(2)) != 2 {
                    return Err(bad());
                }
                OffsetField::Point(a)
            }
            OffsetKind::Gaussian => {
                let a = t.to_array3_f64().map_err(|_| bad())?;
                if a.len_of(Axis(2)) != 4 {
                    return Err(bad());
                }
                OffsetField::Gaussian {
                    mean: a.slice(s![.., .., 0..2]).to_owned(),
                    var: a.slice(s![.., .., 2..4]).to_owned(),
                }
            }
            OffsetKind::Samples => {
                let a = t.to_array4_f64().map_err(|_| bad())?;
                if a.len_of(Axis(3)) != 2 {
                    return Err(bad());
                }
                OffsetField::Samples(a)
            }
        };
        field.validate()?;
        Ok(field)
    }

    /// Encode as f64 in the layout accepted by [`OffsetField::from_tensor`].
    pub fn to_tensor(&self) -> Tensor {
        match self {
            OffsetField::Point(m) => Tensor::from_f64(m).expect("valid shape"),
            OffsetField::Gaussian { mean, var } => {
                let (h, w, _) = mean.dim();
                let mut out = Array3::zeros((h, w, 4));
                out.slice_mut(s![.., .., 0..2]).assign(mean);
                out.slice_mut(s![.., .., 2..4]).assign(var);
                Tensor::from_f64(&out).expect("valid shape")
            }
            OffsetField::Samples(smp) => {
                Tensor::new(smp.shape().to_vec(), TensorData::F64(smp.iter().copied().collect())).expect("valid shape")
            }
        }
    }
}

fn check_map_shapes(h: usize, w: usize, gt: &ArrayView3<f64>, mask: &ArrayView2<bool>) -> Result<usize, SpatialError> {
    if gt.dim() != (h, w, 2) {
        return Err(SpatialError::ShapeMismatch(vec![h, w, 2], gt.shape().to_vec()));
    }
    if mask.dim() != (h, w) {
        return Err(SpatialError::ShapeMismatch(vec![h, w], mask.shape().to_vec()));
    }
    Ok(mask.iter().filter(|&&m| m).count())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNllGrad {
    pub loss: f64,
    pub grad_mean: Array3<f64>,
    pub grad_var: Array3<f64>,
}

/// Per-axis Gaussian negative log-likelihood
/// `½ ln σ² + (v − μ)² / 2σ²`, summed over x and y.
pub fn gaussian_nll_loss(
    field: &OffsetField,
    gt: ArrayView3<f64>,
    mask: ArrayView2<bool>,
    reduction: Reduction,
) -> Result<GaussianNllGrad, SpatialError> {
    let OffsetField::Gaussian { mean, var } = field else {
        return Err(SpatialError::KindMismatch {
            expected: OffsetKind::Gaussian,
            found: field.kind(),
        });
    };
    let (h, w, _) = mean.dim();
    let masked = check_map_shapes(h, w, &gt, &mask)?;
    for ((index, &v), &m) in var.iter().enumerate().zip(mask.iter().flat_map(|m| [m, m])) {
        if m && v < VAR_FLOOR {
            return Err(SpatialError::VarianceBelowFloor { index, value: v });
        }
    }
    let mean_s = mean.as_standard_layout();
    let var_s = var.as_standard_layout();
    let gt_s = gt.as_standard_layout();
    let (mu, s2, v) = (
        mean_s.as_slice().expect("standard"),
        var_s.as_slice().expect("standard"),
        gt_s.as_slice().expect("standard"),
    );
    let mask: Vec<bool> = mask.iter().copied().collect();
    let scale = reduction.scale(masked);
    let mut g_mean = vec![0.0; h * w * 2];
    let mut g_var = vec![0.0; h * w * 2];
    let losses: Vec<f64> = g_mean
        .par_chunks_mut(2)
        .zip(g_var.par_chunks_mut(2))
        .enumerate()
        .map(|(i, (gm, gv))| {
            if !mask[i] {
                return 0.0;
            }
            let mut loss = 0.0;
            for a in 0..2 {
                let k = 2 * i + a;
                let r = v[k] - mu[k];
                loss += 0.5 * s2[k].ln() + r * r / (2.0 * s2[k]);
                gm[a] = -r / s2[k] * scale;
                gv[a] = (0.5 / s2[k] - r * r / (2.0 * s2[k] * s2[k])) * scale;
            }
            loss
        })
        .collect();
    Ok(GaussianNllGrad {
        loss: pairwise_sum(&losses) * scale,
        grad_mean: Array3::from_shape_vec((h, w, 2), g_mean).expect("sized"),
        grad_var: Array3::from_shape_vec((h, w, 2), g_var).expect("sized"),
    })
}

fn norm(dx: f64, dy: f64) -> f64 {
    dx.hypot(dy)
}

/// Energy score of a sample set against a point target:
/// `(1/M) Σ‖s_j − v‖ − (1/2M²) Σ_j Σ_k ‖s_k − s_j‖`.
pub fn energy_score(samples: &[[f64; 2]], target: [f64; 2]) -> f64 {
    let m = samples.len() as f64;
    let first: f64 = samples.iter().map(|s| norm(s[0] - target[0], s[1] - target[1])).sum();
    let mut pair = 0.0;
    for (j, a) in samples.iter().enumerate() {
        for b in &samples[j + 1..] {
            pair += norm(a[0] - b[0], a[1] - b[1]);
        }
    }
    // the double sum counts each unordered pair twice
    first / m - pair / (m * m)
}

/// Gradient of [`energy_score`] with respect to each sample; the
/// subgradient of ‖·‖ at 0 is taken as 0.
fn energy_score_grad(samples: &[[f64; 2]], target: [f64; 2], out: &mut [f64]) {
    let m = samples.len() as f64;
    let unit = |dx: f64, dy: f64| {
        let n = norm(dx, dy);
        if n > 0.0 {
            [dx / n, dy / n]
        } else {
            [0.0, 0.0]
        }
    };
    for (j, sj) in samples.iter().enumerate() {
        let u = unit(sj[0] - target[0], sj[1] - target[1]);
        let mut gx = u[0] / m;
        let mut gy = u[1] / m;
        for (k, sk) in samples.iter().enumerate() {
            if k != j {
                let u = unit(sj[0] - sk[0], sj[1] - sk[1]);
                gx -= u[0] / (m * m);
                gy -= u[1] / (m * m);
            }
        }
        out[2 * j] = gx;
        out[2 * j + 1] = gy;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyScoreGrad {
    pub loss: f64,
    pub grad_samples: Array4<f64>,
}

/// Pixel-wise energy-score loss over a sample field.
pub fn energy_score_loss(
    field: &OffsetField,
    gt: ArrayView3<f64>,
    mask: ArrayView2<bool>,
    reduction: Reduction,
) -> Result<EnergyScoreGrad, SpatialError> {
    let OffsetField::Samples(samples) = field else {
        return Err(SpatialError::KindMismatch {
            expected: OffsetKind::Samples,
            found: field.kind(),
        });
    };
    let (h, w, m, _) = samples.dim();
    if m == 0 {
        return Err(SpatialError::NoSamples);
    }
    let masked = check_map_shapes(h, w, &gt, &mask)?;
    let smp = samples.as_standard_layout();
    let smp = smp.as_slice().expect("standard");
    let gt_s = gt.as_standard_layout();
    let v = gt_s.as_slice().expect("standard");
    let mask: Vec<bool> = mask.iter().copied().collect();
    let scale = reduction.scale(masked);
    let mut grad = vec![0.0; h * w * m * 2];
    let losses: Vec<f64> = grad
        .par_chunks_mut(2 * m)
        .enumerate()
        .map(|(i, g)| {
            if !mask[i] {
                return 0.0;
            }
            let pts: Vec<[f64; 2]> = smp[i * 2 * m..(i + 1) * 2 * m]
                .chunks_exact(2)
                .map(|c| [c[0], c[1]])
                .collect();
            let target = [v[2 * i], v[2 * i + 1]];
            energy_score_grad(&pts, target, g);
            g.iter_mut().for_each(|x| *x *= scale);
            energy_score(&pts, target)
        })
        .collect();
    Ok(EnergyScoreGrad {
        loss: pairwise_sum(&losses) * scale,
        grad_samples: Array4::from_shape_vec((h, w, m, 2), grad).expect("sized"),
    })
}

/// Maps total variance (pixels²) into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceNormalizer {
    max_total_variance: f64,
}

impl VarianceNormalizer {
    pub fn new(max_total_variance: f64) -> Result<Self, SpatialError> {
        if max_total_variance.is_finite() && max_total_variance > 0.0 {
            Ok(Self { max_total_variance })
        } else {
            Err(SpatialError::InvalidNormalizer(max_total_variance))
        }
    }

    pub fn max_total_variance(&self) -> f64 {
        self.max_total_variance
    }

    /// Normalizer from the largest total variance seen across `fields`
    /// (a training set). Fails if every field has zero variance.
    pub fn fit<'a>(fields: impl IntoIterator<Item = &'a OffsetField>) -> Result<Self, SpatialError> {
        let mut max = 0.0f64;
        for f in fields {
            let tv = total_variance(f)?;
            max = tv.iter().fold(max, |m, &v| m.max(v));
        }
        Self::new(max)
    }

    fn normalize(&self, total: f64) -> f64 {
        (total / self.max_total_variance).clamp(0.0, 1.0)
    }
}

/// Per-pixel `var_x + var_y`: the Gaussian variances, or the unbiased
/// sample variances (zero when M = 1).
pub fn total_variance(field: &OffsetField) -> Result<Array2<f64>, SpatialError> {
    match field {
        OffsetField::Gaussian { var, .. } => Ok(var.sum_axis(Axis(2))),
        OffsetField::Samples(s) => {
            let (h, w, m, _) = s.dim();
            let mut out = Array2::zeros((h, w));
            if m < 2 {
                return Ok(out);
            }
            for y in 0..h {
                for x in 0..w {
                    let mut total = 0.0;
                    for a in 0..2 {
                        let vals = s.slice(s![y, x, .., a]);
                        let mean = vals.sum() / m as f64;
                        let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
                        total += ss / (m as f64 - 1.0);
                    }
                    out[[y, x]] = total;
                }
            }
            Ok(out)
        }
        OffsetField::Point(_) => Err(SpatialError::KindMismatch {
            expected: OffsetKind::Gaussian,
            found: OffsetKind::Point,
        }),
    }
}

/// `clamp((σ²_x + σ²_y) / max_total_variance, 0, 1)` for a Gaussian field.
pub fn spatial_uncertainty_from_variance(
    field: &OffsetField,
    normalizer: &VarianceNormalizer,
) -> Result<UncertaintyMap, SpatialError> {
    if field.kind() != OffsetKind::Gaussian {
        return Err(SpatialError::KindMismatch {
            expected: OffsetKind::Gaussian,
            found: field.kind(),
        });
    }
    let tv = total_variance(field)?;
    Ok(UncertaintyMap::from_clamped(tv.mapv(|v| normalizer.normalize(v))))
}

/// Normalised unbiased sample variance for a sample field.
pub fn spatial_uncertainty_from_samples(
    field: &OffsetField,
    normalizer: &VarianceNormalizer,
) -> Result<UncertaintyMap, SpatialError> {
    if field.kind() != OffsetKind::Samples {
        return Err(SpatialError::KindMismatch {
            expected: OffsetKind::Samples,
            found: field.kind(),
        });
    }
    let tv = total_variance(field)?;
    Ok(UncertaintyMap::from_clamped(tv.mapv(|v| normalizer.normalize(v))))
}

/// Draw `k` offsets per pixel from N(μ, diag σ²). Pixel `i` uses stream `i`
/// of `seed`, draw `j` its `j`-th normal pair, so output is independent of
/// thread count.
pub fn sample_gaussian_offsets(field: &OffsetField, k: usize, seed: u64) -> Result<OffsetField, SpatialError> {
    let OffsetField::Gaussian { mean, var } = field else {
        return Err(SpatialError::KindMismatch {
            expected: OffsetKind::Gaussian,
            found: field.kind(),
        });
    };
    if k == 0 {
        return Err(SpatialError::NoSamples);
    }
    let (h, w, _) = mean.dim();
    let mean = mean.as_standard_layout();
    let var = var.as_standard_layout();
    let (mu, s2) = (mean.as_slice().expect("standard"), var.as_slice().expect("standard"));
    let mut out = vec![0.0; h * w * k * 2];
    out.par_chunks_mut(2 * k).enumerate().for_each(|(i, px)| {
        let mut stream = NormalStream::new(seed, i as u64);
        let (sx, sy) = (s2[2 * i].sqrt(), s2[2 * i + 1].sqrt());
        for d in px.chunks_exact_mut(2) {
            let (zx, zy) = stream.next_pair();
            d[0] = mu[2 * i] + sx * zx;
            d[1] = mu[2 * i + 1] + sy * zy;
        }
    });
    Ok(OffsetField::Samples(Array4::from_shape_vec((h, w, k, 2), out).expect("sized")))
}

//! Evidential deep learning: Dirichlet parameters from raw outputs, the
//! Type-II maximum-likelihood loss, and the annealed KL regulariser.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use super::special::{digamma, ln_gamma, softplus, trigamma};
use super::{check_finite, DirichletMap, LossGrad, ProbMap, SemanticError};
use crate::reduce::pairwise_sum;
use crate::{ClassId, Reduction};

/// `α = softplus(raw) + 1`, elementwise.
pub fn dirichlet_from_evidence(raw: &Array3<f64>) -> Result<DirichletMap, SemanticError> {
    check_finite(raw.iter())?;
    let mut alpha = raw.to_owned();
    alpha.par_mapv_inplace(|x| softplus(x) + 1.0);
    Ok(DirichletMap(alpha))
}

/// Strength, evidential uncertainty and expected probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletSummary {
    /// S = Σ_c α_c
    pub strength: Array2<f64>,
    /// u = C / S, in (0, 1]
    pub uncertainty: Array2<f64>,
    /// p̂_c = α_c / S
    pub probs: ProbMap,
}

pub fn dirichlet_quantities(alpha: &DirichletMap) -> DirichletSummary {
    let a = alpha.alpha();
    let c = alpha.num_classes() as f64;
    let strength = a.sum_axis(Axis(2));
    let uncertainty = strength.mapv(|s| c / s);
    let mut probs = a.to_owned();
    Zip::from(probs.lanes_mut(Axis(2)))
        .and(&strength)
        .for_each(|mut row, &s| row.mapv_inplace(|v| v / s));
    DirichletSummary {
        strength,
        uncertainty,
        probs: ProbMap(probs),
    }
}

/// KL annealing schedule `min(0.1, t / 60)`.
pub fn anneal_coefficient(epoch: u32) -> f64 {
    (f64::from(epoch) / 60.0).min(0.1)
}

fn check_labels(
    alpha: &DirichletMap,
    labels: ArrayView2<ClassId>,
    mask: ArrayView2<bool>,
) -> Result<usize, SemanticError> {
    let (h, w, c) = alpha.alpha().dim();
    if labels.dim() != (h, w) {
        return Err(SemanticError::ShapeMismatch(vec![h, w], labels.shape().to_vec()));
    }
    if mask.dim() != (h, w) {
        return Err(SemanticError::ShapeMismatch(vec![h, w], mask.shape().to_vec()));
    }
    let mut masked = 0;
    for (pixel, (&label, &m)) in labels.iter().zip(mask.iter()).enumerate() {
        if m {
            if label as usize >= c {
                return Err(SemanticError::LabelOutOfRange {
                    pixel,
                    label,
                    num_classes: c,
                });
            }
            masked += 1;
        }
    }
    Ok(masked)
}

/// Run a per-pixel kernel `f(alpha_row, label, grad_row) -> loss` over all
/// masked pixels, then reduce.
fn per_pixel_loss<F>(
    alpha: &DirichletMap,
    labels: ArrayView2<ClassId>,
    mask: ArrayView2<bool>,
    reduction: Reduction,
    f: F,
) -> Result<LossGrad, SemanticError>
where
    F: Fn(&[f64], usize, &mut [f64]) -> f64 + Sync,
{
    let masked = check_labels(alpha, labels, mask)?;
    let a = alpha.alpha().as_standard_layout();
    let a = a.as_slice().expect("standard layout");
    let (h, w, c) = alpha.alpha().dim();
    let labels: Vec<ClassId> = labels.iter().copied().collect();
    let mask: Vec<bool> = mask.iter().copied().collect();
    let mut grad = vec![0.0; h * w * c];
    let losses: Vec<f64> = grad
        .par_chunks_mut(c)
        .zip(a.par_chunks(c))
        .enumerate()
        .map(|(i, (g, row))| if mask[i] { f(row, labels[i] as usize, g) } else { 0.0 })
        .collect();
    let scale = reduction.scale(masked);
    grad.par_iter_mut().for_each(|g| *g *= scale);
    Ok(LossGrad {
        loss: pairwise_sum(&losses) * scale,
        grad: Array3::from_shape_vec((h, w, c), grad).expect("sized above"),
    })
}

/// Type-II maximum likelihood loss `Σ_c y_c (ln S − ln α_c)` and its
/// gradient `1/S − y_c/α_c`. Pixels with `mask == false` contribute nothing.
pub fn edl_loss(
    alpha: &DirichletMap,
    labels: ArrayView2<ClassId>,
    mask: ArrayView2<bool>,
    reduction: Reduction,
) -> Result<LossGrad, SemanticError> {
    per_pixel_loss(alpha, labels, mask, reduction, |row, y, g| {
        let s: f64 = row.iter().sum();
        for (k, (gk, &ak)) in g.iter_mut().zip(row).enumerate() {
            *gk = 1.0 / s - if k == y { 1.0 / ak } else { 0.0 };
        }
        s.ln() - row[y].ln()
    })
}

/// `λ_t · KL[Dir(α̃) ‖ Dir(1)]` where α̃ is α with the true-class entry set
/// to 1. The replaced coordinate is a constant, so its gradient is zero.
pub fn kl_regularizer(
    alpha: &DirichletMap,
    labels: ArrayView2<ClassId>,
    lambda_t: f64,
    mask: ArrayView2<bool>,
    reduction: Reduction,
) -> Result<LossGrad, SemanticError> {
    if !(lambda_t.is_finite() && lambda_t >= 0.0) {
        return Err(SemanticError::InvalidConfig(format!("lambda_t must be >= 0, got {lambda_t}")));
    }
    let c = alpha.num_classes();
    let ln_gamma_c = ln_gamma(c as f64);
    per_pixel_loss(alpha, labels, mask, reduction, |row, y, g| {
        if lambda_t == 0.0 {
            return 0.0;
        }
        let tilde = |k: usize| if k == y { 1.0 } else { row[k] };
        let s: f64 = (0..c).map(tilde).sum();
        let psi_s = digamma(s);
        let tri_s = trigamma(s);
        let mut kl = ln_gamma(s) - ln_gamma_c;
        let mut excess = 0.0;
        for k in 0..c {
            let ak = tilde(k);
            if ak == 1.0 {
                // lnΓ(1) = 0 and the (α − 1) factor vanishes
                continue;
            }
            kl += -ln_gamma(ak) + (ak - 1.0) * (digamma(ak) - psi_s);
            excess += ak - 1.0;
        }
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = if k == y {
                0.0
            } else {
                let ak = row[k];
                lambda_t * ((ak - 1.0) * trigamma(ak) - tri_s * excess)
            };
        }
        lambda_t * kl
    })
}

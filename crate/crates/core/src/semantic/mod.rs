//! Semantic-branch kernels: temperature-scaled softmax, temperature fitting,
//! evidential (Dirichlet) quantities and losses, and semantic uncertainty.

mod evidential;
pub mod special;
mod temperature;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::uncertainty::UncertaintyMap;
use crate::ClassId;

pub use evidential::{anneal_coefficient, dirichlet_from_evidence, dirichlet_quantities, edl_loss, kl_regularizer, DirichletSummary};
pub use temperature::{cross_entropy, fit_temperature, CalibrationConfig, TemperatureFit};

#[derive(Debug, Error, PartialEq)]
pub enum SemanticError {
    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),
    #[error("non-finite input value {value} at flat index {index}")]
    NonFiniteInput { index: usize, value: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} at pixel {pixel} outside [0, {num_classes})")]
    LabelOutOfRange { pixel: usize, label: ClassId, num_classes: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("uncertainty mode {0} requires Dirichlet input")]
    ModeInputMismatch(UncertaintyMode),
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
    #[error("Dirichlet parameter {value} at flat index {index} is below 1")]
    InvalidAlpha { index: usize, value: f64 },
}

pub(crate) fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<(), SemanticError> {
    for (index, &value) in values.into_iter().enumerate() {
        if !value.is_finite() {
            return Err(SemanticError::NonFiniteInput { index, value });
        }
    }
    Ok(())
}

/// Per-pixel categorical distributions, H×W×C; rows sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(Array3<f64>);

impl ProbMap {
    /// Wrap probabilities, checking range and per-pixel normalisation (1e-6).
    pub fn new(p: Array3<f64>) -> Result<Self, SemanticError> {
        check_finite(p.iter())?;
        for (i, row) in p.lanes(Axis(2)).into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(SemanticError::NonFiniteInput { index: i, value: s });
            }
        }
        Ok(Self(p))
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len_of(Axis(2))
    }

    /// Per-pixel argmax; ties resolve to the lower class id.
    pub fn argmax(&self) -> Array2<ClassId> {
        argmax_last(self.0.view())
    }
}

pub(crate) fn argmax_last(v: ArrayView3<f64>) -> Array2<ClassId> {
    let (h, w, _) = v.dim();
    let mut out = Array2::zeros((h, w));
    Zip::from(&mut out).and(v.lanes(Axis(2))).for_each(|o, row| {
        let mut best = 0;
        for (c, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = c;
            }
        }
        *o = best as ClassId;
    });
    out
}

/// Dirichlet parameters α ≥ 1, H×W×C.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletMap(Array3<f64>);

impl DirichletMap {
    pub fn new(alpha: Array3<f64>) -> Result<Self, SemanticError> {
        for (index, &value) in alpha.iter().enumerate() {
            if !value.is_finite() {
                return Err(SemanticError::NonFiniteInput { index, value });
            }
            if value < 1.0 {
                return Err(SemanticError::InvalidAlpha { index, value });
            }
        }
        Ok(Self(alpha))
    }

    pub fn alpha(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len_of(Axis(2))
    }
}

/// Softmax of `logits / t` over the class axis.
pub fn softmax_with_temperature(logits: ArrayView3<f64>, t: f64) -> Result<ProbMap, SemanticError> {
    if !(t.is_finite() && t > 0.0) {
        return Err(SemanticError::NonPositiveTemperature(t));
    }
    check_finite(logits.iter())?;
    let mut out = logits.to_owned();
    Zip::from(out.lanes_mut(Axis(2))).par_for_each(|mut row| {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| ((v - max) / t).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    });
    Ok(ProbMap(out))
}

/// Scalar uncertainty extracted from a categorical or Dirichlet prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyMode {
    /// `1 - max_c p_c`.
    Mcp,
    /// Shannon entropy divided by `ln C`.
    Entropy,
    /// `C / S` of the Dirichlet.
    Evidential,
}

impl fmt::Display for UncertaintyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UncertaintyMode::Mcp => "mcp",
            UncertaintyMode::Entropy => "entropy",
            UncertaintyMode::Evidential => "evidential",
        })
    }
}

impl FromStr for UncertaintyMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mcp" => Ok(Self::Mcp),
            "entropy" => Ok(Self::Entropy),
            "evidential" => Ok(Self::Evidential),
            other => Err(format!("unknown uncertainty mode {other:?} (mcp|entropy|evidential)")),
        }
    }
}

/// Semantic prediction as consumed by [`semantic_uncertainty`].
#[derive(Debug, Clone, Copy)]
pub enum SemanticInput<'a> {
    Probs(&'a ProbMap),
    Dirichlet(&'a DirichletMap),
}

pub fn semantic_uncertainty(input: SemanticInput<'_>, mode: UncertaintyMode) -> Result<UncertaintyMap, SemanticError> {
    let probs_owned;
    let probs = match (input, mode) {
        (SemanticInput::Probs(_), UncertaintyMode::Evidential) => {
            return Err(SemanticError::ModeInputMismatch(mode));
        }
        (SemanticInput::Dirichlet(alpha), UncertaintyMode::Evidential) => {
            let summary = dirichlet_quantities(alpha);
            return Ok(UncertaintyMap::from_clamped(summary.uncertainty.mapv(|u| u.clamp(0.0, 1.0))));
        }
        (SemanticInput::Probs(p), _) => p,
        (SemanticInput::Dirichlet(alpha), _) => {
            probs_owned = dirichlet_quantities(alpha).probs;
            &probs_owned
        }
    };
    let c = probs.num_classes();
    let (h, w, _) = probs.values().dim();
    let mut out = Array2::zeros((h, w));
    Zip::from(&mut out)
        .and(probs.values().lanes(Axis(2)))
        .par_for_each(|o, row| {
            *o = match mode {
                UncertaintyMode::Mcp => 1.0 - row.fold(0.0f64, |m, &v| m.max(v)),
                _ if c < 2 => 0.0,
                _ => {
                    let ent: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
                    ent / (c as f64).ln()
                }
            }
            .clamp(0.0, 1.0);
        });
    Ok(UncertaintyMap::from_clamped(out))
}

/// Loss value and gradient with respect to the kernel's input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array3<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_pixel(v: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn symmetric_logits_give_half() {
        let p = softmax_with_temperature(one_pixel(&[0.0, 0.0]).view(), 1.0).unwrap();
        assert_eq!(p.values().as_slice().unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn ln2_logit_gives_two_thirds() {
        let p = softmax_with_temperature(one_pixel(&[2f64.ln(), 0.0]).view(), 1.0).unwrap();
        let v = p.values();
        assert!((v[[0, 0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[[0, 0, 1]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let p = softmax_with_temperature(one_pixel(&[5.0, -3.0, 11.0, 0.2]).view(), 1e6).unwrap();
        for &v in p.values() {
            assert!((v - 0.25).abs() < 1e-5);
        }
    }

    #[test]
    fn temperature_errors() {
        let z = one_pixel(&[0.0, 1.0]);
        assert_eq!(
            softmax_with_temperature(z.view(), 0.0),
            Err(SemanticError::NonPositiveTemperature(0.0))
        );
        assert!(softmax_with_temperature(z.view(), -1.0).is_err());
        let bad = one_pixel(&[f64::NAN, 1.0]);
        assert!(matches!(
            softmax_with_temperature(bad.view(), 1.0),
            Err(SemanticError::NonFiniteInput { index: 0, .. })
        ));
    }

    #[test]
    fn mcp_and_entropy_extremes() {
        let onehot = ProbMap::new(one_pixel(&[0.0, 1.0, 0.0, 0.0])).unwrap();
        for mode in [UncertaintyMode::Mcp, UncertaintyMode::Entropy] {
            let u = semantic_uncertainty(SemanticInput::Probs(&onehot), mode).unwrap();
            assert_eq!(u.values()[[0, 0]], 0.0);
        }
        let uniform = ProbMap::new(one_pixel(&[0.25; 4])).unwrap();
        let mcp = semantic_uncertainty(SemanticInput::Probs(&uniform), UncertaintyMode::Mcp).unwrap();
        assert!((mcp.values()[[0, 0]] - 0.75).abs() < 1e-15);
        let ent = semantic_uncertainty(SemanticInput::Probs(&uniform), UncertaintyMode::Entropy).unwrap();
        assert!((ent.values()[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evidential_needs_dirichlet() {
        let p = ProbMap::new(one_pixel(&[0.5, 0.5])).unwrap();
        assert_eq!(
            semantic_uncertainty(SemanticInput::Probs(&p), UncertaintyMode::Evidential),
            Err(SemanticError::ModeInputMismatch(UncertaintyMode::Evidential))
        );
        let a = DirichletMap::new(one_pixel(&[1.0, 1.0])).unwrap();
        let u = semantic_uncertainty(SemanticInput::Dirichlet(&a), UncertaintyMode::Evidential).unwrap();
        assert_eq!(u.values()[[0, 0]], 1.0);
    }

    #[test]
    fn argmax_ties_pick_lower_class() {
        let p = ProbMap::new(array![[[0.4, 0.4, 0.2]]]).unwrap();
        assert_eq!(p.argmax()[[0, 0]], 0);
    }

    #[test]
    fn mode_parses() {
        assert_eq!("MCP".parse::<UncertaintyMode>(), Ok(UncertaintyMode::Mcp));
        assert!("bogus".parse::<UncertaintyMode>().is_err());
    }
}

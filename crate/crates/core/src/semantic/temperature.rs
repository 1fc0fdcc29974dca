use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_finite, SemanticError};
use crate::reduce::pairwise_sum;

/// Lower bound on the temperature during optimisation.
const MIN_TEMPERATURE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Passes over the calibration set.
    pub epochs: u32,
    pub learning_rate: f64,
    pub initial_t: f64,
    /// Samples per gradient step; steps run in dataset order.
    pub batch_size: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            learning_rate: 0.001,
            initial_t: 1.0,
            batch_size: 1,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), SemanticError> {
        if self.epochs == 0 {
            return Err(SemanticError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(SemanticError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.initial_t.is_finite() && self.initial_t > 0.0) {
            return Err(SemanticError::NonPositiveTemperature(self.initial_t));
        }
        if self.batch_size == 0 {
            return Err(SemanticError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    /// Set when the final cross-entropy exceeds the initial one.
    pub warning: bool,
}

/// Cross-entropy of one sample at temperature `t` and its derivative in `t`.
fn sample_loss_grad(z: &[f64], label: usize, t: f64) -> (f64, f64) {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut denom = 0.0;
    let mut weighted = 0.0;
    for &v in z {
        let e = ((v - max) / t).exp();
        denom += e;
        weighted += e * v;
    }
    let lse = max / t + denom.ln();
    let loss = lse - z[label] / t;
    // d/dT [lse(z/T) − z_y/T] = (z_y − E_p[z]) / T²
    let grad = (z[label] - weighted / denom) / (t * t);
    (loss, grad)
}

fn check_inputs(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(), SemanticError> {
    let (n, c) = logits.dim();
    if n == 0 || c == 0 {
        return Err(SemanticError::EmptyDataset);
    }
    if labels.len() != n {
        return Err(SemanticError::ShapeMismatch(vec![n], vec![labels.len()]));
    }
    if let Some((pixel, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(SemanticError::LabelOutOfRange {
            pixel,
            label: label as u32,
            num_classes: c,
        });
    }
    check_finite(logits.iter())
}

/// Mean cross-entropy of `softmax(z / t)` against `labels`; rows of
/// `logits` are samples.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize], t: f64) -> Result<f64, SemanticError> {
    check_inputs(logits, labels)?;
    if !(t.is_finite() && t > 0.0) {
        return Err(SemanticError::NonPositiveTemperature(t));
    }
    let z = logits.as_standard_layout();
    let z = z.as_slice().expect("standard layout");
    let c = logits.ncols();
    let losses: Vec<f64> = z
        .par_chunks(c)
        .zip(labels.par_iter())
        .map(|(row, &y)| sample_loss_grad(row, y, t).0)
        .collect();
    Ok(pairwise_sum(&losses) / labels.len() as f64)
}

/// Fit a single temperature by gradient descent on the mean cross-entropy,
/// leaving the logits themselves untouched.
pub fn fit_temperature(
    logits: ArrayView2<f64>,
    labels: &[usize],
    config: &CalibrationConfig,
) -> Result<TemperatureFit, SemanticError> {
    config.validate()?;
    check_inputs(logits, labels)?;
    let initial_loss = cross_entropy(logits, labels, config.initial_t)?;
    let z = logits.as_standard_layout();
    let z = z.as_slice().expect("standard layout");
    let c = logits.ncols();
    let n = labels.len();

    let mut t = config.initial_t;
    let mut steps = 0;
    for _ in 0..config.epochs {
        for start in (0..n).step_by(config.batch_size) {
            let end = (start + config.batch_size).min(n);
            let mut g = 0.0;
            for i in start..end {
                g += sample_loss_grad(&z[i * c..(i + 1) * c], labels[i], t).1;
            }
            g /= (end - start) as f64;
            t = (t - config.learning_rate * g).max(MIN_TEMPERATURE);
            steps += 1;
        }
    }
    let final_loss = cross_entropy(logits, labels, t)?;
    Ok(TemperatureFit {
        temperature: t,
        initial_loss,
        final_loss,
        steps,
        warning: final_loss.is_nan() || final_loss > initial_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn gradient_matches_finite_difference() {
        let z = [1.5, -0.3, 4.0, 0.0];
        for &t in &[0.5, 1.0, 3.0] {
            let h = 1e-6;
            let fd = (sample_loss_grad(&z, 1, t + h).0 - sample_loss_grad(&z, 1, t - h).0) / (2.0 * h);
            let g = sample_loss_grad(&z, 1, t).1;
            assert!((fd - g).abs() < 1e-7, "t={t}: {fd} vs {g}");
        }
    }

    #[test]
    fn single_sample_is_degenerate_but_finite() {
        let z = Array2::from_shape_vec((1, 3), vec![2.0, -1.0, 0.5]).unwrap();
        let fit = fit_temperature(z.view(), &[2], &CalibrationConfig::default()).unwrap();
        assert!(fit.temperature.is_finite() && fit.temperature > 0.0);
        assert_eq!(fit.steps, 25);
    }

    #[test]
    fn rejects_bad_inputs() {
        let z = Array2::<f64>::zeros((0, 3));
        assert_eq!(
            fit_temperature(z.view(), &[], &CalibrationConfig::default()),
            Err(SemanticError::EmptyDataset)
        );
        let z = Array2::<f64>::zeros((1, 3));
        let cfg = CalibrationConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(fit_temperature(z.view(), &[0], &cfg), Err(SemanticError::InvalidConfig(_))));
        assert!(matches!(
            fit_temperature(z.view(), &[3], &CalibrationConfig::default()),
            Err(SemanticError::LabelOutOfRange { .. })
        ));
    }
}

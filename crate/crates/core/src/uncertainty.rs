use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("uncertainty value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
}

/// Per-pixel scalar uncertainty in `[0, 1]`. Confidence is `1 - unc`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap(Array2<f64>);

impl UncertaintyMap {
    pub fn new(values: Array2<f64>) -> Result<Self, UncertaintyError> {
        for (index, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(UncertaintyError::OutOfRange { index, value });
            }
        }
        Ok(Self(values))
    }

    /// Callers guarantee the range; only checked in debug builds.
    pub(crate) fn from_clamped(values: Array2<f64>) -> Self {
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        Self(values)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Array2::zeros((height, width)))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn confidence(&self, y: usize, x: usize) -> f64 {
        1.0 - self.0[[y, x]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        let bad = Array2::from_elem((1, 2), 1.5);
        assert!(matches!(
            UncertaintyMap::new(bad),
            Err(UncertaintyError::OutOfRange { index: 0, .. })
        ));
        let nan = Array2::from_elem((1, 1), f64::NAN);
        assert!(UncertaintyMap::new(nan).is_err());
    }
}

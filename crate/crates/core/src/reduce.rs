//! Deterministic floating-point reductions.
//!
//! Every reduction in the crate funnels through [`pairwise_sum`]. The tree
//! shape depends only on the input length, never on how many threads
//! produced the inputs.

/// Below this length the pairwise recursion switches to a straight loop.
const LEAF: usize = 32;

/// Pairwise (cascade) summation with error growth `O(log n)`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise mean; `None` for an empty slice.
pub fn pairwise_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(pairwise_sum(values) / values.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_on_small_inputs() {
        let v: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 45.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn pairwise_beats_naive_on_ill_conditioned_sum() {
        let n = 1 << 20;
        let v = vec![0.1_f64; n];
        let exact = 0.1 * n as f64;
        let naive: f64 = v.iter().sum();
        let tree = pairwise_sum(&v);
        assert!((tree - exact).abs() <= (naive - exact).abs());
        assert!((tree - exact).abs() < 1e-9);
    }

    #[test]
    fn mean_of_empty_is_none() {
        assert_eq!(pairwise_mean(&[]), None);
        assert_eq!(pairwise_mean(&[2.0, 4.0]), Some(3.0));
    }
}

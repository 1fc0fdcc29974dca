//! Gamma-family special functions. `ln_gamma` and `digamma` come from
//! statrs; statrs has no trigamma, which the KL gradient needs.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Trigamma ψ'(x) for x > 0: upward recurrence to x ≥ 10, then the
/// asymptotic Bernoulli series.
pub fn trigamma(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/2x² + 1/6x³ - 1/30x⁵ + 1/42x⁷ - 1/30x⁹ + 5/66x¹¹
    let series = inv
        + 0.5 * inv2
        + inv * inv2 * (1.0 / 6.0 + inv2 * (-1.0 / 30.0 + inv2 * (1.0 / 42.0 + inv2 * (-1.0 / 30.0 + inv2 * 5.0 / 66.0))));
    acc + series
}

/// Numerically stable softplus `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse softplus `ln(e^y - 1)` for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

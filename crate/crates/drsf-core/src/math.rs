//! Scalar float helpers routed through `libm`.
//!
//! `core` does not provide transcendental functions for `f64`, and the
//! system libm is not bit-identical across platforms. Routing everything
//! through `libm`'s software implementations keeps the whole pipeline
//! reproducible down to the last bit for a fixed seed.

#[inline(always)]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline(always)]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline(always)]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline(always)]
pub fn sqrt(x: f64) -> f64 {
    // IEEE 754 requires sqrt to be correctly rounded, so libm and any
    // hardware instruction agree bit-for-bit.
    libm::sqrt(x)
}

#[inline(always)]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline(always)]
pub fn pow(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline(always)]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

/// Numerically stable ln(1 + e^x).
///
/// For large positive x the naive form overflows, so the piecewise form
/// x + ln(1 + e^{-x}) is used instead; both branches agree analytically.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + ln_1p(exp(-x))
    } else {
        ln_1p(exp(x))
    }
}

/// Logistic sigmoid, overflow-safe on both tails.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_naive_form_in_safe_range() {
        for i in -40..=40 {
            let x = i as f64 * 0.5;
            let naive = (1.0 + exp(x)).ln();
            assert!((softplus(x) - naive).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn softplus_large_input_does_not_overflow() {
        assert!((softplus(50.0) - 50.0).abs() < 1e-9);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn sigmoid_tails() {
        assert_eq!(sigmoid(0.0), 0.5);
        // strictly inside (0,1) while exp(-x) stays above f64 epsilon
        assert!(sigmoid(35.0) < 1.0);
        assert!(sigmoid(-35.0) > 0.0);
        assert!((sigmoid(-710.0)).is_finite());
        assert!((sigmoid(710.0)).is_finite());
    }
}

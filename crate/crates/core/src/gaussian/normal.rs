use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

/// `ln(2π) / 2`
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn log_std_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

pub fn std_normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * erfc(-x * FRAC_1_SQRT_2)
    }
}

/// `ln Φ(x)`, accurate far into the lower tail where `Φ(x)` underflows.
pub fn log_std_normal_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if x < -30.0 {
        // Asymptotic expansion of the Mills ratio.
        let z = 1.0 / (x * x);
        let series = 1.0 - z * (1.0 - 3.0 * z * (1.0 - 5.0 * z * (1.0 - 7.0 * z * (1.0 - 9.0 * z))));
        -0.5 * x * x - (-x).ln() - LN_SQRT_2PI + series.ln()
    } else if x > 3.0 {
        (-0.5 * erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else {
        std_normal_cdf(x).ln()
    }
}

/// Inverse of the standard normal CDF. Returns `±∞` at 0 and 1.
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        let x = -SQRT_2 * erfc_inv(2.0 * p);
        // Newton polish against the accurate CDF.
        if x.is_finite() {
            let cdf = std_normal_cdf(x);
            let pdf = std_normal_pdf(x);
            if pdf > 0.0 {
                return x - (cdf - p) / pdf;
            }
        }
        x
    }
}

/// Quantile without the Newton step; inner loops only.
pub(crate) fn quantile_unpolished(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// `-φ(x)/Φ(x)`: mean of a standard normal truncated to `(-∞, x]`.
pub(crate) fn truncated_mean_below(x: f64) -> f64 {
    if x == f64::INFINITY {
        0.0
    } else {
        -(log_std_normal_pdf(x) - log_std_normal_cdf(x)).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pdf_values() {
        assert!((std_normal_pdf(0.0) - 0.398_942_280_4).abs() < 1e-10);
        assert_eq!(std_normal_pdf(1.0), std_normal_pdf(-1.0));
        // exp(-2)/sqrt(2π) to 20 digits: 0.053990966513188058...
        assert!((std_normal_pdf(2.0) - 0.053_990_966_513_188_06).abs() < 1e-12);
        assert!((log_std_normal_pdf(2.0) - std_normal_pdf(2.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn cdf_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert_eq!(std_normal_cdf(f64::NEG_INFINITY), 0.0);
        assert_eq!(std_normal_cdf(f64::INFINITY), 1.0);
        assert!((std_normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn log_cdf_tail_is_continuous() {
        for &x in &[-29.0, -30.0, -31.0] {
            let direct = std_normal_cdf(x).ln();
            assert!((log_std_normal_cdf(x) - direct).abs() < 1e-9 * direct.abs(), "{x}");
        }
        assert!(log_std_normal_cdf(-100.0).is_finite());
        assert!(log_std_normal_cdf(40.0) <= 0.0);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-12, 1e-5, 0.025, 0.3, 0.5, 0.9, 0.999_999] {
            let x = std_normal_quantile(p);
            assert!((std_normal_cdf(x) - p).abs() < 1e-13 * p.max(1e-3), "{p}");
        }
    }
}

//! Closed-form distances between Gaussian policies.

use ndarray::Array1;

use crate::{Error, Result};

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `KL(N(μ1, diag v1) ‖ N(μ2, diag v2))` for diagonal variances.
pub fn gaussian_kl(mu1: &Array1<f64>, mu2: &Array1<f64>, var1: &Array1<f64>, var2: &Array1<f64>) -> Result<f64> {
    let k = mu1.len();
    for (name, v) in [("mu2", mu2), ("var1", var1), ("var2", var2)] {
        if v.len() != k {
            return Err(Error::dim(name, k, v.len()));
        }
    }
    if !var1.iter().chain(var2.iter()).all(|&v| v > 0.0 && v.is_finite()) {
        return Err(Error::arg("variances must be positive"));
    }
    let mut kl = 0.0;
    for i in 0..k {
        let d = mu2[i] - mu1[i];
        kl += (var2[i] / var1[i]).ln() + var1[i] / var2[i] + d * d / var2[i] - 1.0;
    }
    Ok(0.5 * kl)
}

/// `∫|f1 − f2|` for two isotropic Gaussians with common scale `sigma` whose
/// means are `d` apart: `2(2Φ(d/2σ) − 1)`.
pub fn smoothed_tv(d: f64, sigma: f64) -> Result<f64> {
    if !(d >= 0.0) || !(sigma > 0.0) {
        return Err(Error::arg("smoothed TV needs d >= 0 and sigma > 0"));
    }
    // 2Φ(x) − 1 = erf(x/√2), which keeps precision for small x
    Ok(2.0 * libm::erf(d / (2.0 * sigma * std::f64::consts::SQRT_2)))
}

/// Leading-order term `√(2/π)·d/σ` of [`smoothed_tv`].
pub fn smoothed_tv_leading(d: f64, sigma: f64) -> f64 {
    (2.0 / std::f64::consts::PI).sqrt() * d / sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kl_special_cases() {
        let mu = array![0.3, -1.0];
        let v = array![0.5, 2.0];
        assert_eq!(gaussian_kl(&mu, &mu, &v, &v).unwrap(), 0.0);
        let ones = array![1.0, 1.0];
        let kl = gaussian_kl(&array![0.0, 0.0], &array![1.0, 2.0], &ones, &ones).unwrap();
        assert!((kl - 2.5).abs() < 1e-15);
        assert!(gaussian_kl(&mu, &mu, &array![0.0, 1.0], &v).is_err());
    }

    #[test]
    fn tv_small_distance() {
        assert_eq!(smoothed_tv(0.0, 1.0).unwrap(), 0.0);
        let exact = smoothed_tv(0.01, 1.0).unwrap();
        assert!((exact - smoothed_tv_leading(0.01, 1.0)).abs() < 1e-6);
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
    }
}

//! Proper scoring rules for a Gaussian predictive N(μ, σ²), all negatively
//! oriented: smaller is better.

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{param_err, Error, Result};

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn big_phi(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Φ⁻¹(1 − u/2).
pub fn interval_half_width(u: f64) -> f64 {
    std::f64::consts::SQRT_2 * erfc_inv(u)
}

pub fn crps(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    sigma * (z * (2.0 * big_phi(z) - 1.0) + 2.0 * phi(z) - FRAC_1_SQRT_PI)
}

/// −log of the predictive density.
pub fn ign(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    0.5 * z * z + sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()
}

pub fn interval(x: f64, mu: f64, sigma: f64, u: f64) -> f64 {
    let a = interval_half_width(u);
    let (lo, hi) = (mu - a * sigma, mu + a * sigma);
    let mut s = hi - lo;
    if x < lo {
        s += 2.0 / u * (lo - x);
    }
    if x > hi {
        s += 2.0 / u * (x - hi);
    }
    s
}

/// Means over all entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mae: f64,
    pub rmse: f64,
    pub crps: f64,
    pub ign: f64,
    pub int: f64,
}

/// Scores errors x against N(0, σ²) predictives, σ² given per entry.
pub fn proper_scores(errors: &[f64], variances: &[f64], u: f64) -> Result<ScoreReport> {
    if errors.len() != variances.len() {
        return Err(Error::Dimension(format!(
            "{} errors but {} variances",
            errors.len(),
            variances.len()
        )));
    }
    if errors.is_empty() {
        return Err(param_err("errors", "nothing to score"));
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(param_err("u", "must lie in (0, 1)"));
    }
    let m = errors.len() as f64;
    let mut r = ScoreReport {
        mae: 0.0,
        rmse: 0.0,
        crps: 0.0,
        ign: 0.0,
        int: 0.0,
    };
    for (&x, &v) in errors.iter().zip(variances) {
        if !(v > 0.0) {
            return Err(param_err("sigma", format!("predictive variance {v:e} is not positive")));
        }
        let s = v.sqrt();
        r.mae += x.abs();
        r.rmse += x * x;
        r.crps += crps(x, 0.0, s);
        r.ign += ign(x, 0.0, s);
        r.int += interval(x, 0.0, s, u);
    }
    r.mae /= m;
    r.rmse = (r.rmse / m).sqrt();
    r.crps /= m;
    r.ign /= m;
    r.int /= m;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crps_at_the_mean() {
        let want = (2.0 / std::f64::consts::PI).sqrt() - FRAC_1_SQRT_PI;
        assert!((crps(1.3, 1.3, 2.0) - 2.0 * want).abs() < 1e-14);
        assert!((want - 0.2337).abs() < 1e-4);
    }

    #[test]
    fn interval_inside_is_width() {
        let a = interval_half_width(0.05);
        assert!((a - 1.959_963_984_540_054).abs() < 1e-9);
        assert!((interval(0.3, 0.0, 1.5, 0.05) - 2.0 * a * 1.5).abs() < 1e-12);
        assert!((interval(5.0, 0.0, 1.0, 0.05) - (2.0 * a + 40.0 * (5.0 - a))).abs() < 1e-9);
    }

    #[test]
    fn zero_errors() {
        let r = proper_scores(&[0.0; 4], &[1.0; 4], 0.05).unwrap();
        assert_eq!((r.mae, r.rmse), (0.0, 0.0));
        assert!(proper_scores(&[0.0], &[0.0], 0.05).is_err());
        assert!(proper_scores(&[], &[], 0.05).is_err());
    }

    #[test]
    fn ign_matches_log_density() {
        let x: f64 = 0.7;
        let s: f64 = 1.3;
        let dens = (-(x * x) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        assert!((ign(x, 0.0, s) + dens.ln()).abs() < 1e-14);
    }
}

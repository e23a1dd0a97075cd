//! Matérn marginal variance and range, and a quadrature check of the
//! anisotropic spectral density.

use std::f64::consts::PI;

use statrs::function::gamma::gamma;

use crate::error::{param_err, Error, Result};

/// Marginal variance σ² and range ρ (voxel units) of a Matérn field with
/// smoothness ν = α − d/2.
pub fn sigma_rho(tau2: f64, kappa2: f64, alpha: u8, d: u32) -> Result<(f64, f64)> {
    let nu = alpha as f64 - d as f64 / 2.0;
    if !(nu > 0.0) || !(kappa2 > 0.0) {
        return Err(Error::Unsupported(
            "marginal variance and range are undefined for this kind (needs κ > 0 and α > d/2)".into(),
        ));
    }
    if !(tau2 > 0.0) {
        return Err(param_err("tau2", "must be positive"));
    }
    let kappa = kappa2.sqrt();
    let df = d as f64;
    let s2 = gamma(nu) / (gamma(nu + df / 2.0) * (4.0 * PI).powf(df / 2.0) * tau2 * kappa.powf(2.0 * nu));
    Ok((s2, (8.0 * nu).sqrt() / kappa))
}

/// Inverse of [`sigma_rho`] for α = 2, d = 3: (τ², κ²) from (σ, ρ in voxels).
pub fn tau2_kappa2_from_sigma_rho(sigma: f64, rho: f64) -> (f64, f64) {
    let kappa = 2.0 / rho;
    let tau2 = 1.0 / (8.0 * PI * kappa * sigma * sigma);
    (tau2, kappa * kappa)
}

/// Gauss–Legendre nodes and weights on [−1, 1], n ≥ 1.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn spectral_integral(alpha: f64, kappa: f64, tau: f64, h: [f64; 3], n: usize) -> f64 {
    // ∫ (2π)^{-3} τ^{-2} (κ² + ωᵀHω)^{-α} dω in spherical coordinates, with
    // r = tan t so the radial integrand is bounded on [0, π/2].
    let (gx, gw) = gauss_legendre(n);
    let k2 = kappa * kappa;
    let radial = |s: f64| {
        gx.iter()
            .zip(&gw)
            .map(|(&x, &w)| {
                let t = (x + 1.0) * PI / 4.0;
                let (st, ct) = t.sin_cos();
                let val = st * st * ct.powf(2.0 * alpha - 4.0) / (k2 * ct * ct + s * st * st).powf(alpha);
                w * val * PI / 4.0
            })
            .sum::<f64>()
    };
    let n_phi = 2 * n;
    let mut total = 0.0;
    for (&u, &wu) in gx.iter().zip(&gw) {
        let sin2 = 1.0 - u * u;
        for j in 0..n_phi {
            let phi = 2.0 * PI * j as f64 / n_phi as f64;
            let (sp, cp) = phi.sin_cos();
            let s = h[0] * sin2 * cp * cp + h[1] * sin2 * sp * sp + h[2] * u * u;
            total += wu * (2.0 * PI / n_phi as f64) * radial(s);
        }
    }
    total / ((2.0 * PI).powi(3) * tau * tau)
}

/// Lag-0 variance of the anisotropic SPDE field by numerical quadrature of its
/// spectral density. Resolution is doubled until two successive estimates
/// agree to 1e−12 relative.
pub fn spectral_variance_oracle(alpha: f64, kappa: f64, tau: f64, h: [f64; 3]) -> Result<f64> {
    if !(alpha > 1.5) {
        return Err(param_err("alpha", "must exceed d/2 = 1.5"));
    }
    if !(kappa > 0.0 && tau > 0.0) || h.iter().any(|&v| !(v > 0.0)) {
        return Err(param_err("kappa/tau/h", "must be positive"));
    }
    let mut n = 16;
    let mut prev = spectral_integral(alpha, kappa, tau, h, n);
    while n < 512 {
        n *= 2;
        let cur = spectral_integral(alpha, kappa, tau, h, n);
        if (cur - prev).abs() <= 1e-12 * cur.abs() {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::Numerical(format!(
        "spectral quadrature did not converge (last estimate {prev})"
    )))
}

//! Hyperpriors on (τ0, κ0, h0x, h0y).
//!
//! Densities are those of the natural parameters (τ², κ², h) evaluated at the
//! log coordinates, without the change-of-variables Jacobian; the derivatives
//! are taken with respect to the log coordinates.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use super::{Coord, PriorKind, SpatialPriorSpec};
use crate::error::{param_err, Result};

const D: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HyperPrior {
    /// No hyperprior contribution.
    Flat,
    /// Joint PC prior for Matérn fields with α = 2:
    /// P(ρ < rho0) = xi1, P(σ > sigma0) = xi2 (ρ in voxel lengths).
    PcMatern {
        rho0: f64,
        xi1: f64,
        sigma0: f64,
        xi2: f64,
    },
    /// Independent normals on τ0 and κ0.
    LogNormal {
        mu_tau0: f64,
        sd_tau0: f64,
        mu_kappa0: f64,
        sd_kappa0: f64,
    },
    /// PC prior on the precision τ² of an intrinsic field, with
    /// P(√(v/τ²) > sigma0) = xi2 for the reference variance constant v.
    PcIcar {
        sigma0: f64,
        xi2: f64,
        variance: f64,
    },
    /// Gamma(scale, shape) on τ².
    Gamma { scale: f64, shape: f64 },
}

impl HyperPrior {
    pub fn lognormal_m1_default() -> Self {
        HyperPrior::LogNormal {
            mu_tau0: 0.01f64.ln(),
            sd_tau0: 4.0,
            mu_kappa0: 0.1f64.ln(),
            sd_kappa0: 1.0,
        }
    }

    pub fn pc_matern(sigma0: f64) -> Self {
        HyperPrior::PcMatern {
            rho0: 2.0,
            xi1: 0.05,
            sigma0,
            xi2: 0.05,
        }
    }

    /// PC prior for ICAR kinds using the conditional variance of one voxel
    /// given its neighbours in a fully surrounded position (1/6 or 1/42).
    pub fn pc_icar(kind: PriorKind, sigma0: f64) -> Self {
        let variance = if kind == PriorKind::Icar2 { 1.0 / 42.0 } else { 1.0 / 6.0 };
        HyperPrior::PcIcar {
            sigma0,
            xi2: 0.05,
            variance,
        }
    }

    pub fn validate(&self, kind: PriorKind) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(param_err(name, "must be positive"))
            }
        };
        let prob = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(param_err(name, "must lie in (0, 1)"))
            }
        };
        match *self {
            HyperPrior::Flat => Ok(()),
            HyperPrior::PcMatern { rho0, xi1, sigma0, xi2 } => {
                if kind.alpha() != 2 || !kind.has_kappa() {
                    return Err(param_err("hyperprior", "the Matérn PC prior needs an M2 or AM2 prior"));
                }
                pos("rho0", rho0)?;
                pos("sigma0", sigma0)?;
                prob("xi1", xi1)?;
                prob("xi2", xi2)
            }
            HyperPrior::LogNormal { sd_tau0, sd_kappa0, mu_tau0, mu_kappa0 } => {
                pos("sd_tau0", sd_tau0)?;
                pos("sd_kappa0", sd_kappa0)?;
                if !(mu_tau0.is_finite() && mu_kappa0.is_finite()) {
                    return Err(param_err("mu_tau0/mu_kappa0", "must be finite"));
                }
                Ok(())
            }
            HyperPrior::PcIcar { sigma0, xi2, variance } => {
                pos("sigma0", sigma0)?;
                pos("variance", variance)?;
                prob("xi2", xi2)
            }
            HyperPrior::Gamma { scale, shape } => {
                pos("scale", scale)?;
                pos("shape", shape)
            }
        }
    }

    /// (λ1, λ3) of the Matérn PC prior, ν = 1/2, d = 3.
    pub fn pc_matern_rates(&self) -> Option<(f64, f64)> {
        match *self {
            HyperPrior::PcMatern { rho0, xi1, sigma0, xi2 } => {
                let nu: f64 = 0.5;
                let l1 = -xi1.ln() * (rho0 / (8.0 * nu).sqrt()).powf(D / 2.0);
                let c = gamma(nu) / (gamma(nu + D / 2.0) * (4.0 * std::f64::consts::PI).powf(D / 2.0));
                let l3 = -(xi2.ln() / sigma0) * c.sqrt();
                Some((l1, l3))
            }
            _ => None,
        }
    }

    pub fn pc_icar_rate(&self) -> Option<f64> {
        match *self {
            HyperPrior::PcIcar { sigma0, xi2, variance } => Some(-xi2.ln() * variance.sqrt() / sigma0),
            _ => None,
        }
    }
}

/// Log density and its first/second derivatives per coordinate of
/// `kind.coords()` (cross terms are not needed by the optimizer).
#[derive(Debug, Clone, PartialEq)]
pub struct HyperTerms {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

pub fn hyperprior_eval(spec: &SpatialPriorSpec, coords: &[f64]) -> Result<HyperTerms> {
    spec.hyper.validate(spec.kind)?;
    let kinds = spec.kind.coords();
    let idx = |c: Coord| kinds.iter().position(|&k| k == c);
    let mut value = 0.0;
    let mut grad = vec![0.0; kinds.len()];
    let mut hess = vec![0.0; kinds.len()];
    let tau0 = coords[0];
    match spec.hyper {
        HyperPrior::Flat => {}
        HyperPrior::PcMatern { .. } => {
            let (l1, l3) = spec.hyper.pc_matern_rates().unwrap();
            let nu = 0.5;
            let k0 = coords[idx(Coord::Kappa).unwrap()];
            // log p = −(3/2)τ0 + (d/2 − 1 − ν) log κ − λ1 κ^{d/2} − λ3 κ^{−ν} e^{−τ0/2}
            let a = l1 * (k0 * D / 4.0).exp();
            let b = l3 * (-nu * k0 / 2.0 - tau0 / 2.0).exp();
            let c = D / 2.0 - 1.0 - nu;
            value = -1.5 * tau0 + c * k0 / 2.0 - a - b;
            grad[0] = -1.5 + b / 2.0;
            hess[0] = -b / 4.0;
            let ki = idx(Coord::Kappa).unwrap();
            grad[ki] = c / 2.0 - a * D / 4.0 + b * nu / 2.0;
            hess[ki] = -a * (D / 4.0).powi(2) - b * (nu / 2.0).powi(2);
        }
        HyperPrior::LogNormal { mu_tau0, sd_tau0, mu_kappa0, sd_kappa0 } => {
            let zt = (tau0 - mu_tau0) / sd_tau0;
            value -= 0.5 * zt * zt;
            grad[0] = -zt / sd_tau0;
            hess[0] = -1.0 / (sd_tau0 * sd_tau0);
            if let Some(ki) = idx(Coord::Kappa) {
                let zk = (coords[ki] - mu_kappa0) / sd_kappa0;
                value -= 0.5 * zk * zk;
                grad[ki] = -zk / sd_kappa0;
                hess[ki] = -1.0 / (sd_kappa0 * sd_kappa0);
            }
        }
        HyperPrior::PcIcar { .. } => {
            let l2 = spec.hyper.pc_icar_rate().unwrap();
            let b = l2 * (-tau0 / 2.0).exp();
            value = -1.5 * tau0 - b;
            grad[0] = -1.5 + b / 2.0;
            hess[0] = -b / 4.0;
        }
        HyperPrior::Gamma { scale, shape } => {
            let t = tau0.exp();
            value = (shape - 1.0) * tau0 - t / scale;
            grad[0] = (shape - 1.0) - t / scale;
            hess[0] = -t / scale;
        }
    }
    if spec.kind == PriorKind::Am2 {
        // (h0x, h0y) ~ N(0, σh² [[1, −½], [−½, 1]]); precision (4/(3σh²)) [[1, ½], [½, 1]]
        let (ix, iy) = (idx(Coord::Hx).unwrap(), idx(Coord::Hy).unwrap());
        let (x, y) = (coords[ix], coords[iy]);
        let s = 2.0 / (3.0 * spec.aniso_sigma2);
        value -= s * (x * x + x * y + y * y);
        grad[ix] = -s * (2.0 * x + y);
        grad[iy] = -s * (2.0 * y + x);
        hess[ix] = -2.0 * s;
        hess[iy] = -2.0 * s;
    }
    Ok(HyperTerms { value, grad, hess })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::SpatialParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pc_matern_lambda1() {
        let h = HyperPrior::pc_matern(1.0);
        let (l1, _) = h.pc_matern_rates().unwrap();
        assert!((l1 - 2.995732273553991).abs() < 1e-12);
    }

    #[test]
    fn pc_icar_rates() {
        let h = HyperPrior::pc_icar(PriorKind::Icar1, 2.0);
        assert!((h.pc_icar_rate().unwrap() - (-(0.05f64).ln() / (2.0 * 6f64.sqrt()))).abs() < 1e-14);
        let h = HyperPrior::pc_icar(PriorKind::Icar2, 2.0);
        assert!((h.pc_icar_rate().unwrap() - (-(0.05f64).ln() / (2.0 * 42f64.sqrt()))).abs() < 1e-14);
    }

    #[test]
    fn lognormal_at_mode() {
        let s = SpatialPriorSpec::new(PriorKind::M1, SpatialParams::new(0.01, 0.1), HyperPrior::lognormal_m1_default());
        let t = hyperprior_eval(&s, &[0.01f64.ln(), 0.1f64.ln()]).unwrap();
        assert!(t.grad[0].abs() < 1e-14 && t.grad[1].abs() < 1e-14);
        assert_eq!(t.hess[0], -1.0 / 16.0);
        assert_eq!(t.hess[1], -1.0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let cases = vec![
            (PriorKind::M2, HyperPrior::pc_matern(0.7)),
            (PriorKind::Am2, HyperPrior::pc_matern(2.0)),
            (PriorKind::M1, HyperPrior::lognormal_m1_default()),
            (PriorKind::Icar1, HyperPrior::pc_icar(PriorKind::Icar1, 1.5)),
            (PriorKind::Icar2, HyperPrior::pc_icar(PriorKind::Icar2, 1.5)),
            (PriorKind::Icar1, HyperPrior::Gamma { scale: 10.0, shape: 0.1 }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (kind, hyper) in cases {
            let spec = SpatialPriorSpec::new(kind, SpatialParams::new(1.0, 1.0), hyper);
            for _ in 0..20 {
                let c: Vec<f64> = (0..kind.coords().len()).map(|_| rng.random_range(-2.0..2.0)).collect();
                let t = hyperprior_eval(&spec, &c).unwrap();
                for i in 0..c.len() {
                    let f = |d: f64| {
                        let mut c2 = c.clone();
                        c2[i] += d;
                        hyperprior_eval(&spec, &c2).unwrap().value
                    };
                    let (h, h2) = (1e-4, 1e-3);
                    let fd1 = (f(h) - f(-h)) / (2.0 * h);
                    let fd2 = (f(h2) - 2.0 * f(0.0) + f(-h2)) / (h2 * h2);
                    let rel1 = (fd1 - t.grad[i]).abs() / t.grad[i].abs().max(1e-3);
                    let rel2 = (fd2 - t.hess[i]).abs() / t.hess[i].abs().max(1e-3);
                    assert!(rel1 < 1e-6, "{kind:?} coord {i}: {fd1} vs {}", t.grad[i]);
                    assert!(rel2 < 1e-4, "{kind:?} coord {i}: {fd2} vs {}", t.hess[i]);
                }
            }
        }
    }

    #[test]
    fn aniso_prior_implies_unit_variance_for_log_hz() {
        // precision (4/(3σ²))[[1,½],[½,1]] inverts to σ²[[1,−½],[−½,1]]
        let s2: f64 = 0.01;
        let p = nalgebra::Matrix2::<f64>::new(1.0, 0.5, 0.5, 1.0) * (4.0 / (3.0 * s2));
        let cov = p.try_inverse().unwrap();
        let v_hz = cov[(0, 0)] + cov[(1, 1)] + 2.0 * cov[(0, 1)];
        assert!((v_hz - s2).abs() < 1e-15);
        assert!((cov[(0, 1)] + 0.5 * s2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_constants() {
        assert!(HyperPrior::PcMatern { rho0: -1.0, xi1: 0.05, sigma0: 1.0, xi2: 0.05 }
            .validate(PriorKind::M2)
            .is_err());
        assert!(HyperPrior::pc_matern(1.0).validate(PriorKind::M1).is_err());
        assert!(HyperPrior::PcIcar { sigma0: 0.0, xi2: 0.05, variance: 0.1 }
            .validate(PriorKind::Icar1)
            .is_err());
    }
}

//! Synthetic data: activity fields drawn from spatial priors with known
//! hyperparameters, a block design, a constant intercept and AR noise.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::glm::{ar_process_variance, Dataset};
use crate::lattice::{LatticeOperators, MaskedLattice};
use crate::prior::hyper::HyperPrior;
use crate::prior::matern::tau2_kappa2_from_sigma_rho;
use crate::prior::{sample_prior, PriorKind, SpatialParams, SpatialPriorSpec};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskShape {
    #[default]
    Full,
    /// Ellipsoid inscribed in the grid.
    Ellipsoid,
}

/// One simulated condition. Matérn kinds may give (rho, sigma) with rho in
/// mm; otherwise tau2 (and kappa2) are used as given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    #[serde(default = "default_kind")]
    pub kind: PriorKind,
    pub rho: Option<f64>,
    pub sigma: Option<f64>,
    pub tau2: Option<f64>,
    pub kappa2: Option<f64>,
    #[serde(default = "one")]
    pub hx: f64,
    #[serde(default = "one")]
    pub hy: f64,
}

fn default_kind() -> PriorKind {
    PriorKind::Am2
}

fn one() -> f64 {
    1.0
}

impl ConditionSpec {
    pub fn matern(rho_mm: f64, sigma: f64, hx: f64, hy: f64) -> Self {
        ConditionSpec {
            kind: PriorKind::Am2,
            rho: Some(rho_mm),
            sigma: Some(sigma),
            tau2: None,
            kappa2: None,
            hx,
            hy,
        }
    }

    /// True parameters in lattice units.
    pub fn params(&self, voxel_edge: f64) -> Result<SpatialParams> {
        let mut p = match (self.rho, self.sigma, self.tau2) {
            (Some(rho), Some(sigma), None) => {
                if !(self.kind.alpha() == 2 && self.kind.has_kappa()) {
                    return Err(param_err("rho", "range and sigma need an M2 or AM2 condition"));
                }
                if !(rho > 0.0 && sigma > 0.0) {
                    return Err(param_err("rho/sigma", "must be positive"));
                }
                let (t2, k2) = tau2_kappa2_from_sigma_rho(sigma, rho / voxel_edge);
                SpatialParams::new(t2, k2)
            }
            (None, None, Some(t2)) => SpatialParams::new(t2, self.kappa2.unwrap_or(0.0)),
            _ => return Err(param_err("condition", "give either rho and sigma, or tau2 (and kappa2)")),
        };
        if self.kind == PriorKind::Am2 {
            p.hx = self.hx;
            p.hy = self.hy;
        }
        Ok(p)
    }
}

/// Innovation standard deviation and AR coefficients, shared by all voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sd: f64,
    #[serde(default)]
    pub ar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub dims: [usize; 3],
    /// mm.
    #[serde(default = "unit_voxels")]
    pub voxel_size: [f64; 3],
    #[serde(default)]
    pub mask: MaskShape,
    pub t: usize,
    /// Seconds between volumes.
    #[serde(default = "default_tr")]
    pub tr: f64,
    /// Volumes per block.
    #[serde(default = "default_block")]
    pub block_len: usize,
    pub conditions: Vec<ConditionSpec>,
    /// `None` disables the noise.
    pub noise: Option<NoiseSpec>,
    #[serde(default = "default_intercept")]
    pub intercept: f64,
}

fn unit_voxels() -> [f64; 3] {
    [1.0; 3]
}
fn default_tr() -> f64 {
    2.0
}
fn default_block() -> usize {
    10
}
fn default_intercept() -> f64 {
    100.0
}

impl SimulationSpec {
    pub fn lattice(&self) -> Result<MaskedLattice> {
        match self.mask {
            MaskShape::Full => MaskedLattice::full(self.dims, self.voxel_size),
            MaskShape::Ellipsoid => {
                let c: Vec<f64> = self.dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
                let r: Vec<f64> = self.dims.iter().map(|&d| d as f64 / 2.0).collect();
                MaskedLattice::from_fn(self.dims, self.voxel_size, |x, y, z| {
                    let q = [x, y, z]
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| ((v as f64 - c[i]) / r[i]).powi(2))
                        .sum::<f64>();
                    q <= 1.0
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("simulation.{key}"),
                reason: reason.into(),
            })
        };
        if self.t < 2 {
            return cfg("t", "needs at least 2 time points");
        }
        if self.conditions.is_empty() {
            return cfg("conditions", "at least one condition is required");
        }
        if !(self.tr > 0.0) || self.block_len == 0 {
            return cfg("tr", "tr and block_len must be positive");
        }
        if let Some(n) = &self.noise {
            if !(n.sd > 0.0) {
                return cfg("noise.sd", "must be positive");
            }
            ar_process_variance(&n.ar, 1.0).map_err(|_| Error::Config {
                key: "simulation.noise.ar".into(),
                reason: "coefficients are not stationary".into(),
            })?;
        }
        Ok(())
    }
}

/// Dataset plus the fields it was generated from.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub lattice: MaskedLattice,
    pub dataset: Dataset,
    /// K×N, activity rows then the intercept row.
    pub beta: DMatrix<f64>,
    pub params: Vec<SpatialParams>,
}

/// Canonical double-gamma response (peak near 6 s, undershoot near 16 s,
/// ratio 1/6), sampled every `dt` seconds over 32 s and normalized to unit sum.
pub fn canonical_hrf(dt: f64) -> Vec<f64> {
    use statrs::function::gamma::gamma;
    let g = |t: f64, a: f64| if t <= 0.0 { 0.0 } else { t.powf(a - 1.0) * (-t).exp() / gamma(a) };
    let len = (32.0 / dt).ceil() as usize + 1;
    let h: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 * dt;
            g(t, 6.0) - g(t, 16.0) / 6.0
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.into_iter().map(|x| x / s).collect()
}

/// Block design: the blocks cycle through rest and the conditions in turn;
/// each boxcar is convolved with the canonical response at 1/16 of the TR.
/// Columns are the conditions followed by an intercept.
pub fn block_design(t: usize, conditions: usize, block_len: usize, tr: f64) -> DMatrix<f64> {
    const MICRO: usize = 16;
    let h = canonical_hrf(tr / MICRO as f64);
    let fine = t * MICRO;
    let mut x = DMatrix::zeros(t, conditions + 1);
    for c in 0..conditions {
        let boxcar: Vec<f64> = (0..fine)
            .map(|i| {
                let block = i / (block_len * MICRO);
                if block % (conditions + 1) == c + 1 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        for i in 0..t {
            let at = i * MICRO;
            let mut acc = 0.0;
            for (lag, hv) in h.iter().enumerate().take(at + 1) {
                acc += hv * boxcar[at - lag];
            }
            x[(i, c)] = acc;
        }
    }
    x.column_mut(conditions).fill(1.0);
    x
}

pub fn simulate_dataset(spec: &SimulationSpec, seed: u64) -> Result<SimulatedData> {
    spec.validate()?;
    let lattice = spec.lattice()?;
    let ops = Arc::new(LatticeOperators::new(&lattice));
    let n = lattice.n_voxels();
    let c = spec.conditions.len();
    let x = block_design(spec.t, c, spec.block_len, spec.tr);
    let mut beta = DMatrix::zeros(c + 1, n);
    let mut params = Vec::with_capacity(c);
    for (i, cond) in spec.conditions.iter().enumerate() {
        let p = cond.params(lattice.voxel_edge())?;
        let prior = SpatialPriorSpec::new(cond.kind, p, HyperPrior::Flat);
        let field = sample_prior(&prior, ops.clone(), rng::derive_seed(seed, i as u64))?;
        beta.row_mut(i).copy_from_slice(&field);
        params.push(p);
    }
    beta.row_mut(c).fill(spec.intercept);
    let mut y = &x * &beta;
    if let Some(noise) = &spec.noise {
        let p = noise.ar.len();
        let burn = 100 + 10 * p;
        let cols = crate::par::map_indexed(n, |v| {
            let mut r = rng::stream(seed, rng::TAG_NOISE, v as u64);
            let mut e = vec![0.0; burn + spec.t];
            for i in 0..e.len() {
                let z: f64 = StandardNormal.sample(&mut r);
                let mut acc = noise.sd * z;
                for (j, a) in noise.ar.iter().enumerate() {
                    if i > j {
                        acc += a * e[i - j - 1];
                    }
                }
                e[i] = acc;
            }
            Ok(e.split_off(burn))
        })?;
        for (v, e) in cols.iter().enumerate() {
            for (i, ei) in e.iter().enumerate() {
                y[(i, v)] += ei;
            }
        }
    }
    let dataset = Dataset::new(y, x, (0..c).collect())?;
    Ok(SimulatedData {
        lattice,
        dataset,
        beta,
        params,
    })
}

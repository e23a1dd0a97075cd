//! Empirical Bayes: hyperparameters θ = {spatial, λ, A} are moved to a mode
//! of log p(θ | y), then β is summarized conditionally on that mode.

mod dense;
mod evaluate;
mod optimizer;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::glm::{ar_from_unconstrained, ar_to_unconstrained, precompute_lagged, Dataset, LaggedStats, NoiseState};
use crate::lattice::LatticeOperators;
use crate::prior::hyper::HyperPrior;
use crate::prior::matern::tau2_kappa2_from_sigma_rho;
use crate::prior::{Coord, PrecisionOperator, SpatialParams, SpatialPriorSpec};

pub use dense::log_posterior_dense;
pub use evaluate::{evaluate, EvalOptions, Evaluation, Preconditioning, TraceMode};
pub use optimizer::{
    fit_hyperparameters, learning_rate, run_optimizer, EbObjective, FitOutcome, IterationRecord, Objective,
    OptimizerConfig, OptimizerOutcome,
};

/// Gamma(scale u1, shape u2) on each λ_n and N(0, 1/τ_A²) on each AR coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoisePrior {
    pub u1: f64,
    pub u2: f64,
    pub tau_a2: f64,
}

impl Default for NoisePrior {
    fn default() -> Self {
        NoisePrior {
            u1: 10.0,
            u2: 0.1,
            tau_a2: 1e-3,
        }
    }
}

/// Everything that stays fixed while θ moves.
#[derive(Debug, Clone)]
pub struct EbModel {
    pub stats: LaggedStats,
    pub ops: Arc<LatticeOperators>,
    /// One per design column.
    pub specs: Vec<SpatialPriorSpec>,
    pub noise_prior: NoisePrior,
    pub optimize_noise: bool,
}

impl EbModel {
    pub fn new(
        data: &Dataset,
        ops: Arc<LatticeOperators>,
        specs: Vec<SpatialPriorSpec>,
        ar_order: usize,
        noise_prior: NoisePrior,
    ) -> Result<Self> {
        check_len("prior specs", specs.len(), data.k())?;
        if ops.n() != data.n() {
            return Err(Error::Dimension(format!(
                "lattice has {} voxels, data has {}",
                ops.n(),
                data.n()
            )));
        }
        for s in &specs {
            s.validate()?;
        }
        if !(noise_prior.u1 > 0.0 && noise_prior.u2 > 0.0 && noise_prior.tau_a2 >= 0.0) {
            return Err(Error::Parameter {
                name: "noise_prior".into(),
                reason: "u1, u2 must be positive and tau_a2 non-negative".into(),
            });
        }
        Ok(EbModel {
            stats: precompute_lagged(data, ar_order)?,
            ops,
            specs,
            noise_prior,
            optimize_noise: true,
        })
    }

    pub fn n(&self) -> usize {
        self.stats.n
    }

    pub fn k(&self) -> usize {
        self.stats.k
    }

    pub fn ar_order(&self) -> usize {
        self.stats.p
    }

    pub fn build_priors(&self, spatial: &[SpatialParams]) -> Result<Vec<PrecisionOperator>> {
        check_len("spatial parameters", spatial.len(), self.k())?;
        self.specs
            .iter()
            .zip(spatial)
            .map(|(s, p)| {
                let mut spec = s.clone();
                spec.params = *p;
                PrecisionOperator::new(&spec, self.ops.clone())
            })
            .collect()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.specs, self.n(), self.ar_order(), self.optimize_noise)
    }

    /// Spatial parameters at the hyperprior centres, noise from a fit without
    /// spatial priors.
    pub fn initial_state(&self, data: &Dataset) -> Result<HyperState> {
        Ok(HyperState {
            spatial: self.specs.iter().map(prior_center).collect(),
            noise: init_noise(data, self.ar_order())?,
        })
    }
}

/// Current hyperparameters in natural units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperState {
    pub spatial: Vec<SpatialParams>,
    pub noise: NoiseState,
}

/// One optimized coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Spatial { k: usize, coord: Coord, pos: usize },
    Lambda(usize),
    Ar { p: usize, n: usize },
}

/// Ordering of θ: optimized spatial coordinates, then λ0 per voxel, then A0
/// voxel by voxel.
#[derive(Debug, Clone)]
pub struct Layout {
    pub slots: Vec<Slot>,
    pub n_spatial: usize,
}

impl Layout {
    pub fn new(specs: &[SpatialPriorSpec], n: usize, p: usize, noise: bool) -> Self {
        let mut slots = Vec::new();
        for (k, s) in specs.iter().enumerate() {
            for (pos, (&coord, &opt)) in s.kind.coords().iter().zip(&s.optimize).enumerate() {
                if opt {
                    slots.push(Slot::Spatial { k, coord, pos });
                }
            }
        }
        let n_spatial = slots.len();
        if noise {
            slots.extend((0..n).map(Slot::Lambda));
            for v in 0..n {
                slots.extend((0..p).map(|q| Slot::Ar { p: q, n: v }));
            }
        }
        Layout { slots, n_spatial }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_spatial(&self, i: usize) -> bool {
        i < self.n_spatial
    }

    pub fn name(&self, i: usize) -> String {
        match self.slots[i] {
            Slot::Spatial { k, coord, .. } => format!("{}[{}]", coord.name(), k + 1),
            Slot::Lambda(n) => format!("lambda0[{}]", n + 1),
            Slot::Ar { p, n } => format!("a0[{},{}]", p + 1, n + 1),
        }
    }

    pub fn to_theta(&self, state: &HyperState, specs: &[SpatialPriorSpec]) -> Vec<f64> {
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::Spatial { k, pos, .. } => state.spatial[k].to_coords(specs[k].kind)[pos],
                Slot::Lambda(n) => state.noise.lambda[n].ln(),
                Slot::Ar { p, n } => ar_to_unconstrained(state.noise.a[(p, n)]),
            })
            .collect()
    }

    /// Overwrites the coordinates of `base` present in `theta`.
    pub fn apply_theta(&self, theta: &[f64], base: &HyperState, specs: &[SpatialPriorSpec]) -> HyperState {
        let mut st = base.clone();
        let mut coords: Vec<Vec<f64>> = specs
            .iter()
            .zip(&base.spatial)
            .map(|(s, p)| p.to_coords(s.kind))
            .collect();
        for (s, &x) in self.slots.iter().zip(theta) {
            match *s {
                Slot::Spatial { k, pos, .. } => coords[k][pos] = x,
                Slot::Lambda(n) => st.noise.lambda[n] = x.exp(),
                Slot::Ar { p, n } => st.noise.a[(p, n)] = ar_from_unconstrained(x),
            }
        }
        for (k, s) in specs.iter().enumerate() {
            st.spatial[k] = SpatialParams::from_coords(s.kind, &coords[k], &base.spatial[k]);
        }
        st
    }
}

/// Hyperparameters at the centre of the hyperprior: medians for the PC
/// priors, the mean for gamma, the location for log-normal, and the spec's
/// own values when the prior is flat.
pub fn prior_center(spec: &SpatialPriorSpec) -> SpatialParams {
    let ln2 = std::f64::consts::LN_2;
    let mut p = spec.params;
    match spec.hyper {
        HyperPrior::Flat => {}
        HyperPrior::PcMatern { xi2, sigma0, .. } => {
            let (l1, _) = spec.hyper.pc_matern_rates().unwrap();
            // κ^{3/2} ~ Exp(λ1), σ ~ Exp(−log ξ2 / σ0)
            let kappa = (ln2 / l1).powf(2.0 / 3.0);
            let sigma = sigma0 * ln2 / -xi2.ln();
            let (t2, k2) = tau2_kappa2_from_sigma_rho(sigma, 2.0 / kappa);
            p.tau2 = t2;
            p.kappa2 = k2;
        }
        HyperPrior::LogNormal { mu_tau0, mu_kappa0, .. } => {
            p.tau2 = mu_tau0.exp();
            if spec.kind.has_kappa() {
                p.kappa2 = mu_kappa0.exp();
            }
        }
        HyperPrior::PcIcar { .. } => {
            // τ^{-1} ~ Exp(λ2)
            let l2 = spec.hyper.pc_icar_rate().unwrap();
            p.tau2 = (l2 / ln2).powi(2);
        }
        HyperPrior::Gamma { scale, shape } => p.tau2 = scale * shape,
    }
    if spec.kind.coords().contains(&Coord::Hx) {
        p.hx = 1.0;
        p.hy = 1.0;
    }
    p
}

pub const LAMBDA_CEILING: f64 = 1e12;
pub const AR_CLIP: f64 = 0.99;

/// Per-voxel least squares without spatial priors, then an AR(P) fit to the
/// residuals by least squares.
pub fn init_noise(data: &Dataset, p: usize) -> Result<NoiseState> {
    let (t, n) = (data.t(), data.n());
    if p >= t {
        return Err(Error::Domain(format!("AR order {p} needs more than {t} time points")));
    }
    let xtx = data.x.transpose() * &data.x;
    let deficient = || Error::Numerical("design matrix is rank deficient".into());
    let chol = xtx.clone().cholesky().ok_or_else(deficient)?;
    let scale = xtx.diagonal().max();
    if chol.l_dirty().diagonal().iter().any(|l| l * l <= 1e-12 * scale) {
        return Err(deficient());
    }
    let w = chol.solve(&(data.x.transpose() * &data.y));
    let e = &data.y - &data.x * w;
    let mut lambda = vec![0.0; n];
    let mut a = DMatrix::zeros(p, n);
    let rows = t - p;
    for v in 0..n {
        let col = e.column(v);
        let target = DVector::from_iterator(rows, col.rows(p, rows).iter().copied());
        let mut coef = DVector::zeros(p);
        if p > 0 {
            let z = DMatrix::from_fn(rows, p, |r, j| col[p + r - j - 1]);
            if let Some(c) = (z.transpose() * &z).cholesky() {
                coef = c.solve(&(z.transpose() * &target));
            }
            coef.apply(|x| *x = x.clamp(-AR_CLIP, AR_CLIP));
            let innov = &target - z * &coef;
            lambda[v] = precision_from_rss(innov.norm_squared(), rows);
        } else {
            lambda[v] = precision_from_rss(target.norm_squared(), rows);
        }
        a.column_mut(v).copy_from(&coef);
    }
    Ok(NoiseState { lambda, a })
}

fn precision_from_rss(rss: f64, rows: usize) -> f64 {
    let var = rss / rows as f64;
    if var > 0.0 {
        (1.0 / var).min(LAMBDA_CEILING)
    } else {
        LAMBDA_CEILING
    }
}

//! Spatial priors on one regressor's coefficient field.
//!
//! | kind  | precision Q                          |
//! |-------|--------------------------------------|
//! | GS    | τ² I                                 |
//! | ICAR1 | τ² G                                 |
//! | M1    | τ² (κ² I + G)                        |
//! | ICAR2 | τ² G G                               |
//! | M2    | τ² K K,  K = κ² I + G                |
//! | AM2   | τ² K K,  K = κ² I + hx Gx + hy Gy + hz Gz, hz = 1/(hx hy) |
//!
//! Hyperparameters are handled in log coordinates τ0 = log τ², κ0 = log κ²,
//! h0 = log h.

pub mod hyper;
pub mod matern;
pub mod sample;

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, param_err, Error, Result};
use crate::krylov::{DenseOracle, LinearOperator, PcgOptions, Preconditioner, ProbeSet, Solver};
use crate::lattice::LatticeOperators;
use crate::sparse::CsrMatrix;

pub use hyper::{hyperprior_eval, HyperPrior, HyperTerms};
pub use matern::{sigma_rho, spectral_variance_oracle};
pub use sample::{icar_variance_constant, sample_prior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PriorKind {
    Gs,
    Icar1,
    M1,
    Icar2,
    M2,
    Am2,
}

/// One optimizable hyperparameter, in log coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coord {
    Tau,
    Kappa,
    Hx,
    Hy,
}

impl Coord {
    pub fn name(self) -> &'static str {
        match self {
            Coord::Tau => "tau0",
            Coord::Kappa => "kappa0",
            Coord::Hx => "h0x",
            Coord::Hy => "h0y",
        }
    }
}

impl PriorKind {
    pub fn alpha(self) -> u8 {
        match self {
            PriorKind::Gs => 0,
            PriorKind::Icar1 | PriorKind::M1 => 1,
            PriorKind::Icar2 | PriorKind::M2 | PriorKind::Am2 => 2,
        }
    }

    pub fn is_intrinsic(self) -> bool {
        matches!(self, PriorKind::Icar1 | PriorKind::Icar2)
    }

    pub fn has_kappa(self) -> bool {
        matches!(self, PriorKind::M1 | PriorKind::M2 | PriorKind::Am2)
    }

    pub fn coords(self) -> &'static [Coord] {
        match self {
            PriorKind::Gs | PriorKind::Icar1 | PriorKind::Icar2 => &[Coord::Tau],
            PriorKind::M1 | PriorKind::M2 => &[Coord::Tau, Coord::Kappa],
            PriorKind::Am2 => &[Coord::Tau, Coord::Kappa, Coord::Hx, Coord::Hy],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PriorKind::Gs => "GS",
            PriorKind::Icar1 => "ICAR1",
            PriorKind::M1 => "M1",
            PriorKind::Icar2 => "ICAR2",
            PriorKind::M2 => "M2",
            PriorKind::Am2 => "AM2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub tau2: f64,
    #[serde(default)]
    pub kappa2: f64,
    #[serde(default = "one")]
    pub hx: f64,
    #[serde(default = "one")]
    pub hy: f64,
}

fn one() -> f64 {
    1.0
}

impl SpatialParams {
    pub fn new(tau2: f64, kappa2: f64) -> Self {
        SpatialParams {
            tau2,
            kappa2,
            hx: 1.0,
            hy: 1.0,
        }
    }

    pub fn hz(&self) -> f64 {
        1.0 / (self.hx * self.hy)
    }

    pub fn to_coords(&self, kind: PriorKind) -> Vec<f64> {
        kind.coords()
            .iter()
            .map(|c| match c {
                Coord::Tau => self.tau2.ln(),
                Coord::Kappa => self.kappa2.ln(),
                Coord::Hx => self.hx.ln(),
                Coord::Hy => self.hy.ln(),
            })
            .collect()
    }

    pub fn from_coords(kind: PriorKind, coords: &[f64], base: &SpatialParams) -> Self {
        let mut p = *base;
        for (c, &v) in kind.coords().iter().zip(coords) {
            match c {
                Coord::Tau => p.tau2 = v.exp(),
                Coord::Kappa => p.kappa2 = v.exp(),
                Coord::Hx => p.hx = v.exp(),
                Coord::Hy => p.hy = v.exp(),
            }
        }
        p
    }
}

/// Prior family, hyperparameter values and hyperprior for one regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialPriorSpec {
    pub kind: PriorKind,
    pub params: SpatialParams,
    pub hyper: HyperPrior,
    /// Variance σh² of the log-normal prior on (log hx, log hy); AM2 only.
    pub aniso_sigma2: f64,
    /// Per coordinate of `kind.coords()`.
    pub optimize: Vec<bool>,
}

pub const GS_DEFAULT_TAU2: f64 = 1e-12;
pub const ANISO_SIGMA2_DEFAULT: f64 = 0.01;

impl SpatialPriorSpec {
    pub fn new(kind: PriorKind, params: SpatialParams, hyper: HyperPrior) -> Self {
        SpatialPriorSpec {
            kind,
            params,
            hyper,
            aniso_sigma2: ANISO_SIGMA2_DEFAULT,
            optimize: vec![kind != PriorKind::Gs; kind.coords().len()],
        }
    }

    /// Fixed, near-flat GS prior for nuisance regressors.
    pub fn nuisance() -> Self {
        Self::new(
            PriorKind::Gs,
            SpatialParams::new(GS_DEFAULT_TAU2, 0.0),
            HyperPrior::Flat,
        )
    }

    pub fn is_optimized(&self) -> bool {
        self.optimize.iter().any(|&o| o)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if !(p.tau2 > 0.0 && p.tau2.is_finite()) {
            return Err(param_err("tau2", "must be positive and finite"));
        }
        match self.kind {
            PriorKind::Icar1 | PriorKind::Icar2 if p.kappa2 != 0.0 => {
                return Err(param_err("kappa2", "must be 0 for ICAR priors"));
            }
            PriorKind::M1 | PriorKind::M2 | PriorKind::Am2 if !(p.kappa2 > 0.0 && p.kappa2.is_finite()) => {
                return Err(param_err("kappa2", "must be positive for Matérn priors"));
            }
            _ => {}
        }
        if self.kind == PriorKind::Am2 {
            if !(p.hx > 0.0 && p.hy > 0.0 && p.hx.is_finite() && p.hy.is_finite()) {
                return Err(param_err("hx/hy", "must be positive"));
            }
            if !(self.aniso_sigma2 > 0.0) {
                return Err(param_err("aniso_sigma2", "must be positive"));
            }
        }
        if self.optimize.len() != self.kind.coords().len() {
            return Err(param_err(
                "optimize",
                format!("{} flags given, {} needed", self.optimize.len(), self.kind.coords().len()),
            ));
        }
        self.hyper.validate(self.kind)
    }
}

/// Matrix-free precision Q of one regressor.
#[derive(Debug, Clone)]
pub struct PrecisionOperator {
    kind: PriorKind,
    params: SpatialParams,
    ops: Arc<LatticeOperators>,
    /// K for α ≥ 1 (G itself for ICAR kinds).
    k: Option<CsrMatrix>,
    /// (K', K'') with respect to h0x and h0y (AM2 only).
    dk: Vec<(CsrMatrix, CsrMatrix)>,
}

impl PrecisionOperator {
    pub fn new(spec: &SpatialPriorSpec, ops: Arc<LatticeOperators>) -> Result<Self> {
        spec.validate()?;
        let p = spec.params;
        let [gx, gy, gz] = &ops.g_axis;
        let (k, dk) = match spec.kind {
            PriorKind::Gs => (None, Vec::new()),
            PriorKind::Icar1 | PriorKind::Icar2 => (Some(ops.g.clone()), Vec::new()),
            PriorKind::M1 | PriorKind::M2 => (Some(CsrMatrix::combine(p.kappa2, &[(1.0, &ops.g)])), Vec::new()),
            PriorKind::Am2 => {
                let hz = p.hz();
                let k = CsrMatrix::combine(p.kappa2, &[(p.hx, gx), (p.hy, gy), (hz, gz)]);
                let dk = [(p.hx, gx), (p.hy, gy)]
                    .iter()
                    .map(|&(h, ga)| {
                        (
                            CsrMatrix::combine(0.0, &[(h, ga), (-hz, gz)]),
                            CsrMatrix::combine(0.0, &[(h, ga), (hz, gz)]),
                        )
                    })
                    .collect();
                (Some(k), dk)
            }
        };
        Ok(PrecisionOperator {
            kind: spec.kind,
            params: p,
            ops,
            k,
            dk,
        })
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    pub fn params(&self) -> &SpatialParams {
        &self.params
    }

    pub fn lattice_ops(&self) -> &Arc<LatticeOperators> {
        &self.ops
    }

    pub fn n(&self) -> usize {
        self.ops.n()
    }

    pub fn k_matrix(&self) -> Option<&CsrMatrix> {
        self.k.as_ref()
    }

    /// Dimension of the Laplacian nullspace for intrinsic kinds, else 0.
    pub fn nullity(&self) -> usize {
        if self.kind.is_intrinsic() {
            self.ops.n_components
        } else {
            0
        }
    }

    pub fn apply_k(&self, x: &[f64], y: &mut [f64]) {
        match &self.k {
            Some(k) => k.mul_vec(x, y),
            None => y.copy_from_slice(x),
        }
    }

    fn k_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        self.apply_k(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let t = self.params.tau2;
        match (self.kind.alpha(), &self.k) {
            (1, Some(k)) => k.diagonal().into_iter().map(|d| t * d).collect(),
            (2, Some(k)) => k.diagonal_of_square().into_iter().map(|d| t * d).collect(),
            _ => vec![t; self.n()],
        }
    }

    /// Derivative of Q with respect to a log coordinate, applied to `v`.
    pub fn apply_dq(&self, coord: Coord, second: bool, v: &[f64]) -> Vec<f64> {
        let t = self.params.tau2;
        let k2 = self.params.kappa2;
        match coord {
            Coord::Tau => self.apply_vec(v),
            Coord::Kappa if self.kind.alpha() == 1 => v.iter().map(|x| t * k2 * x).collect(),
            Coord::Kappa => {
                let kv = self.k_vec(v);
                if second {
                    kv.iter().zip(v).map(|(a, b)| 2.0 * t * k2 * (a + k2 * b)).collect()
                } else {
                    kv.iter().map(|a| 2.0 * t * k2 * a).collect()
                }
            }
            Coord::Hx | Coord::Hy => {
                let (d1, d2) = &self.dk[if coord == Coord::Hx { 0 } else { 1 }];
                let kv = self.k_vec(v);
                let d1v = d1.apply(v);
                let mut out = vec![0.0; v.len()];
                if second {
                    // K''K + 2K'K' + KK''
                    let a = d2.apply(&kv);
                    let b = d1.apply(&d1v);
                    let c = self.k_vec(&d2.apply(v));
                    for i in 0..v.len() {
                        out[i] = t * (a[i] + 2.0 * b[i] + c[i]);
                    }
                } else {
                    let a = d1.apply(&kv);
                    let c = self.k_vec(&d1v);
                    for i in 0..v.len() {
                        out[i] = t * (a[i] + c[i]);
                    }
                }
                out
            }
        }
    }

    /// K' (`second = false`) or K'' with respect to h0x / h0y.
    pub fn apply_dk(&self, coord: Coord, second: bool, v: &[f64]) -> Vec<f64> {
        let (d1, d2) = &self.dk[if coord == Coord::Hx { 0 } else { 1 }];
        if second {
            d2.apply(v)
        } else {
            d1.apply(v)
        }
    }

    /// Traces of K-functions needed by the log-determinant derivatives.
    ///
    /// The same loop serves exact (basis probes, dense solves) and stochastic
    /// evaluation.
    pub fn k_traces(&self, probes: &ProbeSet, solver: &Solver) -> Result<KTraces> {
        let Some(k) = &self.k else {
            return Ok(KTraces::default());
        };
        if !self.kind.has_kappa() {
            return Ok(KTraces::default());
        }
        let n = self.n();
        let m = probes.count(n);
        let aniso = self.kind == PriorKind::Am2;
        let rows: Vec<[f64; 8]> = crate::par::map_indexed(m, |j| {
            let v = probes.vector(j as u64, n);
            let w = solver.solve(k, &v, None)?;
            let mut r = [0.0; 8];
            r[0] = dot(&v, &w);
            r[1] = dot(&w, &w);
            if aniso {
                for a in 0..2 {
                    let (d1, d2) = &self.dk[a];
                    let d1v = d1.apply(&v);
                    r[2 + a] = dot(&w, &d1v);
                    r[4 + a] = dot(&w, &d2.apply(&v));
                    let z = solver.solve(k, &d1v, None)?;
                    r[6 + a] = dot(&d1.apply(&w), &z);
                }
            }
            Ok(r)
        })?;
        let wgt = probes.weight();
        let mut s = [0.0; 8];
        for r in &rows {
            for i in 0..8 {
                s[i] += r[i];
            }
        }
        let s = s.map(|x| x * wgt);
        Ok(KTraces {
            inv: s[0],
            inv2: s[1],
            inv_dk: [s[2], s[3]],
            inv_d2k: [s[4], s[5]],
            inv_dk_inv_dk: [s[6], s[7]],
        })
    }

    /// First and second derivatives of log|Q| (generalized for intrinsic kinds).
    pub fn logdet_derivatives(&self, coord: Coord, kt: &KTraces) -> (f64, f64) {
        let k2 = self.params.kappa2;
        match coord {
            Coord::Tau => ((self.n() - self.nullity()) as f64, 0.0),
            Coord::Kappa => {
                let scale = self.kind.alpha() as f64;
                let d1 = k2 * kt.inv;
                let d2 = k2 * kt.inv - k2 * k2 * kt.inv2;
                (scale * d1, scale * d2)
            }
            Coord::Hx | Coord::Hy => {
                let a = if coord == Coord::Hx { 0 } else { 1 };
                (
                    2.0 * kt.inv_dk[a],
                    2.0 * (kt.inv_d2k[a] - kt.inv_dk_inv_dk[a]),
                )
            }
        }
    }

    /// Exact log|Q| (generalized determinant for intrinsic kinds), dense.
    pub fn dense_logdet(&self) -> Result<f64> {
        let n = self.n();
        let t = self.params.tau2;
        let k = match &self.k {
            None => return Ok(n as f64 * t.ln()),
            Some(k) => k,
        };
        let alpha = self.kind.alpha() as f64;
        let rank = (n - self.nullity()) as f64;
        let kd = k.to_dense();
        let log_k = if self.kind.is_intrinsic() {
            let eig = SymmetricEigen::new(kd);
            let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ev[self.nullity()..].iter().map(|e| e.ln()).sum::<f64>()
        } else {
            DenseOracle::from_matrix(kd)?.logdet()
        };
        Ok(rank * t.ln() + alpha * log_k)
    }

    pub fn dense(&self) -> DMatrix<f64> {
        crate::krylov::densify(self).expect("prior operator within dense limit")
    }

    /// Number of standard normals consumed by [`Self::apply_sqrt`].
    pub fn sqrt_dim(&self) -> usize {
        match self.kind {
            PriorKind::Icar1 => self.ops.edges.len(),
            PriorKind::M1 => self.n() + self.ops.edges.len(),
            _ => self.n(),
        }
    }

    /// y = L z with L Lᵀ = Q.
    ///
    /// First-order kinds use the edge incidence matrix D (DᵀD = G), so
    /// L = τ[κI, Dᵀ]; second-order kinds use L = τK.
    pub fn apply_sqrt(&self, z: &[f64], y: &mut [f64]) {
        let tau = self.params.tau2.sqrt();
        let n = self.n();
        match self.kind {
            PriorKind::Gs => {
                for (yi, zi) in y.iter_mut().zip(z) {
                    *yi = tau * zi;
                }
            }
            PriorKind::Icar1 => {
                self.ops.incidence_t(z, y);
                y.iter_mut().for_each(|v| *v *= tau);
            }
            PriorKind::M1 => {
                self.ops.incidence_t(&z[n..], y);
                let kappa = self.params.kappa2.sqrt();
                for i in 0..n {
                    y[i] = tau * (y[i] + kappa * z[i]);
                }
            }
            _ => {
                self.apply_k(z, y);
                y.iter_mut().for_each(|v| *v *= tau);
            }
        }
    }
}

impl LinearOperator for PrecisionOperator {
    fn dim(&self) -> usize {
        self.n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let t = self.params.tau2;
        match (self.kind.alpha(), &self.k) {
            (2, Some(k)) => {
                let kx = k.apply(x);
                k.mul_vec(&kx, y);
                y.iter_mut().for_each(|v| *v *= t);
            }
            (1, Some(k)) => {
                k.mul_vec(x, y);
                y.iter_mut().for_each(|v| *v *= t);
            }
            _ => {
                for (yi, xi) in y.iter_mut().zip(x) {
                    *yi = t * xi;
                }
            }
        }
    }
}

/// Checked variant of [`LinearOperator::apply`].
pub fn apply_precision(op: &PrecisionOperator, v: &[f64]) -> Result<Vec<f64>> {
    check_len("precision input", v.len(), op.n())?;
    Ok(op.apply_vec(v))
}

/// Trace quantities of K used in log|Q| derivatives.
#[derive(Debug, Clone, Copy, Default)]
pub struct KTraces {
    /// tr(K⁻¹)
    pub inv: f64,
    /// tr(K⁻²)
    pub inv2: f64,
    /// tr(K⁻¹K'_a)
    pub inv_dk: [f64; 2],
    /// tr(K⁻¹K''_a)
    pub inv_d2k: [f64; 2],
    /// tr(K⁻¹K'_a K⁻¹K'_a)
    pub inv_dk_inv_dk: [f64; 2],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// PCG solver for K with its Jacobi preconditioner.
pub fn k_solver_pcg(op: &PrecisionOperator, opts: PcgOptions) -> Result<(PcgOptions, Preconditioner)> {
    match op.k_matrix() {
        Some(k) => Ok((opts, Preconditioner::jacobi(&k.diagonal())?)),
        None => Err(Error::Unsupported("GS prior has no K operator".into())),
    }
}

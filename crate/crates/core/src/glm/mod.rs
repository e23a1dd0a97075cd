//! Regression model with AR(P) noise per voxel.
//!
//! y_n = X w_n + e_n, with e_{t} = Σ_p a_p e_{t−p} + ε_t and ε_t ~ N(0, 1/λ_n).
//! Coefficients are stacked regressor-major: β[k·N + n] = W[k, n].

mod lagged;
mod system;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};

pub use lagged::{precompute_lagged, LaggedStats};
pub use system::{assemble_conditional_posterior, PosteriorSystem};

/// Observations and design.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// T×N observations.
    pub y: DMatrix<f64>,
    /// T×K design.
    pub x: DMatrix<f64>,
    /// Regressors with spatial priors (0-based columns of `x`).
    pub activity: Vec<usize>,
    /// The remaining regressors.
    pub nuisance: Vec<usize>,
    /// Mean of Y over voxels and time.
    pub global_mean: f64,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>, activity: Vec<usize>) -> Result<Self> {
        if y.nrows() != x.nrows() {
            return Err(Error::Dimension(format!(
                "Y has {} time points, X has {} rows",
                y.nrows(),
                x.nrows()
            )));
        }
        let k = x.ncols();
        let mut seen = vec![false; k];
        for &a in &activity {
            if a >= k {
                return Err(param_err("activity", format!("index {} outside 1..{k}", a + 1)));
            }
            if seen[a] {
                return Err(param_err("activity", format!("index {} repeated", a + 1)));
            }
            seen[a] = true;
        }
        let nuisance = (0..k).filter(|&i| !seen[i]).collect();
        let global_mean = y.mean();
        Ok(Dataset {
            y,
            x,
            activity,
            nuisance,
            global_mean,
        })
    }

    pub fn t(&self) -> usize {
        self.y.nrows()
    }

    pub fn n(&self) -> usize {
        self.y.ncols()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }
}

/// Noise precisions λ (N) and AR coefficients A (P×N).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseState {
    pub lambda: Vec<f64>,
    pub a: DMatrix<f64>,
}

impl NoiseState {
    pub fn white(lambda: Vec<f64>) -> Self {
        let n = lambda.len();
        NoiseState {
            lambda,
            a: DMatrix::zeros(0, n),
        }
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn a_col(&self, n: usize) -> Vec<f64> {
        self.a.column(n).iter().copied().collect()
    }
}

/// A0 = log((1 + A)/2) − log((1 − A)/2) = 2 artanh A.
pub fn ar_to_unconstrained(a: f64) -> f64 {
    ((1.0 + a) / (1.0 - a)).ln()
}

/// tanh saturates to ±1 for |A0| ≳ 37; the clamp keeps A strictly inside.
pub fn ar_from_unconstrained(a0: f64) -> f64 {
    const EDGE: f64 = 1.0 - 1e-12;
    (a0 / 2.0).tanh().clamp(-EDGE, EDGE)
}

/// dA/dA0.
pub fn ar_chain_factor(a: f64) -> f64 {
    (1.0 - a * a) / 2.0
}

/// Stationary variance γ0 of an AR(P) process with innovation precision λ.
pub fn ar_process_variance(a: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(param_err("lambda", "must be positive"));
    }
    let p = a.len();
    if p == 0 {
        return Ok(1.0 / lambda);
    }
    // step-down recursion: stationary iff every reflection coefficient is in (−1, 1)
    let mut phi = a.to_vec();
    for m in (1..=p).rev() {
        let k = phi[m - 1];
        if !(k.abs() < 1.0) {
            return Err(Error::Domain(format!("AR coefficients {a:?} are not stationary")));
        }
        let prev: Vec<f64> = (1..m).map(|j| (phi[j - 1] + k * phi[m - j - 1]) / (1.0 - k * k)).collect();
        phi = prev;
    }
    // Yule–Walker: γ_k − Σ_p a_p γ_{|k−p|} = δ_{k0}/λ, k = 0..P
    let mut m = DMatrix::zeros(p + 1, p + 1);
    for k in 0..=p {
        m[(k, k)] += 1.0;
        for (j, &aj) in a.iter().enumerate() {
            let lag = (k as isize - (j as isize + 1)).unsigned_abs();
            m[(k, lag)] -= aj;
        }
    }
    let mut rhs = DVector::zeros(p + 1);
    rhs[0] = 1.0 / lambda;
    let g = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular Yule–Walker system".into()))?;
    Ok(g[0])
}

//! Cross-validation over left-out voxels.
//!
//! The time series of the voxels in D are predicted from the other voxels:
//! their likelihood blocks are zeroed, the activity part is predicted from
//! the conditional posterior mean, and the nuisance regressors are then refit
//! voxel by voxel on what remains, with θ held at its fitted value.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::scores::{proper_scores, ScoreReport};
use crate::eb::{EbModel, HyperState};
use crate::error::{Error, Result};
use crate::glm::{ar_process_variance, Dataset, PosteriorSystem};
use crate::posterior::{summarize, PosteriorGmrf, PosteriorOptions};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvPlan {
    /// Percentage of voxels left out per split.
    pub leave_out_pct: f64,
    pub n_splits: usize,
    /// Level of the central interval in the interval score.
    pub u: f64,
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan {
            leave_out_pct: 90.0,
            n_splits: 50,
            u: 0.05,
        }
    }
}

impl CvPlan {
    pub fn validate(&self, n_voxels: usize) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: format!("cv.{key}"),
                reason,
            })
        };
        if !(self.leave_out_pct > 0.0 && self.leave_out_pct < 100.0) {
            return bad("leave_out_pct", "must lie strictly between 0 and 100".into());
        }
        if self.n_splits == 0 {
            return bad("n_splits", "must be at least 1".into());
        }
        if !(self.u > 0.0 && self.u < 1.0) {
            return bad("u", "must lie in (0, 1)".into());
        }
        let d = self.left_out(n_voxels);
        if d == 0 || d == n_voxels {
            return bad(
                "leave_out_pct",
                format!("leaves out {d} of {n_voxels} voxels; at least one must be left out and one kept"),
            );
        }
        Ok(())
    }

    pub fn left_out(&self, n_voxels: usize) -> usize {
        (self.leave_out_pct / 100.0 * n_voxels as f64).round() as usize
    }

    /// Sorted left-out voxels of split `j`.
    pub fn split(&self, n_voxels: usize, seed: u64, j: usize) -> Vec<usize> {
        let mut r = rng::stream(seed, rng::TAG_SPLIT, j as u64);
        let mut d = sample(&mut r, n_voxels, self.left_out(n_voxels)).into_vec();
        d.sort_unstable();
        d
    }
}

/// Errors and predictive variances, T × |D|, for the voxels in `voxels`.
#[derive(Debug, Clone)]
pub struct CvErrors {
    pub voxels: Vec<usize>,
    pub errors: DMatrix<f64>,
    pub variances: DMatrix<f64>,
}

impl CvErrors {
    pub fn scores(&self, u: f64) -> Result<ScoreReport> {
        proper_scores(self.errors.as_slice(), self.variances.as_slice(), u)
    }
}

fn conditional_posterior(
    model: &EbModel,
    state: &HyperState,
    left_out: &[usize],
    opts: &PosteriorOptions,
    seed: u64,
) -> Result<PosteriorGmrf> {
    let n = model.n();
    let mut mask = vec![false; n];
    for &v in left_out {
        if v >= n {
            return Err(Error::Dimension(format!("left-out voxel {} outside 1..{n}", v + 1)));
        }
        mask[v] = true;
    }
    let priors = model.build_priors(&state.spatial)?;
    let sys = PosteriorSystem::assemble(&model.stats, &state.noise, priors, Some(&mask))?;
    summarize(&sys, opts, seed, None)
}

/// Posterior mean of the nuisance coefficients of one voxel given its
/// residual series, under the voxel's AR noise and the nuisance GS priors.
fn refit_nuisance(xn: &DMatrix<f64>, r: &[f64], a: &[f64], lambda: f64, prior_prec: &[f64]) -> Result<DVector<f64>> {
    let (t, kn) = (xn.nrows(), xn.ncols());
    let p = a.len();
    let rows = t - p;
    let white = |col: &dyn Fn(usize) -> f64, i: usize| {
        let mut v = col(p + i);
        for (j, aj) in a.iter().enumerate() {
            v -= aj * col(p + i - j - 1);
        }
        v
    };
    let xw = DMatrix::from_fn(rows, kn, |i, c| white(&|s| xn[(s, c)], i));
    let rw = DVector::from_fn(rows, |i, _| white(&|s| r[s], i));
    let mut lhs = xw.transpose() * &xw * lambda;
    for (c, q) in prior_prec.iter().enumerate() {
        lhs[(c, c)] += q;
    }
    let rhs = xw.transpose() * rw * lambda;
    lhs.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Numerical("nuisance refit is singular".into()))
}

/// Cross-validation errors and predictive variances for left-out set D.
/// With D empty these are the in-sample errors Y − X E(W | Y, θ) over all
/// voxels.
pub fn cv_errors(
    model: &EbModel,
    data: &Dataset,
    state: &HyperState,
    left_out: &[usize],
    opts: &PosteriorOptions,
    seed: u64,
) -> Result<CvErrors> {
    let (t, n, k) = (data.t(), model.n(), model.k());
    let post = conditional_posterior(model, state, left_out, opts, seed)?;
    let w = post.mean_matrix();
    let in_sample = left_out.is_empty();
    let voxels: Vec<usize> = if in_sample { (0..n).collect() } else { left_out.to_vec() };
    let act = &data.activity;
    let nuis = &data.nuisance;
    let xa = data.x.select_columns(act.iter());
    let xn = data.x.select_columns(nuis.iter());
    let prior_prec: Vec<f64> = nuis.iter().map(|&c| model.specs[c].params.tau2).collect();

    let mut errors = DMatrix::zeros(t, voxels.len());
    let mut variances = DMatrix::zeros(t, voxels.len());
    for (j, &v) in voxels.iter().enumerate() {
        let a = state.noise.a_col(v);
        let lambda = state.noise.lambda[v];
        let wa = DVector::from_iterator(act.len(), act.iter().map(|&c| w[(c, v)]));
        let mut e: DVector<f64> = data.y.column(v) - &xa * &wa;
        if in_sample {
            let wn = DVector::from_iterator(nuis.len(), nuis.iter().map(|&c| w[(c, v)]));
            e -= &xn * wn;
        } else if !nuis.is_empty() {
            let wn = refit_nuisance(&xn, e.as_slice(), &a, lambda, &prior_prec)?;
            e -= &xn * wn;
        }
        errors.set_column(j, &e);

        let base = ar_process_variance(&a, lambda)?;
        let cov = &post.cov[v];
        let va = DMatrix::from_fn(act.len(), act.len(), |r, c| cov[(act[r], act[c])]);
        for s in 0..t {
            let xt = xa.row(s).transpose();
            variances[(s, j)] = base + (xt.transpose() * &va * &xt)[(0, 0)];
        }
    }
    debug_assert_eq!(k, data.k());
    Ok(CvErrors {
        voxels,
        errors,
        variances,
    })
}

/// Scores for every split of `plan`.
pub fn run_cv(
    model: &EbModel,
    data: &Dataset,
    state: &HyperState,
    plan: &CvPlan,
    opts: &PosteriorOptions,
    seed: u64,
) -> Result<Vec<ScoreReport>> {
    let n = model.n();
    plan.validate(n)?;
    (0..plan.n_splits)
        .map(|j| {
            let d = plan.split(n, seed, j);
            cv_errors(model, data, state, &d, opts, rng::derive_seed(seed, j as u64))?.scores(plan.u)
        })
        .collect()
}

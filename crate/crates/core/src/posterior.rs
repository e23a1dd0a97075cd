//! Summaries of β | y, θ̂: the mean, per-voxel marginal covariances by
//! Rao-Blackwellized Monte Carlo, and posterior probability maps.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::eb::Preconditioning;
use crate::error::{check_len, Error, Result};
use crate::glm::PosteriorSystem;
use crate::krylov::{pcg_solve, sample_posterior, PcgOptions, Preconditioner};
use crate::par;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorOptions {
    pub n_rbmc: usize,
    pub pcg_tol: f64,
    pub pcg_max_iter: usize,
    pub preconditioning: Preconditioning,
}

impl Default for PosteriorOptions {
    fn default() -> Self {
        PosteriorOptions {
            n_rbmc: 100,
            pcg_tol: 1e-8,
            pcg_max_iter: 5000,
            preconditioning: Preconditioning::Jacobi,
        }
    }
}

impl PosteriorOptions {
    pub fn pcg(&self) -> PcgOptions {
        PcgOptions {
            tol: self.pcg_tol,
            max_iter: self.pcg_max_iter,
        }
    }
}

/// Mean and marginal covariances of the activity coefficients.
#[derive(Debug, Clone)]
pub struct PosteriorGmrf {
    pub n: usize,
    pub k: usize,
    /// Regressor-major, β[k·N + n].
    pub mean: Vec<f64>,
    /// K×K covariance per voxel.
    pub cov: Vec<DMatrix<f64>>,
    pub n_rbmc: usize,
}

impl PosteriorGmrf {
    /// K×N view of the mean.
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.n, |c, v| self.mean[c * self.n + v])
    }

    pub fn mean_col(&self, v: usize) -> Vec<f64> {
        (0..self.k).map(|c| self.mean[c * self.n + v]).collect()
    }

    /// Marginal standard deviation of regressor `c` at every voxel.
    pub fn sd(&self, c: usize) -> Vec<f64> {
        self.cov.iter().map(|s| s[(c, c)].sqrt()).collect()
    }
}

fn preconditioner(sys: &PosteriorSystem, kind: Preconditioning) -> Result<Preconditioner> {
    match kind {
        Preconditioning::Jacobi => sys.jacobi(),
        Preconditioning::BlockJacobi => sys.block_jacobi(),
    }
}

/// μ̃ = Q̃⁻¹ b.
pub fn posterior_mean(sys: &PosteriorSystem, opts: &PosteriorOptions, warm: Option<&[f64]>) -> Result<Vec<f64>> {
    let pre = preconditioner(sys, opts.preconditioning)?;
    Ok(pcg_solve(sys, sys.b(), warm, &opts.pcg(), &pre)?.x)
}

/// Draw `j` of a seeded sequence from N(μ̃, Q̃⁻¹). Each draw has its own
/// stream, so the sequence does not depend on thread scheduling.
pub fn posterior_draw(
    sys: &PosteriorSystem,
    mean: &[f64],
    seed: u64,
    j: u64,
    opts: &PosteriorOptions,
    pre: &Preconditioner,
) -> Result<Vec<f64>> {
    let mut r = rng::stream(seed, rng::TAG_SAMPLE, j);
    sample_posterior(sys, sys.b(), &mut r, &opts.pcg(), pre, Some(mean))
}

/// Inverses of the K×K diagonal blocks of Q̃.
fn block_inverses(sys: &PosteriorSystem) -> Result<Vec<DMatrix<f64>>> {
    let k = sys.k();
    let d = sys.diagonal_blocks();
    (0..sys.n())
        .map(|v| {
            DMatrix::from_row_slice(k, k, &d[v * k * k..(v + 1) * k * k])
                .cholesky()
                .map(|c| c.inverse())
                .ok_or_else(|| Error::Numerical(format!("diagonal block at voxel {} is singular", v + 1)))
        })
        .collect()
}

/// E[W_col(n) | all other voxels] for every n, given the draw `w`:
/// w_n + B_n⁻¹ (b − Q̃w)_n with B_n the diagonal block.
fn conditional_means(sys: &PosteriorSystem, binv: &[DMatrix<f64>], w: &[f64]) -> Vec<f64> {
    let (n, k) = (sys.n(), sys.k());
    let mut r = crate::krylov::LinearOperator::apply_vec(sys, w);
    for (ri, bi) in r.iter_mut().zip(sys.b()) {
        *ri = bi - *ri;
    }
    let mut out = w.to_vec();
    for v in 0..n {
        for a in 0..k {
            let mut acc = 0.0;
            for c in 0..k {
                acc += binv[v][(a, c)] * r[c * n + v];
            }
            out[a * n + v] += acc;
        }
    }
    out
}

/// Var(W_col(n)) = B_n⁻¹ + Var(E[W_col(n) | rest]), the second term from the
/// given draws. The mean of the conditional means is μ̃, so the spread is
/// taken around `mean`.
pub fn rbmc_from_draws(sys: &PosteriorSystem, mean: &[f64], draws: &[Vec<f64>]) -> Result<Vec<DMatrix<f64>>> {
    let (n, k) = (sys.n(), sys.k());
    check_len("posterior mean", mean.len(), n * k)?;
    let binv = block_inverses(sys)?;
    let mut acc = vec![DMatrix::<f64>::zeros(k, k); n];
    let cms = par::map_indexed(draws.len(), |j| {
        check_len("posterior draw", draws[j].len(), n * k)?;
        Ok(conditional_means(sys, &binv, &draws[j]))
    })?;
    for cm in &cms {
        accumulate(&mut acc, cm, mean, n, k);
    }
    Ok(finish(acc, binv, draws.len()))
}

fn accumulate(acc: &mut [DMatrix<f64>], cm: &[f64], mean: &[f64], n: usize, k: usize) {
    for (v, s) in acc.iter_mut().enumerate() {
        for a in 0..k {
            let da = cm[a * n + v] - mean[a * n + v];
            for c in 0..k {
                s[(a, c)] += da * (cm[c * n + v] - mean[c * n + v]);
            }
        }
    }
}

fn finish(acc: Vec<DMatrix<f64>>, binv: Vec<DMatrix<f64>>, count: usize) -> Vec<DMatrix<f64>> {
    let m = count.max(1) as f64;
    acc.into_iter().zip(binv).map(|(s, b)| b + s / m).collect()
}

const CHUNK: usize = 64;

/// RBMC covariances from `opts.n_rbmc` fresh draws, generated in parallel
/// chunks so that only a chunk of draws is held at a time.
pub fn rbmc_marginal_cov(
    sys: &PosteriorSystem,
    mean: &[f64],
    opts: &PosteriorOptions,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    let (n, k) = (sys.n(), sys.k());
    check_len("posterior mean", mean.len(), n * k)?;
    let pre = preconditioner(sys, opts.preconditioning)?;
    let binv = block_inverses(sys)?;
    let mut acc = vec![DMatrix::<f64>::zeros(k, k); n];
    let mut start = 0;
    while start < opts.n_rbmc {
        let len = CHUNK.min(opts.n_rbmc - start);
        let cms = par::map_indexed(len, |i| {
            let w = posterior_draw(sys, mean, seed, (start + i) as u64, opts, &pre)?;
            Ok(conditional_means(sys, &binv, &w))
        })?;
        for cm in &cms {
            accumulate(&mut acc, cm, mean, n, k);
        }
        start += len;
    }
    Ok(finish(acc, binv, opts.n_rbmc))
}

/// Mean plus RBMC covariances.
pub fn summarize(sys: &PosteriorSystem, opts: &PosteriorOptions, seed: u64, warm: Option<&[f64]>) -> Result<PosteriorGmrf> {
    if opts.n_rbmc == 0 {
        return Err(Error::Config {
            key: "posterior.n_rbmc".into(),
            reason: "must be at least 1".into(),
        });
    }
    let mean = posterior_mean(sys, opts, warm)?;
    let cov = rbmc_marginal_cov(sys, &mean, opts, seed)?;
    Ok(PosteriorGmrf {
        n: sys.n(),
        k: sys.k(),
        mean,
        cov,
        n_rbmc: opts.n_rbmc,
    })
}

/// Per-voxel P(cᵀβ_n > γ | y, θ̂).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ppm {
    pub contrast: Vec<f64>,
    pub gamma: f64,
    pub display_threshold: f64,
    pub prob: Vec<f64>,
}

pub const DISPLAY_THRESHOLD: f64 = 0.9;

impl Ppm {
    /// Voxels at or above the display threshold.
    pub fn active(&self) -> Vec<bool> {
        self.prob.iter().map(|&p| p >= self.display_threshold).collect()
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `gamma` is on the scale of β; thresholds in percent of the global mean
/// are converted by the caller.
pub fn compute_ppm(post: &PosteriorGmrf, contrast: &[f64], gamma: f64) -> Result<Ppm> {
    check_len("contrast", contrast.len(), post.k)?;
    let c = nalgebra::DVector::from_column_slice(contrast);
    let prob = (0..post.n)
        .map(|v| {
            let m: f64 = (0..post.k).map(|a| contrast[a] * post.mean[a * post.n + v]).sum();
            let var = c.dot(&(&post.cov[v] * &c));
            if !(var > 0.0) {
                return Err(Error::Numerical(format!("contrast variance {var:e} at voxel {}", v + 1)));
            }
            Ok(normal_cdf((m - gamma) / var.sqrt()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Ppm {
        contrast: contrast.to_vec(),
        gamma,
        display_threshold: DISPLAY_THRESHOLD,
        prob,
    })
}

//! The conditional posterior β | y, θ ~ N(Q̃⁻¹b, Q̃⁻¹).
//!
//! Q̃ = P(⊕_n λ_n Q̃_n)Pᵀ + ⊕_k Q_k, with P the permutation from voxel-major
//! to regressor-major order. Neither part is materialized.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::ChaCha8Rng;

use super::{LaggedStats, NoiseState};
use crate::error::{check_len, Error, Result};
use crate::krylov::{LinearOperator, PerturbationSqrt, Preconditioner};
use crate::par;
use crate::prior::sample::normals;
use crate::prior::PrecisionOperator;

#[derive(Debug, Clone)]
pub struct PosteriorSystem {
    n: usize,
    k: usize,
    priors: Vec<PrecisionOperator>,
    /// N row-major K×K blocks λ_n Q̃_n.
    blocks: Vec<f64>,
    /// Square roots R_n with R_n R_nᵀ = λ_n Q̃_n.
    roots: Vec<f64>,
    /// Right-hand side, regressor-major.
    b: Vec<f64>,
    excluded: Vec<bool>,
}

/// Builds Q̃ and b from the lag statistics, the noise state and one prior per
/// regressor. Voxels flagged in `excluded` contribute no likelihood.
pub fn assemble_conditional_posterior(
    stats: &LaggedStats,
    noise: &NoiseState,
    priors: Vec<PrecisionOperator>,
    excluded: Option<&[bool]>,
) -> Result<PosteriorSystem> {
    PosteriorSystem::assemble(stats, noise, priors, excluded)
}

impl PosteriorSystem {
    pub fn assemble(
        stats: &LaggedStats,
        noise: &NoiseState,
        priors: Vec<PrecisionOperator>,
        excluded: Option<&[bool]>,
    ) -> Result<Self> {
        let (n, k) = (stats.n, stats.k);
        check_len("priors", priors.len(), k)?;
        check_len("noise precisions", noise.lambda.len(), n)?;
        if noise.order() != stats.p || noise.a.ncols() != n {
            return Err(Error::Dimension(format!(
                "AR matrix is {}×{}, expected {}×{n}",
                noise.order(),
                noise.a.ncols(),
                stats.p
            )));
        }
        for (i, p) in priors.iter().enumerate() {
            if p.n() != n {
                return Err(Error::Dimension(format!("prior {i} is on {} voxels, data has {n}", p.n())));
            }
        }
        let excluded = match excluded {
            Some(e) => {
                check_len("excluded voxels", e.len(), n)?;
                e.to_vec()
            }
            None => vec![false; n],
        };
        let shared = (stats.p == 0).then(|| stats.qt(&[]));
        let per_voxel = par::map_indexed(n, |v| {
            let kk = k * k;
            if excluded[v] {
                return Ok((vec![0.0; kk], vec![0.0; kk], vec![0.0; k]));
            }
            let a = noise.a_col(v);
            let lam = noise.lambda[v];
            let q = match &shared {
                Some(q) => q * lam,
                None => stats.qt(&a) * lam,
            };
            let rhs = stats.qv(v, &a) * lam;
            let root = block_sqrt(&q)?;
            Ok((row_major(&q), row_major(&root), rhs.as_slice().to_vec()))
        })?;
        let mut blocks = Vec::with_capacity(n * k * k);
        let mut roots = Vec::with_capacity(n * k * k);
        let mut b = vec![0.0; n * k];
        for (v, (q, r, rhs)) in per_voxel.into_iter().enumerate() {
            blocks.extend(q);
            roots.extend(r);
            for c in 0..k {
                b[c * n + v] = rhs[c];
            }
        }
        Ok(PosteriorSystem {
            n,
            k,
            priors,
            blocks,
            roots,
            b,
            excluded,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn priors(&self) -> &[PrecisionOperator] {
        &self.priors
    }

    pub fn excluded(&self) -> &[bool] {
        &self.excluded
    }

    /// λ_n Q̃_n.
    pub fn likelihood_block(&self, v: usize) -> DMatrix<f64> {
        let kk = self.k * self.k;
        DMatrix::from_row_slice(self.k, self.k, &self.blocks[v * kk..(v + 1) * kk])
    }

    /// All diagonal blocks, voxel-major, row-major within a block.
    pub fn diagonal_blocks(&self) -> Vec<f64> {
        let (n, k) = (self.n, self.k);
        let mut out = self.blocks.clone();
        for (c, p) in self.priors.iter().enumerate() {
            for (v, d) in p.diagonal().into_iter().enumerate() {
                out[v * k * k + c * k + c] += d;
            }
        }
        debug_assert_eq!(out.len(), n * k * k);
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let (n, k) = (self.n, self.k);
        let mut d = vec![0.0; n * k];
        for (c, p) in self.priors.iter().enumerate() {
            let pd = p.diagonal();
            for v in 0..n {
                d[c * n + v] = pd[v] + self.blocks[v * k * k + c * k + c];
            }
        }
        d
    }

    pub fn jacobi(&self) -> Result<Preconditioner> {
        Preconditioner::jacobi(&self.diagonal())
    }

    pub fn block_jacobi(&self) -> Result<Preconditioner> {
        let (n, k) = (self.n, self.k);
        let diag = self.diagonal_blocks();
        let mut inv = Vec::with_capacity(n * k * k);
        for v in 0..n {
            let m = DMatrix::from_row_slice(k, k, &diag[v * k * k..(v + 1) * k * k]);
            let mi = m
                .cholesky()
                .ok_or_else(|| Error::Numerical(format!("diagonal block at voxel {v} is not positive definite")))?
                .inverse();
            inv.extend(row_major(&mi));
        }
        Ok(Preconditioner::BlockJacobi { n, k, inv })
    }

    /// Applies only the likelihood part.
    pub fn apply_likelihood(&self, x: &[f64], y: &mut [f64]) {
        let (n, k) = (self.n, self.k);
        for v in 0..n {
            let blk = &self.blocks[v * k * k..(v + 1) * k * k];
            for a in 0..k {
                let mut acc = 0.0;
                for c in 0..k {
                    acc += blk[a * k + c] * x[c * n + v];
                }
                y[a * n + v] = acc;
            }
        }
    }

    /// Dense Q̃, for validation.
    pub fn dense(&self) -> Result<DMatrix<f64>> {
        crate::krylov::densify(self)
    }

    /// Reshapes a regressor-major vector into K×N.
    pub fn as_matrix(&self, beta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.n, |c, v| beta[c * self.n + v])
    }
}

impl LinearOperator for PosteriorSystem {
    fn dim(&self) -> usize {
        self.n * self.k
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n;
        self.apply_likelihood(x, y);
        let mut tmp = vec![0.0; n];
        for (c, p) in self.priors.iter().enumerate() {
            p.apply(&x[c * n..(c + 1) * n], &mut tmp);
            for (yi, ti) in y[c * n..(c + 1) * n].iter_mut().zip(&tmp) {
                *yi += ti;
            }
        }
    }
}

impl PerturbationSqrt for PosteriorSystem {
    fn perturbation(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let (n, k) = (self.n, self.k);
        let mut tmp = vec![0.0; n];
        for (c, p) in self.priors.iter().enumerate() {
            let z = normals(rng, p.sqrt_dim());
            p.apply_sqrt(&z, &mut tmp);
            out[c * n..(c + 1) * n].copy_from_slice(&tmp);
        }
        let z = normals(rng, n * k);
        for v in 0..n {
            let root = &self.roots[v * k * k..(v + 1) * k * k];
            for a in 0..k {
                let mut acc = 0.0;
                for c in 0..k {
                    acc += root[a * k + c] * z[v * k + c];
                }
                out[a * n + v] += acc;
            }
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// L with L Lᵀ = m. Falls back to V√Λ (eigenvalues clipped at 0) for
/// semidefinite blocks; the result is then full rather than lower triangular.
fn block_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.l());
    }
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&e| e < -1e-8 * scale) {
        return Err(Error::Numerical("likelihood block is indefinite".into()));
    }
    let s = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s))
}

//! Draws from the spatial priors.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{PrecisionOperator, PriorKind, SpatialPriorSpec};
use crate::error::Result;
use crate::krylov::{pcg_solve, FnOperator, PcgOptions, Preconditioner};
use crate::lattice::LatticeOperators;
use crate::rng;
use std::sync::Arc;

pub(crate) fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

const SAMPLE_OPTS: PcgOptions = PcgOptions {
    tol: 1e-10,
    max_iter: 20_000,
};

/// One draw with covariance Q⁻¹ (pseudo-inverse for intrinsic kinds, i.e. the
/// field conditioned to zero mean on every connected component).
pub fn sample_prior_with(op: &PrecisionOperator, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n = op.n();
    let tau = op.params().tau2.sqrt();
    match op.kind() {
        PriorKind::Gs => Ok(normals(rng, n).into_iter().map(|z| z / tau).collect()),
        PriorKind::M2 | PriorKind::Am2 => {
            // τ K u = z
            let k = op.k_matrix().unwrap();
            let z: Vec<f64> = normals(rng, n).into_iter().map(|z| z / tau).collect();
            let pre = Preconditioner::jacobi(&k.diagonal())?;
            Ok(pcg_solve(k, &z, None, &SAMPLE_OPTS, &pre)?.x)
        }
        PriorKind::M1 => {
            // Q u = L z with L Lᵀ = Q
            let z = normals(rng, op.sqrt_dim());
            let mut lz = vec![0.0; n];
            op.apply_sqrt(&z, &mut lz);
            let pre = Preconditioner::jacobi(&op.diagonal())?;
            Ok(pcg_solve(op, &lz, None, &SAMPLE_OPTS, &pre)?.x)
        }
        PriorKind::Icar1 | PriorKind::Icar2 => {
            let ops = op.lattice_ops();
            // ICAR1: G u = Dᵀz / τ gives u = G⁺Dᵀz/τ, covariance G⁺/τ².
            // ICAR2: G u = P z / τ (P projects out the nullspace) gives
            // covariance (G⁺)²/τ² = (GG)⁺/τ².
            let mut rhs = vec![0.0; n];
            if op.kind() == PriorKind::Icar1 {
                let z = normals(rng, ops.edges.len());
                ops.incidence_t(&z, &mut rhs);
            } else {
                rhs = normals(rng, n);
                ops.project_out_nullspace(&mut rhs);
            }
            rhs.iter_mut().for_each(|v| *v /= tau);
            let mut u = singular_solve(ops, &rhs)?;
            ops.project_out_nullspace(&mut u);
            Ok(u)
        }
    }
}

// CG on the consistent singular system G u = r (r ⟂ nullspace). A tiny
// diagonal shift restricted to the nullspace keeps the operator definite
// without changing the range solution.
fn singular_solve(ops: &Arc<LatticeOperators>, r: &[f64]) -> Result<Vec<f64>> {
    let n = ops.n();
    let counts = {
        let mut c = vec![0usize; ops.n_components];
        for &l in &ops.components {
            c[l] += 1;
        }
        c
    };
    let op = FnOperator {
        dim: n,
        f: |x: &[f64], y: &mut [f64]| {
            ops.g.mul_vec(x, y);
            // + Σ_c 1_c 1_cᵀ x / |c|
            let mut sums = vec![0.0; ops.n_components];
            for (xi, &l) in x.iter().zip(&ops.components) {
                sums[l] += xi;
            }
            for (yi, &l) in y.iter_mut().zip(&ops.components) {
                *yi += sums[l] / counts[l] as f64;
            }
        },
    };
    let diag: Vec<f64> = ops
        .g
        .diagonal()
        .iter()
        .zip(&ops.components)
        .map(|(d, &l)| d + 1.0 / counts[l] as f64)
        .collect();
    Ok(pcg_solve(&op, r, None, &SAMPLE_OPTS, &Preconditioner::jacobi(&diag)?)?.x)
}

/// Draw from the prior of `spec`, reproducible from `seed`.
pub fn sample_prior(spec: &SpatialPriorSpec, ops: Arc<LatticeOperators>, seed: u64) -> Result<Vec<f64>> {
    let op = PrecisionOperator::new(spec, ops)?;
    let mut r = rng::stream(seed, rng::TAG_PRIOR, 0);
    sample_prior_with(&op, &mut r)
}

/// Monte Carlo estimate of c with mean voxel variance c/τ² for an intrinsic
/// prior conditioned on its nullspace.
pub fn icar_variance_constant(
    ops: Arc<LatticeOperators>,
    kind: PriorKind,
    n_sim: usize,
    seed: u64,
) -> Result<f64> {
    let spec = SpatialPriorSpec::new(kind, super::SpatialParams::new(1.0, 0.0), super::HyperPrior::Flat);
    let op = PrecisionOperator::new(&spec, ops)?;
    let n = op.n() as f64;
    let sums = crate::par::map_indexed(n_sim, |j| {
        let mut r = rng::stream(seed, rng::TAG_PRIOR, j as u64);
        let u = sample_prior_with(&op, &mut r)?;
        Ok(u.iter().map(|x| x * x).sum::<f64>() / n)
    })?;
    Ok(sums.iter().sum::<f64>() / n_sim as f64)
}

//! Gradient and approximate Hessian of log p(θ | y) in the log/logit
//! coordinates.
//!
//! For a spatial coordinate c of regressor k, with Q' = ∂Q_k/∂c:
//!
//!   G = ½ ∂log|Q_k| − ½ tr(Q̃⁻¹ (J_kk ⊗ Q')) − ½ M_kᵀ Q' M_k + prior'
//!   H = ½ ∂²log|Q_k| − ½ [tr(Q̃⁻¹ (J_kk ⊗ Q'')) + M_kᵀ Q'' M_k] + prior''
//!
//! where H is E[∂² log p(y, β | θ)] under β | y, θ. Every trace over Q̃⁻¹ uses
//! the same probes: one solve u = Q̃⁻¹v per probe serves all coordinates.

use super::{EbModel, HyperState, Layout, Slot};
use crate::error::{Error, Result};
use crate::glm::{ar_chain_factor, PosteriorSystem};
use crate::krylov::{dot, DenseOracle, PcgOptions, Preconditioner, ProbeSet, ProbeStream, Solver};
use crate::par;
use crate::prior::hyper::hyperprior_eval;
use crate::prior::{KTraces, PrecisionOperator};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceMode {
    /// Dense factorization and basis probes.
    Exact,
    /// Rademacher probes, fresh for every evaluation.
    Hutchinson { n_probes: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioning {
    #[default]
    Jacobi,
    BlockJacobi,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub traces: TraceMode,
    pub pcg: PcgOptions,
    pub preconditioning: Preconditioning,
}

impl EvalOptions {
    pub fn exact() -> Self {
        EvalOptions {
            traces: TraceMode::Exact,
            pcg: PcgOptions::default(),
            preconditioning: Preconditioning::Jacobi,
        }
    }

    pub fn hutchinson(n_probes: usize, seed: u64) -> Self {
        EvalOptions {
            traces: TraceMode::Hutchinson { n_probes, seed },
            pcg: PcgOptions::default(),
            preconditioning: Preconditioning::Jacobi,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Per slot of the layout.
    pub grad: Vec<f64>,
    /// Approximate Hessian for spatial slots; 0 for noise slots.
    pub hess: Vec<f64>,
    /// Posterior mean, regressor-major.
    pub mu: Vec<f64>,
}

pub(crate) fn preconditioner(sys: &PosteriorSystem, kind: Preconditioning) -> Result<Preconditioner> {
    match kind {
        Preconditioning::Jacobi => sys.jacobi(),
        Preconditioning::BlockJacobi => sys.block_jacobi(),
    }
}

/// Evaluates G and H̃ at `state`. `round` selects the probe batch so repeated
/// calls see independent probes; `warm` is an initial guess for μ̃.
pub fn evaluate(
    model: &EbModel,
    layout: &Layout,
    state: &HyperState,
    opts: &EvalOptions,
    round: u64,
    warm: Option<&[f64]>,
) -> Result<Evaluation> {
    let (n, k) = (model.n(), model.k());
    let priors = model.build_priors(&state.spatial)?;
    let sys = PosteriorSystem::assemble(&model.stats, &state.noise, priors, None)?;
    let exact = opts.traces == TraceMode::Exact;
    let oracle = if exact { Some(DenseOracle::from_operator(&sys)?) } else { None };
    let pre = preconditioner(&sys, opts.preconditioning)?;
    let solver = match &oracle {
        Some(o) => Solver::Dense(o),
        None => Solver::Pcg { opts: opts.pcg, pre: &pre },
    };
    let mu = solver.solve(&sys, sys.b(), warm)?;

    let probes = match opts.traces {
        TraceMode::Exact => ProbeSet::Basis,
        TraceMode::Hutchinson { n_probes, seed } => {
            ProbeSet::rademacher(ProbeStream::with_tag(rng::derive_seed(seed, round), rng::TAG_PROBE), n_probes)
        }
    };

    let spatial: Vec<(usize, usize)> = layout.slots[..layout.n_spatial]
        .iter()
        .enumerate()
        .map(|(i, s)| match *s {
            Slot::Spatial { k, .. } => (i, k),
            _ => unreachable!("spatial slots come first"),
        })
        .collect();
    let p = model.ar_order();
    let noise = &state.noise;
    let with_noise = model.optimize_noise;
    // ∂(λ_n Q̃_n)/∂a_p, row-major per voxel
    let dblocks: Vec<Vec<f64>> = if with_noise && p > 0 {
        (0..n)
            .map(|v| {
                let a = noise.a_col(v);
                (0..p)
                    .flat_map(|q| {
                        (model.stats.dqt(&a, q) * noise.lambda[v])
                            .transpose()
                            .as_slice()
                            .to_vec()
                    })
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };

    let dim = n * k;
    let n_spatial = layout.n_spatial;
    // per probe: [t1 per spatial slot | t2 per spatial slot | λ term per voxel | a term per (voxel, lag)]
    let width = 2 * n_spatial + if with_noise { n + n * p } else { 0 };
    let count = probes.count(dim);
    let rows = par::map_indexed(count, |j| {
        let v = probes.vector(j as u64, dim);
        let u = solver.solve(&sys, &v, None)?;
        let mut r = vec![0.0; width];
        for (s, &(slot, kk)) in spatial.iter().enumerate() {
            let Slot::Spatial { coord, .. } = layout.slots[slot] else { unreachable!() };
            let op = &sys.priors()[kk];
            let vk = &v[kk * n..(kk + 1) * n];
            let uk = &u[kk * n..(kk + 1) * n];
            r[s] = dot(uk, &op.apply_dq(coord, false, vk));
            r[n_spatial + s] = dot(uk, &op.apply_dq(coord, true, vk));
        }
        if with_noise {
            let base = 2 * n_spatial;
            let mut uv = vec![0.0; k];
            let mut vv = vec![0.0; k];
            for vox in 0..n {
                for c in 0..k {
                    uv[c] = u[c * n + vox];
                    vv[c] = v[c * n + vox];
                }
                if uv.iter().all(|&x| x == 0.0) || vv.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let blk = sys.likelihood_block(vox);
                r[base + vox] = quad(&uv, blk.as_slice(), &vv, k, false);
                if p > 0 {
                    for q in 0..p {
                        let d = &dblocks[vox][q * k * k..(q + 1) * k * k];
                        r[base + n + vox * p + q] = quad(&uv, d, &vv, k, true);
                    }
                }
            }
        }
        Ok(r)
    })?;
    let wgt = probes.weight();
    let mut tr = vec![0.0; width];
    for r in &rows {
        for (t, x) in tr.iter_mut().zip(r) {
            *t += x;
        }
    }
    tr.iter_mut().for_each(|t| *t *= wgt);

    // K traces, one set per regressor that has an optimized κ or h
    let mut ktr: Vec<Option<KTraces>> = vec![None; k];
    for &(slot, kk) in &spatial {
        let Slot::Spatial { coord, .. } = layout.slots[slot] else { unreachable!() };
        if coord == crate::prior::Coord::Tau || ktr[kk].is_some() {
            continue;
        }
        ktr[kk] = Some(k_traces_for(&sys.priors()[kk], opts, round, kk)?);
    }

    let mut grad = vec![0.0; layout.len()];
    let mut hess = vec![0.0; layout.len()];
    let mut hyper_cache: Vec<Option<crate::prior::hyper::HyperTerms>> = vec![None; k];
    for (s, &(slot, kk)) in spatial.iter().enumerate() {
        let Slot::Spatial { coord, pos, .. } = layout.slots[slot] else { unreachable!() };
        let op = &sys.priors()[kk];
        let spec = &model.specs[kk];
        if hyper_cache[kk].is_none() {
            hyper_cache[kk] = Some(hyperprior_eval(spec, &state.spatial[kk].to_coords(spec.kind))?);
        }
        let hp = hyper_cache[kk].as_ref().unwrap();
        let kt = ktr[kk].unwrap_or_default();
        let (d1, d2) = op.logdet_derivatives(coord, &kt);
        let mk = &mu[kk * n..(kk + 1) * n];
        let m1 = dot(mk, &op.apply_dq(coord, false, mk));
        let m2 = dot(mk, &op.apply_dq(coord, true, mk));
        grad[slot] = 0.5 * d1 - 0.5 * tr[s] - 0.5 * m1 + hp.grad[pos];
        hess[slot] = 0.5 * d2 - 0.5 * (tr[n_spatial + s] + m2) + hp.hess[pos];
    }

    if with_noise {
        let np = model.noise_prior;
        let t_eff = model.stats.t_eff as f64;
        let base = 2 * n_spatial;
        let mut wcol = vec![0.0; k];
        for (i, s) in layout.slots.iter().enumerate().skip(n_spatial) {
            match *s {
                Slot::Lambda(v) => {
                    for c in 0..k {
                        wcol[c] = mu[c * n + v];
                    }
                    let lam = noise.lambda[v];
                    let a = noise.a_col(v);
                    let l = model.stats.loglik_term(v, &wcol, &a);
                    grad[i] = 0.5 * t_eff - 0.5 * tr[base + v] - 0.5 * lam * l + (np.u2 - 1.0) - lam / np.u1;
                }
                Slot::Ar { p: q, n: v } => {
                    for c in 0..k {
                        wcol[c] = mu[c * n + v];
                    }
                    let lam = noise.lambda[v];
                    let a = noise.a_col(v);
                    let dl = model.stats.dloglik_da(v, &wcol, &a, q);
                    let g = -0.5 * lam * dl - 0.5 * tr[base + n + v * p + q] - np.tau_a2 * a[q];
                    grad[i] = g * ar_chain_factor(a[q]);
                }
                Slot::Spatial { .. } => unreachable!(),
            }
        }
    }
    if grad.iter().chain(&hess).any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite gradient or Hessian".into()));
    }
    Ok(Evaluation { grad, hess, mu })
}

fn k_traces_for(op: &PrecisionOperator, opts: &EvalOptions, round: u64, reg: usize) -> Result<KTraces> {
    let k = op.k_matrix().expect("κ and h coordinates need a K operator");
    match opts.traces {
        TraceMode::Exact => {
            let oracle = DenseOracle::from_matrix(k.to_dense())?;
            op.k_traces(&ProbeSet::Basis, &Solver::Dense(&oracle))
        }
        TraceMode::Hutchinson { n_probes, seed } => {
            let pre = Preconditioner::jacobi(&k.diagonal())?;
            let stream = ProbeStream::with_tag(
                rng::derive_seed(rng::derive_seed(seed, round), reg as u64),
                rng::TAG_KPROBE,
            );
            op.k_traces(
                &ProbeSet::rademacher(stream, n_probes),
                &Solver::Pcg { opts: opts.pcg, pre: &pre },
            )
        }
    }
}

/// uᵀ B v for a K×K block stored row-major (`row_major`) or column-major.
fn quad(u: &[f64], b: &[f64], v: &[f64], k: usize, row_major: bool) -> f64 {
    let mut acc = 0.0;
    for a in 0..k {
        for c in 0..k {
            let x = if row_major { b[a * k + c] } else { b[c * k + a] };
            acc += u[a] * x * v[c];
        }
    }
    acc
}

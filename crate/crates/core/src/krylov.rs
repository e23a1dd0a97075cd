//! Matrix-free solves, stochastic traces, perturbation sampling and the dense
//! oracle used to validate them.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::rng;
use crate::sparse::CsrMatrix;

/// Symmetric linear map.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);

    fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.apply(x, &mut y);
        y
    }
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        CsrMatrix::dim(self)
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.mul_vec(x, y)
    }
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let r = self * DVector::from_column_slice(x);
        y.copy_from_slice(r.as_slice());
    }
}

/// Wraps a closure as an operator.
pub struct FnOperator<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (self.f)(x, y)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone)]
pub enum Preconditioner {
    None,
    /// Inverse diagonal.
    Jacobi(Vec<f64>),
    /// Inverted K×K blocks over indices `{k*n + i}` for each `i < n`.
    BlockJacobi { n: usize, k: usize, inv: Vec<f64> },
}

impl Preconditioner {
    pub fn jacobi(diag: &[f64]) -> Result<Self> {
        if diag.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Numerical("non-positive diagonal in Jacobi preconditioner".into()));
        }
        Ok(Preconditioner::Jacobi(diag.iter().map(|d| 1.0 / d).collect()))
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self {
            Preconditioner::None => z.copy_from_slice(r),
            Preconditioner::Jacobi(inv) => {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(inv) {
                    *zi = ri * di;
                }
            }
            Preconditioner::BlockJacobi { n, k, inv } => {
                let (n, k) = (*n, *k);
                for i in 0..n {
                    let blk = &inv[i * k * k..(i + 1) * k * k];
                    for a in 0..k {
                        let mut acc = 0.0;
                        for b in 0..k {
                            acc += blk[a * k + b] * r[b * n + i];
                        }
                        z[a * n + i] = acc;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PcgOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PcgOptions {
    fn default() -> Self {
        PcgOptions {
            tol: 1e-8,
            max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PcgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Preconditioned conjugate gradients for an SPD operator.
///
/// Stops on the recursive residual, then confirms with the true residual and
/// continues from the current iterate if rounding drift left it above `tol`.
pub fn pcg_solve<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: &PcgOptions,
    pre: &Preconditioner,
) -> Result<PcgOutcome> {
    pcg_solve_monitored(op, b, x0, opts, pre, &mut |_| {})
}

/// As [`pcg_solve`], calling `monitor` with every iterate.
pub fn pcg_solve_monitored<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: &PcgOptions,
    pre: &Preconditioner,
    monitor: &mut dyn FnMut(&[f64]),
) -> Result<PcgOutcome> {
    let n = op.dim();
    check_len("pcg right-hand side", b.len(), n)?;
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(PcgOutcome {
            x: vec![0.0; n],
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let mut x = match x0 {
        Some(x0) => {
            check_len("pcg initial guess", x0.len(), n)?;
            x0.to_vec()
        }
        None => vec![0.0; n],
    };
    let mut q = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut iterations = 0;
    let mut rel = f64::INFINITY;
    for _restart in 0..3 {
        op.apply(&x, &mut q);
        let mut r: Vec<f64> = b.iter().zip(&q).map(|(bi, qi)| bi - qi).collect();
        rel = norm(&r) / bnorm;
        if rel <= opts.tol {
            return Ok(PcgOutcome {
                x,
                iterations,
                rel_residual: rel,
            });
        }
        pre.apply(&r, &mut z);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        while iterations < opts.max_iter {
            iterations += 1;
            op.apply(&p, &mut q);
            let pq = dot(&p, &q);
            if !(pq > 0.0) {
                return Err(Error::Numerical(format!(
                    "operator not positive definite in pcg (pᵀAp = {pq:e})"
                )));
            }
            let alpha = rz / pq;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            monitor(&x);
            rel = norm(&r) / bnorm;
            if rel <= opts.tol {
                break;
            }
            pre.apply(&r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        if rel > opts.tol {
            break;
        }
    }
    op.apply(&x, &mut q);
    let true_rel = norm(&b.iter().zip(&q).map(|(bi, qi)| bi - qi).collect::<Vec<_>>()) / bnorm;
    if true_rel <= opts.tol {
        return Ok(PcgOutcome {
            x,
            iterations,
            rel_residual: true_rel,
        });
    }
    Err(Error::NotConverged {
        iterations,
        residual: true_rel.max(rel),
    })
}

/// Rademacher probe vectors, reproducible per (seed, index).
#[derive(Debug, Clone, Copy)]
pub struct ProbeStream {
    seed: u64,
    tag: u64,
}

impl ProbeStream {
    pub fn new(seed: u64) -> Self {
        ProbeStream {
            seed,
            tag: rng::TAG_PROBE,
        }
    }

    pub fn with_tag(seed: u64, tag: u64) -> Self {
        ProbeStream { seed, tag }
    }

    pub fn probe(&self, index: u64, dim: usize) -> Vec<f64> {
        let mut r: ChaCha8Rng = rng::stream(self.seed, self.tag, index);
        let mut out = Vec::with_capacity(dim);
        while out.len() < dim {
            let bits = r.next_u64();
            for b in 0..64.min(dim - out.len()) {
                out.push(if (bits >> b) & 1 == 1 { 1.0 } else { -1.0 });
            }
        }
        out
    }
}

/// Probe vectors for trace estimation: Rademacher, or the canonical basis for
/// exact traces through the same code path.
#[derive(Debug, Clone, Copy)]
pub enum ProbeSet {
    Rademacher { stream: ProbeStream, count: usize },
    Basis,
}

impl ProbeSet {
    pub fn rademacher(stream: ProbeStream, count: usize) -> Self {
        ProbeSet::Rademacher { stream, count }
    }

    pub fn count(&self, dim: usize) -> usize {
        match self {
            ProbeSet::Rademacher { count, .. } => *count,
            ProbeSet::Basis => dim,
        }
    }

    pub fn vector(&self, j: u64, dim: usize) -> Vec<f64> {
        match self {
            ProbeSet::Rademacher { stream, .. } => stream.probe(j, dim),
            ProbeSet::Basis => {
                let mut e = vec![0.0; dim];
                e[j as usize] = 1.0;
                e
            }
        }
    }

    /// Factor turning the probe sum into the trace estimate.
    pub fn weight(&self) -> f64 {
        match self {
            ProbeSet::Rademacher { count, .. } => 1.0 / *count as f64,
            ProbeSet::Basis => 1.0,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, ProbeSet::Basis)
    }
}

/// Iterative or dense solves against one operator.
#[derive(Clone, Copy)]
pub enum Solver<'a> {
    Pcg {
        opts: PcgOptions,
        pre: &'a Preconditioner,
    },
    Dense(&'a DenseOracle),
}

impl Solver<'_> {
    pub fn solve<A: LinearOperator + ?Sized>(&self, op: &A, b: &[f64], x0: Option<&[f64]>) -> Result<Vec<f64>> {
        match self {
            Solver::Pcg { opts, pre } => Ok(pcg_solve(op, b, x0, opts, pre)?.x),
            Solver::Dense(d) => Ok(d.solve(b)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TraceEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl TraceEstimate {
    pub fn from_samples(s: &[f64]) -> Self {
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = if s.len() > 1 {
            s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        TraceEstimate {
            mean,
            std_err: (var / n).sqrt(),
        }
    }
}

/// Hutchinson estimate of tr(A⁻¹T) with Rademacher probes `0..n_probes`.
pub fn hutchinson_trace<A: LinearOperator, T: LinearOperator>(
    solve_with: &A,
    t_apply: &T,
    probes: &ProbeStream,
    n_probes: usize,
    opts: &PcgOptions,
    pre: &Preconditioner,
) -> Result<TraceEstimate> {
    if solve_with.dim() != t_apply.dim() {
        return Err(Error::Dimension("hutchinson operators differ in dimension".into()));
    }
    let dim = solve_with.dim();
    let samples = (0..n_probes as u64)
        .into_par_iter()
        .map(|j| {
            let v = probes.probe(j, dim);
            let tv = t_apply.apply_vec(&v);
            let u = pcg_solve(solve_with, &v, None, opts, pre)?.x;
            Ok(dot(&u, &tv))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(TraceEstimate::from_samples(&samples))
}

/// Additive square-root structure for perturbation sampling.
pub trait PerturbationSqrt: LinearOperator {
    /// Writes Σ_parts L_part z_part for fresh standard normal z into `out`.
    fn perturbation(&self, rng: &mut ChaCha8Rng, out: &mut [f64]);
}

/// One draw from N(A⁻¹b, A⁻¹): solve A x = b + Σ L z.
pub fn sample_posterior<S: PerturbationSqrt>(
    system: &S,
    b: &[f64],
    rng: &mut ChaCha8Rng,
    opts: &PcgOptions,
    pre: &Preconditioner,
    x0: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let mut bs = vec![0.0; system.dim()];
    system.perturbation(rng, &mut bs);
    for (x, bi) in bs.iter_mut().zip(b) {
        *x += bi;
    }
    Ok(pcg_solve(system, &bs, x0, opts, pre)?.x)
}

pub const DENSE_LIMIT: usize = 6000;

/// Dense factorization of a small operator, for validation.
pub struct DenseOracle {
    pub matrix: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl DenseOracle {
    pub fn from_operator<A: LinearOperator + ?Sized>(op: &A) -> Result<Self> {
        Self::from_matrix(densify(op)?)
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() > DENSE_LIMIT {
            return Err(Error::TooLarge(format!("dimension {} > {DENSE_LIMIT}", matrix.nrows())));
        }
        let chol = nalgebra::Cholesky::new(matrix.clone())
            .ok_or_else(|| Error::Numerical("dense matrix is not positive definite".into()))?;
        Ok(DenseOracle { matrix, chol })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.chol.solve(&DVector::from_column_slice(b)).as_slice().to_vec()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Lower Cholesky factor.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Exact tr(A⁻¹T).
    pub fn trace_of<T: LinearOperator + ?Sized>(&self, t: &T) -> Result<f64> {
        let tm = densify(t)?;
        let x = self.chol.solve(&tm);
        Ok(x.trace())
    }
}

/// Materializes an operator column by column.
pub fn densify<A: LinearOperator + ?Sized>(op: &A) -> Result<DMatrix<f64>> {
    let n = op.dim();
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge(format!("dimension {n} > {DENSE_LIMIT}")));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        op.apply(&e, &mut col);
        m.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    Ok(m)
}

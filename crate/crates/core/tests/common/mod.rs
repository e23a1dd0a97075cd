#![allow(dead_code)]

use std::sync::Arc;

use matern_eb::eb::{evaluate, log_posterior_dense, EbModel, EvalOptions, HyperState, Layout, NoisePrior, Slot};
use matern_eb::glm::{precompute_lagged, Dataset, NoiseState, PosteriorSystem};
use matern_eb::lattice::{LatticeOperators, MaskedLattice};
use matern_eb::prior::hyper::{hyperprior_eval, HyperPrior};
use matern_eb::prior::{PrecisionOperator, PriorKind, SpatialParams, SpatialPriorSpec};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn ops(side: usize) -> Arc<LatticeOperators> {
    Arc::new(LatticeOperators::new(&MaskedLattice::full([side; 3], [1.0; 3]).unwrap()))
}

/// Block design plus intercept, AR(1) noise around a voxel-dependent effect.
pub fn dataset(side: usize, t: usize, seed: u64) -> Dataset {
    let n = side * side * side;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(t, 2, |i, c| if c == 0 { ((i / 5) % 2) as f64 } else { 1.0 });
    let mut y = DMatrix::zeros(t, n);
    for v in 0..n {
        let mut prev = 0.0;
        for i in 0..t {
            let e: f64 = StandardNormal.sample(&mut r);
            prev = 0.4 * prev + e;
            y[(i, v)] = 100.0 + 0.5 * x[(i, 0)] * (v % 3) as f64 + prev;
        }
    }
    Dataset::new(y, x, vec![0]).unwrap()
}

/// M2 activity prior and a flat intercept on a side³ lattice with AR(1) noise.
pub fn system(side: usize, t: usize, seed: u64) -> PosteriorSystem {
    let d = dataset(side, t, seed);
    let n = d.n();
    let ops = ops(side);
    let stats = precompute_lagged(&d, 1).unwrap();
    let act = SpatialPriorSpec::new(PriorKind::M2, SpatialParams::new(2.0, 0.5), HyperPrior::Flat);
    let nuis = SpatialPriorSpec::new(PriorKind::Gs, SpatialParams::new(1e-2, 0.0), HyperPrior::Flat);
    let priors = vec![
        PrecisionOperator::new(&act, ops.clone()).unwrap(),
        PrecisionOperator::new(&nuis, ops).unwrap(),
    ];
    let noise = NoiseState {
        lambda: (0..n).map(|v| 0.8 + 0.01 * (v % 7) as f64).collect(),
        a: DMatrix::from_fn(1, n, |_, v| 0.3 + 0.02 * (v % 5) as f64),
    };
    PosteriorSystem::assemble(&stats, &noise, priors, None).unwrap()
}

/// 5³, T = 30, AR(1): the regressor of interest under `kind` plus the intercept.
pub fn eb_model(kind: PriorKind, hyper: HyperPrior) -> (EbModel, HyperState) {
    let (d, ops) = (dataset(5, 30, 11), ops(5));
    let mut params = SpatialParams::new(0.5, if kind.has_kappa() { 0.3 } else { 0.0 });
    if kind == PriorKind::Am2 {
        params.hx = 1.2;
        params.hy = 0.9;
    }
    let specs = vec![SpatialPriorSpec::new(kind, params, hyper), SpatialPriorSpec::nuisance()];
    let m = EbModel::new(&d, ops, specs, 1, NoisePrior::default()).unwrap();
    let mut state = m.initial_state(&d).unwrap();
    state.spatial[0] = params;
    (m, state)
}

/// Moves the noise away from its least-squares values so that the noise
/// gradients are not close to zero.
pub fn off_mode(state: &mut HyperState) {
    for l in state.noise.lambda.iter_mut() {
        *l *= 1.3;
    }
    for a in state.noise.a.iter_mut() {
        *a = 0.7 * *a + 0.1;
    }
}

/// Central differences with one Richardson step.
pub fn fd_gradient(m: &EbModel, lay: &Layout, state: &HyperState) -> Vec<f64> {
    let th = lay.to_theta(state, &m.specs);
    let f = |i: usize, d: f64| {
        let mut p = th.clone();
        p[i] += d;
        log_posterior_dense(m, &lay.apply_theta(&p, state, &m.specs)).unwrap()
    };
    let h = 2e-3;
    (0..lay.len())
        .map(|i| {
            let d1 = (f(i, h) - f(i, -h)) / (2.0 * h);
            let d2 = (f(i, h / 2.0) - f(i, -h / 2.0)) / h;
            (4.0 * d2 - d1) / 3.0
        })
        .collect()
}

pub fn class(lay: &Layout, i: usize) -> String {
    let name = lay.name(i);
    name[..name.find('[').unwrap()].to_string()
}

/// Relative gradient error per coordinate class against finite differences.
pub fn fd_class_errors(kind: PriorKind, hyper: HyperPrior) -> Vec<(String, f64)> {
    let (m, mut state) = eb_model(kind, hyper);
    off_mode(&mut state);
    let lay = m.layout();
    let ev = evaluate(&m, &lay, &state, &EvalOptions::exact(), 0, None).unwrap();
    let fd = fd_gradient(&m, &lay, &state);
    let mut classes: Vec<String> = (0..lay.len()).map(|i| class(&lay, i)).collect();
    classes.dedup();
    let mut out = Vec::new();
    for c in classes {
        let (mut num, mut den) = (0.0, 0.0);
        for i in (0..lay.len()).filter(|&i| class(&lay, i) == c) {
            num += (ev.grad[i] - fd[i]).powi(2);
            den += fd[i].powi(2);
        }
        out.push((c, (num / den).sqrt()));
    }
    out
}


fn dense_of(n: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        out.set_column(c, &nalgebra::DVector::from_vec(f(&e)));
    }
    out
}

/// ½ ∂²log|Q| + hyperprior'' − ½ E[βᵀQ''β], with ∂²log|Q| = tr(Q⁻¹Q'') −
/// tr(Q⁻¹Q'Q⁻¹Q') and E[βᵀQ''β] = tr(Σ_kk Q'') + μᵀQ''μ, all dense.
pub fn hessian_rel_error(kind: PriorKind) -> f64 {
    let mut worst: f64 = 0.0;
    let hyper = if kind.alpha() == 2 && kind.has_kappa() {
        HyperPrior::pc_matern(2.0)
    } else {
        HyperPrior::Flat
    };
    let (m, state) = eb_model(kind, hyper);
    let lay = m.layout();
    let ev = evaluate(&m, &lay, &state, &EvalOptions::exact(), 0, None).unwrap();
    let priors = m.build_priors(&state.spatial).unwrap();
    let sys = PosteriorSystem::assemble(&m.stats, &state.noise, priors, None).unwrap();
    let sigma = sys.dense().unwrap().try_inverse().unwrap();
    let n = m.n();
    let sig00 = sigma.view((0, 0), (n, n)).into_owned();
    let mv = nalgebra::DVector::from_column_slice(&ev.mu[..n]);
    let op = &sys.priors()[0];
    let q = op.dense();
    let hp = hyperprior_eval(&m.specs[0], &state.spatial[0].to_coords(kind)).unwrap();
    for (i, s) in lay.slots.iter().enumerate().take(lay.n_spatial) {
        let Slot::Spatial { coord, pos, .. } = *s else { unreachable!() };
        let q1 = dense_of(n, |e| op.apply_dq(coord, false, e));
        let q2 = dense_of(n, |e| op.apply_dq(coord, true, e));
        let d2 = if kind.is_intrinsic() {
            0.0
        } else {
            let qi = q.clone().try_inverse().unwrap();
            (&qi * &q2).trace() - (&qi * &q1 * &qi * &q1).trace()
        };
        let expect =
            0.5 * d2 - 0.5 * ((&sig00 * &q2).trace() + mv.dot(&(&q2 * &mv))) + hp.hess[pos];
        let e = (ev.hess[i] - expect).abs() / expect.abs();
        worst = worst.max(e);
    }
    worst
}


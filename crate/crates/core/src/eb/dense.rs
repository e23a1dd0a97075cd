//! log p(θ | y) up to a constant, by dense factorization. Only for small
//! problems; it is the reference the gradient is checked against.

use nalgebra::DVector;

use super::{EbModel, HyperState};
use crate::error::Result;
use crate::glm::PosteriorSystem;
use crate::krylov::DenseOracle;
use crate::prior::hyper::hyperprior_eval;

/// (T−P)/2 Σ log λ − ½ Σ λ_n c_n + ½ Σ_k log|Q_k| − ½ log|Q̃| + ½ bᵀμ̃
/// plus the hyperpriors and noise priors, in the same no-Jacobian convention
/// as the gradient.
pub fn log_posterior_dense(model: &EbModel, state: &HyperState) -> Result<f64> {
    let n = model.n();
    let priors = model.build_priors(&state.spatial)?;
    let mut value = 0.0;
    for p in &priors {
        value += 0.5 * p.dense_logdet()?;
    }
    let sys = PosteriorSystem::assemble(&model.stats, &state.noise, priors, None)?;
    let oracle = DenseOracle::from_operator(&sys)?;
    let mu = oracle.solve(sys.b());
    value += -0.5 * oracle.logdet() + 0.5 * DVector::from_column_slice(sys.b()).dot(&DVector::from_vec(mu));

    let t_eff = model.stats.t_eff as f64;
    let np = model.noise_prior;
    for v in 0..n {
        let lam = state.noise.lambda[v];
        let a = state.noise.a_col(v);
        value += 0.5 * t_eff * lam.ln() - 0.5 * lam * model.stats.c0(v, &a);
        if model.optimize_noise {
            value += (np.u2 - 1.0) * lam.ln() - lam / np.u1;
            value -= 0.5 * np.tau_a2 * a.iter().map(|x| x * x).sum::<f64>();
        }
    }
    for (spec, params) in model.specs.iter().zip(&state.spatial) {
        if spec.is_optimized() {
            value += hyperprior_eval(spec, &params.to_coords(spec.kind))?.value;
        }
    }
    Ok(value)
}

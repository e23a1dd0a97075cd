//! Averaged stochastic Newton steps with momentum and Polyak averaging.

use serde::{Deserialize, Serialize};

use super::{evaluate, EbModel, EvalOptions, HyperState, Layout, Preconditioning, TraceMode};
use crate::error::{Error, Result};
use crate::krylov::PcgOptions;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub n_iter: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub eta_mom: f64,
    pub eta_n: f64,
    pub n_polyak: usize,
    pub n_probes: usize,
    pub warmup: usize,
    /// Newton fraction used for spatial coordinates during warm-up.
    pub warmup_rate: f64,
    pub lr_base: f64,
    pub lr_decay: f64,
    pub lr_decay_start: usize,
    pub exact_traces: bool,
    pub pcg_tol: f64,
    pub pcg_max_iter: usize,
    pub preconditioning: Preconditioning,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            n_iter: 200,
            gamma1: 0.2,
            gamma2: 0.9,
            eta_mom: 0.5,
            eta_n: 0.001,
            n_polyak: 10,
            n_probes: 50,
            warmup: 5,
            warmup_rate: 0.1,
            lr_base: 0.9,
            lr_decay: 0.1,
            lr_decay_start: 100,
            exact_traces: false,
            pcg_tol: 1e-8,
            pcg_max_iter: 2000,
            preconditioning: Preconditioning::Jacobi,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("optimizer.{key}"),
                reason: reason.into(),
            })
        };
        if self.n_iter == 0 {
            return bad("n_iter", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.gamma1) {
            return bad("gamma1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.gamma2) {
            return bad("gamma2", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.eta_mom) {
            return bad("eta_mom", "must lie in [0, 1)");
        }
        if !(self.eta_n >= 0.0 && self.lr_base > 0.0 && self.lr_decay >= 0.0 && self.warmup_rate >= 0.0) {
            return bad("eta_n", "learning rates must be non-negative");
        }
        if self.n_polyak == 0 || self.n_polyak > self.n_iter {
            return bad("n_polyak", "must lie in 1..=n_iter");
        }
        if self.n_probes == 0 {
            return bad("n_probes", "must be at least 1");
        }
        if !(self.pcg_tol > 0.0) || self.pcg_max_iter == 0 {
            return bad("pcg_tol", "tolerance and iteration limit must be positive");
        }
        Ok(())
    }

    pub fn eval_options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            traces: if self.exact_traces {
                TraceMode::Exact
            } else {
                TraceMode::Hutchinson {
                    n_probes: self.n_probes,
                    seed,
                }
            },
            pcg: PcgOptions {
                tol: self.pcg_tol,
                max_iter: self.pcg_max_iter,
            },
            preconditioning: self.preconditioning,
        }
    }
}

/// η at iteration j (1-based).
pub fn learning_rate(cfg: &OptimizerConfig, j: usize) -> f64 {
    cfg.lr_base / (cfg.lr_decay * j.saturating_sub(cfg.lr_decay_start) as f64 + 1.0)
}

/// A function to maximize, seen through per-coordinate gradients and
/// curvatures.
pub trait Objective {
    fn dim(&self) -> usize;
    /// Spatial coordinates take Newton steps, the others plain gradient steps.
    fn is_spatial(&self, i: usize) -> bool;
    /// (gradient, approximate Hessian diagonal) at θ. `round` distinguishes
    /// calls so stochastic objectives draw fresh randomness.
    fn evaluate(&mut self, theta: &[f64], round: u64) -> Result<(Vec<f64>, Vec<f64>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Negative during warm-up.
    pub iteration: i64,
    pub theta: Vec<f64>,
    pub grad: Vec<f64>,
    pub step: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimizerOutcome {
    pub theta: Vec<f64>,
    pub trace: Vec<IterationRecord>,
}

fn negative_curvature(h: f64) -> f64 {
    let m = h.abs().max(1e-12);
    -m
}

pub fn run_optimizer(obj: &mut dyn Objective, theta0: Vec<f64>, cfg: &OptimizerConfig) -> Result<OptimizerOutcome> {
    cfg.validate()?;
    let d = obj.dim();
    if theta0.len() != d {
        return Err(Error::Dimension(format!("initial θ has {} entries, objective {d}", theta0.len())));
    }
    let spatial: Vec<bool> = (0..d).map(|i| obj.is_spatial(i)).collect();
    let mut theta = theta0;
    let mut gbar: Option<Vec<f64>> = None;
    let mut hbar: Vec<f64> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.warmup + cfg.n_iter);
    let mut round = 0u64;

    let averaged = |g: Vec<f64>, h: Vec<f64>, gbar: &mut Option<Vec<f64>>, hbar: &mut Vec<f64>| match gbar {
        None => {
            *gbar = Some(g);
            *hbar = h;
        }
        Some(gb) => {
            for i in 0..d {
                gb[i] = cfg.gamma1 * gb[i] + (1.0 - cfg.gamma1) * g[i];
                hbar[i] = cfg.gamma2 * hbar[i] + (1.0 - cfg.gamma2) * h[i];
            }
        }
    };

    let eta1 = learning_rate(cfg, 1);
    for w in 0..cfg.warmup {
        let (g, h) = obj.evaluate(&theta, round)?;
        round += 1;
        averaged(g.clone(), h, &mut gbar, &mut hbar);
        let gb = gbar.as_ref().unwrap();
        let step: Vec<f64> = (0..d)
            .map(|i| {
                if spatial[i] {
                    -cfg.warmup_rate * eta1 * gb[i] / negative_curvature(hbar[i])
                } else {
                    cfg.eta_n * eta1 * gb[i]
                }
            })
            .collect();
        apply_step(&mut theta, &step, -(cfg.warmup as i64) + w as i64)?;
        trace.push(IterationRecord {
            iteration: -(cfg.warmup as i64) + w as i64,
            theta: theta.clone(),
            grad: g,
            step,
        });
    }

    let mut delta = vec![0.0; d];
    let mut window: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_polyak);
    for j in 1..=cfg.n_iter {
        let (g, h) = obj.evaluate(&theta, round)?;
        round += 1;
        averaged(g.clone(), h, &mut gbar, &mut hbar);
        let gb = gbar.as_ref().unwrap();
        let eta = learning_rate(cfg, j);
        for i in 0..d {
            delta[i] = if spatial[i] {
                cfg.eta_mom * delta[i] - eta * gb[i] / negative_curvature(hbar[i])
            } else {
                cfg.eta_n * eta * gb[i]
            };
        }
        apply_step(&mut theta, &delta, j as i64)?;
        trace.push(IterationRecord {
            iteration: j as i64,
            theta: theta.clone(),
            grad: g,
            step: delta.clone(),
        });
        if j + cfg.n_polyak > cfg.n_iter {
            window.push(theta.clone());
        }
    }
    let mut avg = vec![0.0; d];
    for th in &window {
        for (a, x) in avg.iter_mut().zip(th) {
            *a += x;
        }
    }
    let m = window.len() as f64;
    avg.iter_mut().for_each(|a| *a /= m);
    Ok(OptimizerOutcome { theta: avg, trace })
}

fn apply_step(theta: &mut [f64], step: &[f64], iteration: i64) -> Result<()> {
    for (t, s) in theta.iter_mut().zip(step) {
        *t += s;
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numerical(format!("optimizer state became non-finite at iteration {iteration}")));
    }
    Ok(())
}

/// The EB objective over the optimized coordinates of a model.
pub struct EbObjective<'a> {
    pub model: &'a EbModel,
    pub layout: Layout,
    pub base: HyperState,
    pub opts: EvalOptions,
    warm: Option<Vec<f64>>,
}

impl<'a> EbObjective<'a> {
    pub fn new(model: &'a EbModel, base: HyperState, opts: EvalOptions) -> Self {
        EbObjective {
            layout: model.layout(),
            model,
            base,
            opts,
            warm: None,
        }
    }

    pub fn state_at(&self, theta: &[f64]) -> HyperState {
        self.layout.apply_theta(theta, &self.base, &self.model.specs)
    }
}

impl Objective for EbObjective<'_> {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn is_spatial(&self, i: usize) -> bool {
        self.layout.is_spatial(i)
    }

    fn evaluate(&mut self, theta: &[f64], round: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let state = self.state_at(theta);
        let ev = evaluate(self.model, &self.layout, &state, &self.opts, round, self.warm.as_deref())?;
        self.warm = Some(ev.mu);
        Ok((ev.grad, ev.hess))
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: HyperState,
    pub trace: Vec<IterationRecord>,
    pub layout: Layout,
}

/// Runs the optimizer from `init` and returns the Polyak-averaged state.
pub fn fit_hyperparameters(
    model: &EbModel,
    init: HyperState,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<FitOutcome> {
    let mut obj = EbObjective::new(model, init, cfg.eval_options(seed));
    let theta0 = obj.layout.to_theta(&obj.base, &model.specs);
    let out = run_optimizer(&mut obj, theta0, cfg)?;
    Ok(FitOutcome {
        state: obj.state_at(&out.theta),
        trace: out.trace,
        layout: obj.layout,
    })
}

//! Run configuration: one TOML file determines a whole analysis.
//!
//! ```toml
//! seed = 1
//!
//! [paths]
//! data = "bold.nii"
//! mask = "mask.nii"
//! design = "design.csv"
//! output = "out"
//!
//! [model]
//! activity = [1]          # 1-based design columns
//! ar_order = 1
//!
//! [[model.priors]]        # one per activity column, same order
//! kind = "M2"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::eb::{prior_center, NoisePrior, OptimizerConfig};
use crate::error::{Error, Result};
use crate::evalsim::CvPlan;
use crate::posterior::PosteriorOptions;
use crate::prior::hyper::HyperPrior;
use crate::prior::{PriorKind, SpatialParams, SpatialPriorSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub posterior: PosteriorOptions,
    #[serde(default)]
    pub ppm: PpmConfig,
    #[serde(default)]
    pub cv: CvPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// 4D volume, T frames.
    pub data: PathBuf,
    pub mask: PathBuf,
    pub design: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub activity: Vec<usize>,
    /// Defaults to every column not listed in `activity`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nuisance: Option<Vec<usize>>,
    #[serde(default = "default_ar_order")]
    pub ar_order: usize,
    #[serde(default = "yes")]
    pub optimize_noise: bool,
    #[serde(default)]
    pub noise_prior: NoisePrior,
    pub priors: Vec<PriorConfig>,
}

fn default_ar_order() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// Missing values fall back to defaults that depend on the kind and, for
/// σ0, on the global mean of the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: PriorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<HyperPrior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimize: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aniso_sigma2: Option<f64>,
}

impl PriorConfig {
    pub fn of_kind(kind: PriorKind) -> Self {
        PriorConfig {
            kind,
            tau2: None,
            kappa2: None,
            hx: None,
            hy: None,
            hyper: None,
            optimize: None,
            aniso_sigma2: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpmConfig {
    /// Contrasts over the activity regressors; one unit contrast per
    /// regressor when empty.
    pub contrasts: Vec<Vec<f64>>,
    /// Threshold γ in percent of the global mean signal.
    pub gamma_pct: f64,
    pub display_threshold: f64,
}

impl Default for PpmConfig {
    fn default() -> Self {
        PpmConfig {
            contrasts: Vec::new(),
            gamma_pct: 0.2,
            display_threshold: 0.9,
        }
    }
}

fn cfg_err(key: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

/// `section.key` of the line holding byte `offset`.
fn key_at(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line_end = text[line_start..].find('\n').map_or(text.len(), |i| line_start + i);
    let line = text[line_start..line_end].trim();
    let key = line.split('=').next().unwrap_or("").trim();
    let section = before[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    let key = if key.starts_with('[') { "" } else { key };
    match (section, key) {
        (Some(s), "") => s,
        (Some(s), k) => format!("{s}.{k}"),
        (None, k) => k.to_string(),
    }
}

/// Deserializes TOML, reporting failures as config errors keyed by the
/// offending entry.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let key = e.span().map(|s| key_at(text, s.start)).unwrap_or_default();
        let key = if key.is_empty() { "<root>".to_string() } else { key };
        cfg_err(key, e.message().to_string())
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        parse_toml(text)
    }

    /// Parses and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.data,
            &mut cfg.paths.mask,
            &mut cfg.paths.design,
            &mut cfg.paths.output,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config serialization: {e}")))
    }

    /// Checks that does not need the data: option blocks and input paths.
    pub fn validate(&self) -> Result<()> {
        for (key, p) in [
            ("paths.data", &self.paths.data),
            ("paths.mask", &self.paths.mask),
            ("paths.design", &self.paths.design),
        ] {
            if !p.is_file() {
                return Err(cfg_err(key, format!("file not found: {}", p.display())));
            }
        }
        self.optimizer.validate()?;
        if self.posterior.n_rbmc == 0 {
            return Err(cfg_err("posterior.n_rbmc", "must be at least 1"));
        }
        if !(self.posterior.pcg_tol > 0.0) || self.posterior.pcg_max_iter == 0 {
            return Err(cfg_err("posterior.pcg_tol", "tolerance and iteration limit must be positive"));
        }
        let m = &self.model;
        if m.activity.is_empty() {
            return Err(cfg_err("model.activity", "at least one activity regressor is required"));
        }
        if m.priors.len() != m.activity.len() {
            return Err(cfg_err(
                "model.priors",
                format!("{} priors for {} activity regressors", m.priors.len(), m.activity.len()),
            ));
        }
        let t = self.ppm.display_threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(cfg_err("ppm.display_threshold", "must lie in [0, 1]"));
        }
        if !self.ppm.gamma_pct.is_finite() {
            return Err(cfg_err("ppm.gamma_pct", "must be finite"));
        }
        for (i, c) in self.ppm.contrasts.iter().enumerate() {
            if c.len() != m.activity.len() {
                return Err(cfg_err(
                    format!("ppm.contrasts[{i}]"),
                    format!("{} weights for {} activity regressors", c.len(), m.activity.len()),
                ));
            }
        }
        Ok(())
    }

    /// Zero-based (activity, nuisance) columns for a design with `k` columns.
    pub fn roles(&self, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let check = |key: &str, list: &[usize]| -> Result<Vec<usize>> {
            let mut seen = vec![false; k];
            list.iter()
                .map(|&c| {
                    if c == 0 || c > k {
                        return Err(cfg_err(key, format!("column {c} outside 1..{k}")));
                    }
                    if std::mem::replace(&mut seen[c - 1], true) {
                        return Err(cfg_err(key, format!("column {c} listed twice")));
                    }
                    Ok(c - 1)
                })
                .collect()
        };
        let act = check("model.activity", &self.model.activity)?;
        let nuis = match &self.model.nuisance {
            Some(n) => check("model.nuisance", n)?,
            None => (0..k).filter(|c| !act.contains(c)).collect(),
        };
        if let Some(c) = nuis.iter().find(|c| act.contains(c)) {
            return Err(cfg_err("model.nuisance", format!("column {} is also an activity column", c + 1)));
        }
        if act.len() + nuis.len() != k {
            return Err(cfg_err(
                "model.nuisance",
                format!("activity and nuisance lists cover {} of {k} columns", act.len() + nuis.len()),
            ));
        }
        Ok((act, nuis))
    }

    /// Prior spec per design column plus the starting hyperparameters.
    /// `global_mean` sets σ0 = 2% of it for the default hyperpriors.
    pub fn prior_specs(&self, k: usize, global_mean: f64) -> Result<(Vec<SpatialPriorSpec>, Vec<SpatialParams>)> {
        let (act, _) = self.roles(k)?;
        let sigma0 = 0.02 * global_mean.abs();
        if !(sigma0 > 0.0) {
            return Err(Error::Domain("global mean signal is zero; σ0 defaults are undefined".into()));
        }
        let mut specs = vec![SpatialPriorSpec::nuisance(); k];
        let mut init: Vec<SpatialParams> = specs.iter().map(|s| s.params).collect();
        for (i, (&col, pc)) in act.iter().zip(&self.model.priors).enumerate() {
            let key = format!("model.priors[{i}]");
            let (spec, start) = build_prior(pc, sigma0).map_err(|e| match e {
                Error::Parameter { name, reason } => cfg_err(format!("{key}.{name}"), reason),
                other => other,
            })?;
            specs[col] = spec;
            init[col] = start;
        }
        Ok((specs, init))
    }
}

fn build_prior(pc: &PriorConfig, sigma0: f64) -> Result<(SpatialPriorSpec, SpatialParams)> {
    let kind = pc.kind;
    let hyper = pc.hyper.clone().unwrap_or(match kind {
        PriorKind::Gs => HyperPrior::Flat,
        PriorKind::Icar1 | PriorKind::Icar2 => HyperPrior::pc_icar(kind, sigma0),
        PriorKind::M1 => HyperPrior::lognormal_m1_default(),
        PriorKind::M2 | PriorKind::Am2 => HyperPrior::pc_matern(sigma0),
    });
    // GS starts at a prior sd of σ0, the others at a placeholder that the
    // hyperprior centre replaces
    let tau2 = if kind == PriorKind::Gs { 1.0 / (sigma0 * sigma0) } else { 1.0 };
    let kappa2 = if kind.has_kappa() { 1.0 } else { 0.0 };
    let mut spec = SpatialPriorSpec::new(kind, SpatialParams::new(tau2, kappa2), hyper);
    if kind == PriorKind::Gs {
        spec.optimize = vec![true];
    }
    if let Some(o) = &pc.optimize {
        spec.optimize = o.clone();
    }
    if let Some(s) = pc.aniso_sigma2 {
        spec.aniso_sigma2 = s;
    }
    let mut start = if kind == PriorKind::Gs { spec.params } else { prior_center(&spec) };
    if let Some(t) = pc.tau2 {
        start.tau2 = t;
    }
    if let Some(k) = pc.kappa2 {
        start.kappa2 = k;
    }
    if let Some(h) = pc.hx {
        start.hx = h;
    }
    if let Some(h) = pc.hy {
        start.hy = h;
    }
    spec.params = start;
    spec.validate()?;
    Ok((spec, start))
}

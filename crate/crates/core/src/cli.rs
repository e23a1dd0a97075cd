//! Command-line front end. Every command is deterministic given `--seed`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::eb::{fit_hyperparameters, init_noise, EbModel, HyperState};
use crate::error::{Error, Result};
use crate::evalsim::{run_cv, simulate_dataset, SimulationSpec};
use crate::glm::{Dataset, PosteriorSystem};
use crate::io::config::{parse_toml, PriorConfig, RunConfig};
use crate::io::{read_design, read_volume, write_design, write_volume, Geometry, Volume};
use crate::lattice::{LatticeOperators, MaskedLattice};
use crate::posterior::{compute_ppm, summarize, PosteriorGmrf};
use crate::prior::matern::sigma_rho;
use crate::prior::{sample_prior, PriorKind, SpatialParams, SpatialPriorSpec};
use crate::rng::derive_seed;

#[derive(Parser, Debug)]
#[command(name = "matern-eb", version, about = "Empirical Bayes spatial priors for voxelwise regression")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset and its ground truth from a simulation spec.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Fit the hyperparameters and write posterior means and diagnostics.
    Fit(RunArgs),
    /// Posterior probability maps from a fitted state.
    Ppm(StateArgs),
    /// Draws from the spatial priors at the fitted (or initial) values.
    SamplePrior {
        #[command(flatten)]
        run: StateArgs,
        #[arg(long, default_value_t = 3)]
        samples: usize,
    },
    /// Cross-validated predictive scores.
    Cv {
        #[command(flatten)]
        run: StateArgs,
        /// Refit and score each of these kinds (e.g. GS,M2) instead of the configured priors.
        #[arg(long, value_delimiter = ',')]
        compare: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct StateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Fitted state; defaults to state.json in the output directory.
    #[arg(long)]
    state: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code: 0 on success, 2 for usage or configuration errors, 1 otherwise.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config { .. }) {
                2
            } else {
                1
            }
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { spec, out, seed } => simulate(&spec, &out, seed),
        Command::Fit(a) => fit(&LoadedRun::load(&a.config, a.seed)?),
        Command::Ppm(a) => ppm(&LoadedRun::load(&a.run.config, a.run.seed)?, a.state.as_deref()),
        Command::SamplePrior { run, samples } => {
            sample_priors(&LoadedRun::load(&run.run.config, run.run.seed)?, run.state.as_deref(), samples)
        }
        Command::Cv { run, compare, out } => cv(
            &LoadedRun::load(&run.run.config, run.run.seed)?,
            run.state.as_deref(),
            &compare,
            out.as_deref(),
        ),
    }
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Data, mask and design of a run, plus the model built from its priors.
pub struct LoadedRun {
    pub config: RunConfig,
    pub seed: u64,
    pub geometry: Geometry,
    pub lattice: MaskedLattice,
    pub ops: Arc<LatticeOperators>,
    pub data: Dataset,
}

impl LoadedRun {
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        let config = RunConfig::load(path)?;
        config.validate()?;
        let p = &config.paths;
        let bold = read_volume(&p.data).map_err(|e| with_path(&p.data, e))?;
        let mask = read_volume(&p.mask).map_err(|e| with_path(&p.mask, e))?;
        if mask.geometry.dims != bold.geometry.dims {
            return Err(Error::Config {
                key: "paths.mask".into(),
                reason: format!("mask dims {:?} differ from data dims {:?}", mask.geometry.dims, bold.geometry.dims),
            });
        }
        let lattice = MaskedLattice::new(bold.geometry.dims, bold.geometry.voxel_size, &mask.to_mask())?;
        let y = bold.masked_series(&lattice)?;
        let design = read_design(&p.design).map_err(|e| with_path(&p.design, e))?;
        if design.x.nrows() != y.nrows() {
            return Err(Error::Config {
                key: "paths.design".into(),
                reason: format!("{} design rows for {} volumes", design.x.nrows(), y.nrows()),
            });
        }
        let (act, _) = config.roles(design.x.ncols())?;
        let data = Dataset::new(y, design.x, act)?;
        Ok(LoadedRun {
            seed: seed.unwrap_or(config.seed),
            geometry: bold.geometry,
            ops: Arc::new(LatticeOperators::new(&lattice)),
            lattice,
            data,
            config,
        })
    }

    /// Model with the given activity priors, and its starting spatial values.
    pub fn model(&self, priors: &[PriorConfig]) -> Result<(EbModel, Vec<SpatialParams>)> {
        let mut cfg = self.config.clone();
        cfg.model.priors = priors.to_vec();
        cfg.validate()?;
        let (specs, init) = cfg.prior_specs(self.data.k(), self.data.global_mean)?;
        let m = &cfg.model;
        let mut model = EbModel::new(&self.data, self.ops.clone(), specs, m.ar_order, m.noise_prior)?;
        model.optimize_noise = m.optimize_noise;
        Ok((model, init))
    }

    fn output(&self) -> Result<PathBuf> {
        let out = self.config.paths.output.clone();
        fs::create_dir_all(&out)?;
        Ok(out)
    }

    fn state_path(&self, arg: Option<&Path>) -> PathBuf {
        arg.map(Path::to_path_buf).unwrap_or_else(|| self.config.paths.output.join("state.json"))
    }

    fn read_state(&self, path: &Path, model: &EbModel) -> Result<HyperState> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config {
                key: "--state".into(),
                reason: format!("{}: {e}", path.display()),
            })?;
        let s: HyperState = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let (n, k, p) = (model.n(), model.k(), model.ar_order());
        if s.spatial.len() != k || s.noise.lambda.len() != n || s.noise.a.nrows() != p || s.noise.a.ncols() != n {
            return Err(Error::Dimension(format!(
                "{} does not match the model (K={k}, N={n}, P={p})",
                path.display()
            )));
        }
        Ok(s)
    }

    fn volume(&self, rows: &[Vec<f64>]) -> Result<Volume> {
        Volume::from_masked(self.geometry, &self.lattice, rows)
    }

    fn posterior(&self, model: &EbModel, state: &HyperState) -> Result<PosteriorGmrf> {
        let sys = PosteriorSystem::assemble(&model.stats, &state.noise, model.build_priors(&state.spatial)?, None)?;
        summarize(&sys, &self.config.posterior, derive_seed(self.seed, 1), None)
    }
}

fn fit(run: &LoadedRun) -> Result<()> {
    let (model, init) = run.model(&run.config.model.priors)?;
    let start = HyperState {
        spatial: init,
        noise: init_noise(&run.data, model.ar_order())?,
    };
    let out = fit_hyperparameters(&model, start, &run.config.optimizer, run.seed)?;
    let dir = run.output()?;
    fs::write(
        dir.join("state.json"),
        serde_json::to_string_pretty(&out.state).map_err(|e| Error::Format(e.to_string()))?,
    )?;

    let mut w = csv_writer(&dir.join("diagnostics.csv"))?;
    write_row(&mut w, &["iteration", "coordinate", "value", "gradient", "step"])?;
    for rec in &out.trace {
        for i in 0..out.layout.n_spatial {
            write_row(
                &mut w,
                &[
                    rec.iteration.to_string(),
                    out.layout.name(i),
                    rec.theta[i].to_string(),
                    rec.grad[i].to_string(),
                    rec.step[i].to_string(),
                ],
            )?;
        }
    }
    w.flush()?;

    let mut w = csv_writer(&dir.join("hyperparameters.csv"))?;
    write_row(&mut w, &["regressor", "kind", "tau2", "kappa2", "hx", "hy", "sigma", "range_mm"])?;
    for &c in &run.data.activity {
        let (kind, p) = (model.specs[c].kind, out.state.spatial[c]);
        let (sigma, range) = match sigma_rho(p.tau2, p.kappa2, kind.alpha(), 3) {
            Ok((s2, r)) => (s2.sqrt().to_string(), (r * run.lattice.voxel_edge()).to_string()),
            Err(_) => (String::new(), String::new()),
        };
        write_row(
            &mut w,
            &[
                (c + 1).to_string(),
                kind.label().to_string(),
                p.tau2.to_string(),
                p.kappa2.to_string(),
                p.hx.to_string(),
                p.hy.to_string(),
                sigma.clone(),
                range.clone(),
            ],
        )?;
        println!(
            "regressor {}: {} tau2={:.4e} kappa2={:.4e} hx={:.3} hy={:.3} sigma={sigma} range_mm={range}",
            c + 1,
            kind.label(),
            p.tau2,
            p.kappa2,
            p.hx,
            p.hy
        );
    }
    w.flush()?;

    let post = run.posterior(&model, &out.state)?;
    let k = model.k();
    let means: Vec<Vec<f64>> = (0..k).map(|c| post.mean[c * post.n..(c + 1) * post.n].to_vec()).collect();
    let sds: Vec<Vec<f64>> = (0..k).map(|c| post.sd(c)).collect();
    write_volume(&dir.join("mean.nii"), &run.volume(&means)?)?;
    write_volume(&dir.join("sd.nii"), &run.volume(&sds)?)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn ppm(run: &LoadedRun, state: Option<&Path>) -> Result<()> {
    let (model, _) = run.model(&run.config.model.priors)?;
    let state = run.read_state(&run.state_path(state), &model)?;
    let post = run.posterior(&model, &state)?;
    let act = &run.data.activity;
    let cfg = &run.config.ppm;
    let contrasts: Vec<Vec<f64>> = if cfg.contrasts.is_empty() {
        (0..act.len()).map(|j| (0..act.len()).map(|i| f64::from(u8::from(i == j))).collect()).collect()
    } else {
        cfg.contrasts.clone()
    };
    let gamma = cfg.gamma_pct / 100.0 * run.data.global_mean;
    let mut probs = Vec::new();
    let mut shown = Vec::new();
    for (i, c) in contrasts.iter().enumerate() {
        let mut full = vec![0.0; model.k()];
        for (j, &col) in act.iter().enumerate() {
            full[col] = c[j];
        }
        let mut map = compute_ppm(&post, &full, gamma)?;
        map.display_threshold = cfg.display_threshold;
        let active = map.active();
        println!(
            "contrast {}: {} of {} voxels at p >= {}",
            i + 1,
            active.iter().filter(|&&a| a).count(),
            active.len(),
            cfg.display_threshold
        );
        shown.push(map.prob.iter().zip(&active).map(|(&p, &a)| if a { p } else { 0.0 }).collect());
        probs.push(map.prob);
    }
    let dir = run.output()?;
    write_volume(&dir.join("ppm.nii"), &run.volume(&probs)?)?;
    write_volume(&dir.join("ppm_thresholded.nii"), &run.volume(&shown)?)?;
    Ok(())
}

fn sample_priors(run: &LoadedRun, state: Option<&Path>, samples: usize) -> Result<()> {
    if samples == 0 {
        return Err(Error::Config {
            key: "--samples".into(),
            reason: "must be at least 1".into(),
        });
    }
    let (model, init) = run.model(&run.config.model.priors)?;
    let path = run.state_path(state);
    let params = if state.is_some() || path.is_file() {
        run.read_state(&path, &model)?.spatial
    } else {
        init
    };
    let dir = run.output()?;
    for &c in &run.data.activity {
        let mut spec: SpatialPriorSpec = model.specs[c].clone();
        spec.params = params[c];
        let draws = (0..samples)
            .map(|s| sample_prior(&spec, run.ops.clone(), derive_seed(derive_seed(run.seed, c as u64), s as u64)))
            .collect::<Result<Vec<_>>>()?;
        write_volume(&dir.join(format!("prior_samples_{}.nii", c + 1)), &run.volume(&draws)?)?;
    }
    println!("wrote {} draws per activity regressor to {}", samples, dir.display());
    Ok(())
}

fn parse_kind(s: &str) -> Result<PriorKind> {
    [PriorKind::Gs, PriorKind::Icar1, PriorKind::M1, PriorKind::Icar2, PriorKind::M2, PriorKind::Am2]
        .into_iter()
        .find(|k| k.label().eq_ignore_ascii_case(s.trim()))
        .ok_or_else(|| Error::Config {
            key: "--compare".into(),
            reason: format!("unknown prior kind `{s}` (GS, ICAR1, M1, ICAR2, M2, AM2)"),
        })
}

fn cv(run: &LoadedRun, state: Option<&Path>, compare: &[String], out: Option<&Path>) -> Result<()> {
    let n_act = run.data.activity.len();
    let variants: Vec<Option<PriorKind>> = if compare.is_empty() {
        vec![None]
    } else {
        compare.iter().map(|s| parse_kind(s).map(Some)).collect::<Result<_>>()?
    };
    run.config.cv.validate(run.lattice.n_voxels())?;
    let dir = run.output()?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("cv_scores.csv"));
    let mut w = csv_writer(&path)?;
    write_row(&mut w, &["split", "prior", "mae", "rmse", "crps", "ign", "int"])?;
    for v in variants {
        let priors = match v {
            Some(k) => vec![PriorConfig::of_kind(k); n_act],
            None => run.config.model.priors.clone(),
        };
        let label = priors.iter().map(|p| p.kind.label()).collect::<Vec<_>>().join("+");
        let (model, init) = run.model(&priors)?;
        let saved = run.state_path(state);
        let fitted = if v.is_none() && (state.is_some() || saved.is_file()) {
            run.read_state(&saved, &model)?
        } else {
            let start = HyperState {
                spatial: init,
                noise: init_noise(&run.data, model.ar_order())?,
            };
            fit_hyperparameters(&model, start, &run.config.optimizer, run.seed)?.state
        };
        let reports = run_cv(&model, &run.data, &fitted, &run.config.cv, &run.config.posterior, run.seed)?;
        let mean = |f: fn(&crate::evalsim::ScoreReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        println!(
            "{label}: mean rmse {:.5} crps {:.5} ign {:.5} int {:.5}",
            mean(|r| r.rmse),
            mean(|r| r.crps),
            mean(|r| r.ign),
            mean(|r| r.int)
        );
        for (j, r) in reports.iter().enumerate() {
            write_row(
                &mut w,
                &[
                    (j + 1).to_string(),
                    label.clone(),
                    r.mae.to_string(),
                    r.rmse.to_string(),
                    r.crps.to_string(),
                    r.ign.to_string(),
                    r.int.to_string(),
                ],
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Truth {
    condition: Vec<TruthRow>,
}

#[derive(Serialize)]
struct TruthRow {
    kind: PriorKind,
    tau2: f64,
    kappa2: f64,
    hx: f64,
    hy: f64,
    sigma: f64,
    range_mm: f64,
}

fn simulate(spec_path: &Path, out: &Path, seed: u64) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::Config {
        key: "--spec".into(),
        reason: format!("{}: {e}", spec_path.display()),
    })?;
    let spec: SimulationSpec = parse_toml(&text)?;
    let sim = simulate_dataset(&spec, seed)?;
    fs::create_dir_all(out)?;
    let geometry = Geometry {
        dims: spec.dims,
        voxel_size: spec.voxel_size,
        origin: [0.0; 3],
    };
    let lat = &sim.lattice;
    let y = &sim.dataset.y;
    let frames: Vec<Vec<f64>> = (0..y.nrows()).map(|t| y.row(t).iter().copied().collect()).collect();
    write_volume(&out.join("bold.nii"), &Volume::from_masked(geometry, lat, &frames)?)?;
    write_volume(&out.join("mask.nii"), &Volume::from_masked(geometry, lat, &[vec![1.0; lat.n_voxels()]])?)?;
    let c = spec.conditions.len();
    let mut names: Vec<String> = (1..=c).map(|i| format!("condition{i}")).collect();
    names.push("intercept".into());
    write_design(&out.join("design.csv"), &sim.dataset.x, &names)?;
    let beta: Vec<Vec<f64>> = (0..c).map(|i| sim.beta.row(i).iter().copied().collect()).collect();
    write_volume(&out.join("truth_beta.nii"), &Volume::from_masked(geometry, lat, &beta)?)?;

    let rows = spec
        .conditions
        .iter()
        .zip(&sim.params)
        .map(|(cond, p)| {
            let (s2, r) = sigma_rho(p.tau2, p.kappa2, cond.kind.alpha(), 3).unwrap_or((f64::NAN, f64::NAN));
            TruthRow {
                kind: cond.kind,
                tau2: p.tau2,
                kappa2: p.kappa2,
                hx: p.hx,
                hy: p.hy,
                sigma: s2.sqrt(),
                range_mm: r * lat.voxel_edge(),
            }
        })
        .collect();
    let truth = toml::to_string(&Truth { condition: rows }).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join("truth.toml"), truth)?;

    let ar_order = spec.noise.as_ref().map_or(0, |n| n.ar.len());
    let run = RunConfig {
        seed,
        paths: crate::io::Paths {
            data: "bold.nii".into(),
            mask: "mask.nii".into(),
            design: "design.csv".into(),
            output: "fit".into(),
        },
        model: crate::io::ModelConfig {
            activity: (1..=c).collect(),
            nuisance: None,
            ar_order,
            optimize_noise: true,
            noise_prior: Default::default(),
            priors: vec![PriorConfig::of_kind(PriorKind::Am2); c],
        },
        optimizer: Default::default(),
        posterior: Default::default(),
        ppm: Default::default(),
        cv: Default::default(),
    };
    fs::write(out.join("run.toml"), run.to_toml()?)?;
    println!("simulated {} voxels × {} volumes into {}", lat.n_voxels(), y.nrows(), out.display());
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_row<S: AsRef<[u8]>>(w: &mut csv::Writer<fs::File>, row: &[S]) -> Result<()> {
    w.write_record(row).map_err(|e| Error::Format(e.to_string()))
}

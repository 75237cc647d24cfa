//! Command implementations. Each returns once its outputs are written.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;

use regcopula::basis::RawCovariates;
use regcopula::bench::{assemble, fold_assignment, score_fold, standard_variants, synth_generate, CvConfig, Dataset, ScoreTable};
use regcopula::lfi::{
    self, calibration_report, latin_hypercube_hyperpriors, simulate_from, simulate_one, CensusSetup, HyperParams,
    Simulation, INNER_DRAWS, RESPONSE_NAMES, SUMMARY_LEN,
};
use regcopula::math;
use regcopula::predict::{fit_model, FittedModel};
use regcopula::rng;
use regcopula::vi::FitTrace;

use crate::artifact::{ModelArtifact, Provenance, Storage};
use crate::config::{config_hash, BasisConfig, BasisName, RunConfig};
use crate::csvio::{emit, numeric_rows, parse_list, to_csv, write_atomic, Table};
use crate::error::{CliError, CliResult};

/// Flags shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Run configuration, its hash and the effective seed.
pub struct Context {
    pub config: RunConfig,
    pub config_sha256: String,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Context {
    pub fn new(g: &Globals) -> CliResult<Self> {
        let (config, text) = match &g.config {
            Some(p) => RunConfig::load(p)?,
            None => (RunConfig::default(), String::new()),
        };
        let seed = g.seed.or(config.seed).unwrap_or(0);
        Ok(Self { config_sha256: config_hash(&text), config, seed, out: g.out.clone() })
    }

    fn out_required(&self, what: &str) -> CliResult<&Path> {
        self.out.as_deref().ok_or_else(|| CliError::input(format!("--out is required to write {what}")))
    }

    fn provenance(&self, command: &str) -> Provenance {
        Provenance::new(command, self.config_sha256.clone(), self.seed)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn trace_csv(trace: &FitTrace) -> Vec<u8> {
    let rows = trace
        .elbo
        .iter()
        .zip(&trace.smoothed)
        .enumerate()
        .map(|(i, (e, s))| vec![(i + 1).to_string(), e.to_string(), s.to_string()]);
    to_csv(&["iteration", "elbo", "smoothed_elbo"], rows)
}

fn save_fit(ctx: &Context, command: &str, artifact: ModelArtifact, trace: &FitTrace, storage: Storage) -> CliResult<()> {
    let out = ctx.out_required("the model artifact")?;
    let artifact = ModelArtifact { provenance: ctx.provenance(command), ..artifact };
    artifact.save(out, storage)?;
    write_atomic(&sibling(out, "trace.csv"), &trace_csv(trace))
}

pub fn fit(ctx: &Context, storage: Storage) -> CliResult<()> {
    let data = ctx.config.data.as_ref().ok_or_else(|| CliError::input("config needs a [data] table for fit"))?;
    let table = Table::read(&data.path)?;
    let y = table.select(&data.responses)?;
    let x = table.select(&data.covariates)?;
    let raw = RawCovariates::new(x, data.covariates.clone())?;
    let spec = ctx.config.model_spec(data.responses.len(), ctx.seed)?;
    let (model, trace) = fit_model(&y, &raw, &spec)?;
    let artifact = ModelArtifact {
        model,
        response_names: data.responses.clone(),
        covariate_names: data.covariates.clone(),
        provenance: ctx.provenance("fit"),
    };
    save_fit(ctx, "fit", artifact, &trace, storage)
}

/// What `predict` emits at each covariate row.
#[derive(Debug, Clone)]
pub enum PredictProduct {
    Samples(usize),
    Spearman,
    Mean,
    DensityGrid(usize),
    /// Log predictive density of the response columns of this CSV (covariates are read from it too).
    Density(PathBuf),
}

pub const GRID_TAIL: f64 = 1e-3;

fn covariate_rows(art: &ModelArtifact, x_file: Option<&Path>, at: Option<&str>) -> CliResult<Vec<Vec<f64>>> {
    let d = art.covariate_names.len();
    let rows = match (x_file, at) {
        (Some(p), None) => {
            let t = Table::read(p)?;
            let m = t.select(&art.covariate_names)?;
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        }
        (None, Some(text)) => vec![parse_list(text)?],
        _ => return Err(CliError::input("give exactly one of --x or --at")),
    };
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(CliError::input(format!("covariate row {i} has {} values, model expects {d}", r.len())));
        }
    }
    Ok(rows)
}

pub fn predict(ctx: &Context, model: &Path, x_file: Option<&Path>, at: Option<&str>, product: &PredictProduct) -> CliResult<()> {
    let art = ModelArtifact::load(model)?;
    let m = &art.model;
    let names = &art.response_names;
    let p = names.len();
    let bytes = match product {
        PredictProduct::Density(path) => {
            let t = Table::read(path)?;
            let x = t.select(&art.covariate_names)?;
            let y = t.select(names)?;
            let mut rows = Vec::with_capacity(x.nrows());
            for i in 0..x.nrows() {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                let yi: Vec<f64> = y.row(i).iter().copied().collect();
                rows.push(vec![i.to_string(), m.ln_predictive_density(&xi, &yi)?.to_string()]);
            }
            to_csv(&["row", "ln_density"], rows)
        }
        _ => {
            let xs = covariate_rows(&art, x_file, at)?;
            let mut rows = Vec::new();
            let mut header: Vec<String> = vec!["row".into()];
            match product {
                PredictProduct::Samples(count) => {
                    header.extend(names.iter().cloned());
                    for (i, x) in xs.iter().enumerate() {
                        let batch = m.predictive_sample(x, *count, ctx.seed.wrapping_add(i as u64))?;
                        for r in numeric_rows(&batch.samples) {
                            rows.push(std::iter::once(i.to_string()).chain(r).collect());
                        }
                    }
                }
                PredictProduct::Spearman => {
                    header.push("response".into());
                    header.extend(names.iter().cloned());
                    for (i, x) in xs.iter().enumerate() {
                        let s = m.spearman_matrix(x)?;
                        for (j, r) in numeric_rows(&s).into_iter().enumerate() {
                            rows.push([i.to_string(), names[j].clone()].into_iter().chain(r).collect());
                        }
                    }
                }
                PredictProduct::Mean => {
                    header.extend(names.iter().cloned());
                    for (i, x) in xs.iter().enumerate() {
                        let mut r = vec![i.to_string()];
                        for j in 0..p {
                            r.push(m.marginal_mean(x, j)?.mean.to_string());
                        }
                        rows.push(r);
                    }
                }
                PredictProduct::DensityGrid(points) => {
                    header.extend(["response".into(), "y".into(), "density".into()]);
                    for (i, x) in xs.iter().enumerate() {
                        for (j, grid) in marginal_density_grid(m, x, *points)?.into_iter().enumerate() {
                            for (y, f) in grid {
                                rows.push(vec![i.to_string(), names[j].clone(), y.to_string(), f.to_string()]);
                            }
                        }
                    }
                }
                PredictProduct::Density(_) => unreachable!(),
            }
            to_csv(&header, rows)
        }
    };
    emit(ctx.out.as_deref(), &bytes)
}

/// Marginal predictive density of every response on `points` values between its
/// `GRID_TAIL` and `1 - GRID_TAIL` predictive quantiles.
pub fn marginal_density_grid(m: &FittedModel, x: &[f64], points: usize) -> CliResult<Vec<Vec<(f64, f64)>>> {
    if points < 2 {
        return Err(CliError::input("density grid needs at least two points"));
    }
    let law = m.score_law(x)?;
    let mut out = Vec::with_capacity(m.responses());
    for (j, g) in m.margins.iter().enumerate() {
        let (mean, scale) = (law.mean[j], law.scales[j]);
        let lo = g.from_z(mean + scale * math::norm_quantile(GRID_TAIL));
        let hi = g.from_z(mean + scale * math::norm_quantile(1.0 - GRID_TAIL));
        let grid = (0..points)
            .map(|k| {
                let y = lo + (hi - lo) * k as f64 / (points - 1) as f64;
                let z = g.to_z(y);
                let f = g.pdf(y) / math::norm_pdf(z) * math::norm_pdf((z - mean) / scale) / scale;
                (y, f)
            })
            .collect();
        out.push(grid);
    }
    Ok(out)
}

fn benchmark_data(cfg: &RunConfig) -> CliResult<Dataset> {
    match (&cfg.data, &cfg.synthetic) {
        (Some(d), None) => {
            let t = Table::read(&d.path)?;
            Ok(Dataset::new(t.select(&d.responses)?, t.select(&d.covariates)?)?)
        }
        (None, Some(s)) => Ok(synth_generate(&s.spec()?)?.data),
        _ => Err(CliError::input("benchmark needs exactly one of [data] or [synthetic]")),
    }
}

pub fn score_table_csv(t: &ScoreTable) -> Vec<u8> {
    let rows = t.rows.iter().map(|r| {
        vec![
            r.model.clone(),
            r.crps.to_string(),
            r.ls.to_string(),
            r.rmse.to_string(),
            r.folds_scored.to_string(),
            r.folds_failed.to_string(),
        ]
    });
    to_csv(&["model", "crps", "ls", "rmse", "folds_scored", "folds_failed"], rows)
}

fn fold_csv(t: &ScoreTable) -> Vec<u8> {
    let rows = t.folds.iter().map(|f| {
        vec![
            f.model.clone(),
            f.fold.to_string(),
            f.rows.to_string(),
            f.crps.to_string(),
            f.ls.to_string(),
            f.rmse.to_string(),
            f.failure.clone().unwrap_or_default(),
        ]
    });
    to_csv(&["model", "fold", "rows", "crps", "ls", "rmse", "failure"], rows)
}

pub fn benchmark(ctx: &Context) -> CliResult<()> {
    let cfg = &ctx.config;
    let data = benchmark_data(cfg)?;
    let p = data.y.ncols();
    let base = cfg.model_spec(p, ctx.seed)?;
    let basis = cfg.basis_or(BasisConfig::default());
    let mut variants = standard_variants(&base, basis.knots, basis.seed);
    let mut cv = CvConfig::new(p, ctx.seed);
    if let Some(b) = &cfg.benchmark {
        if let Some(keep) = &b.variants {
            if let Some(bad) = keep.iter().find(|k| !variants.iter().any(|v| &v.name == *k)) {
                return Err(CliError::input(format!("unknown variant '{bad}'")));
            }
            variants.retain(|v| keep.contains(&v.name));
        }
        cv.folds = b.folds.unwrap_or(cv.folds);
        cv.samples_per_row = b.samples_per_row.unwrap_or(cv.samples_per_row);
        cv.quadrature_order = b.quadrature_order.unwrap_or(cv.quadrature_order);
        if let Some(w) = &b.weights {
            if w.len() != p {
                return Err(CliError::input(format!("{} weights for {p} responses", w.len())));
            }
            cv.weights = w.clone();
        }
    }
    let partition = fold_assignment(data.y.nrows(), cv.folds, cv.seed)?;
    let jobs: Vec<(usize, usize)> = (0..variants.len()).flat_map(|v| (0..cv.folds).map(move |f| (v, f))).collect();
    let folds = jobs.par_iter().map(|&(v, f)| score_fold(&data, &variants[v], &partition, f, &cv)).collect();
    let table = assemble(&variants, folds, cv.seed);
    if let Some(out) = ctx.out.as_deref() {
        write_atomic(&sibling(out, "folds.csv"), &fold_csv(&table))?;
    }
    emit(ctx.out.as_deref(), &score_table_csv(&table))
}

fn census_setup(cfg: &RunConfig) -> CliResult<CensusSetup> {
    match cfg.lfi.as_ref().and_then(|l| l.census_file.as_ref()) {
        None => Ok(CensusSetup::default_synthetic()),
        Some(p) => {
            let t = Table::read(p)?;
            let (a, dt) = (t.column_index("abundance")?, t.column_index("interval")?);
            let mut abundance = Vec::with_capacity(t.rows.len());
            for (i, r) in t.rows.iter().enumerate() {
                let n = r[a];
                if n < 0.0 || n.fract() != 0.0 {
                    return Err(CliError::input(format!("{}: line {}: abundance must be a nonnegative integer", p.display(), i + 2)));
                }
                abundance.push(n as u64);
            }
            Ok(CensusSetup::new(abundance, t.rows.iter().map(|r| r[dt]).collect())?)
        }
    }
}

pub const PARAM_NAMES: [&str; 5] = ["omega", "sigma2", "c", "phi1", "phi2"];

fn summary_names() -> Vec<String> {
    (1..=SUMMARY_LEN).map(|k| format!("H{k}")).collect()
}

fn simulations_csv(sims: &[Simulation]) -> Vec<u8> {
    let mut header: Vec<String> = PARAM_NAMES.iter().map(|s| s.to_string()).collect();
    header.extend(summary_names());
    header.push("redraws".into());
    let rows = sims.iter().map(|s| {
        let p = s.params;
        [p.omega, p.sigma2, p.c, p.phi1, p.phi2]
            .iter()
            .chain(s.summaries.iter())
            .map(|v| v.to_string())
            .chain(std::iter::once(s.redraws.to_string()))
            .collect()
    });
    to_csv(&header, rows)
}

fn read_simulations(path: &Path) -> CliResult<Vec<Simulation>> {
    let t = Table::read(path)?;
    let mut names: Vec<String> = PARAM_NAMES.iter().map(|s| s.to_string()).collect();
    names.extend(summary_names());
    let m = t.select(&names)?;
    let redraws = t.column_index("redraws").ok();
    (0..m.nrows())
        .map(|i| {
            let params = HyperParams { omega: m[(i, 0)], sigma2: m[(i, 1)], c: m[(i, 2)], phi1: m[(i, 3)], phi2: m[(i, 4)] };
            if !(params.sigma2 > 0.0 && params.phi1 > 0.0 && params.phi2 > 0.0) {
                return Err(CliError::input(format!("{}: line {}: sigma2, phi1, phi2 must be positive", path.display(), i + 2)));
            }
            let mut summaries = [0.0; SUMMARY_LEN];
            for (k, h) in summaries.iter_mut().enumerate() {
                *h = m[(i, 5 + k)];
            }
            Ok(Simulation { params, summaries, redraws: redraws.map_or(0, |c| t.rows[i][c] as u32) })
        })
        .collect()
}

pub fn parallel_simulations(setup: &CensusSetup, sims: usize, seed: u64) -> CliResult<Vec<Simulation>> {
    (0..sims as u64)
        .into_par_iter()
        .map(|r| simulate_one(setup, seed, r).map_err(CliError::from))
        .collect()
}

fn sim_count(cfg: &RunConfig) -> usize {
    cfg.lfi.as_ref().and_then(|l| l.sims).unwrap_or(1000)
}

pub fn simulate(ctx: &Context) -> CliResult<()> {
    let setup = census_setup(&ctx.config)?;
    let sims = parallel_simulations(&setup, sim_count(&ctx.config), ctx.seed)?;
    emit(ctx.out.as_deref(), &simulations_csv(&sims))
}

pub const LFI_KNOTS: usize = 50;

pub fn lfi_train(ctx: &Context, storage: Storage) -> CliResult<()> {
    let cfg = &ctx.config;
    let sims = match cfg.lfi.as_ref().and_then(|l| l.simulations_file.as_ref()) {
        Some(p) => read_simulations(p)?,
        None => parallel_simulations(&census_setup(cfg)?, sim_count(cfg), ctx.seed)?,
    };
    let basis = cfg.basis_or(BasisConfig { kind: BasisName::ThinPlate, knots: LFI_KNOTS, ..BasisConfig::default() });
    let mut spec = lfi::lfi_model_spec(basis.knots, basis.seed, cfg.prior.kind(5)?);
    spec.basis = basis.spec();
    spec.fit = cfg.fit.config(ctx.seed);
    spec.init = cfg.init.config();
    spec.fit.validate()?;
    let (model, trace) = lfi::lfi_fit(&sims, &spec)?;
    let artifact = ModelArtifact {
        model,
        response_names: RESPONSE_NAMES.iter().map(|s| s.to_string()).collect(),
        covariate_names: summary_names(),
        provenance: ctx.provenance("lfi-train"),
    };
    save_fit(ctx, "lfi-train", artifact, &trace, storage)
}

/// Optional variance decomposition of `lfi-posterior`.
#[derive(Debug, Clone, Copy)]
pub struct VarianceRequest {
    pub abundance: f64,
    pub interval: f64,
    /// Decompose at the posterior mean of the transformed parameters only.
    pub plug_in: bool,
}

pub fn lfi_posterior(ctx: &Context, model: &Path, at: &str, draws: usize, variance: Option<VarianceRequest>) -> CliResult<()> {
    let art = ModelArtifact::load(model)?;
    let observed = parse_list(at)?;
    let psi = lfi::lfi_posterior(&art.model, &observed, draws, ctx.seed)?;
    let mut header: Vec<String> = PARAM_NAMES.iter().map(|s| s.to_string()).collect();
    let Some(v) = variance else {
        let rows = psi.iter().map(|p| [p.omega, p.sigma2, p.c, p.phi1, p.phi2].iter().map(|x| x.to_string()).collect());
        return emit(ctx.out.as_deref(), &to_csv(&header, rows));
    };
    header.extend(["environmental", "demographic", "variance"].map(String::from));
    let points = if v.plug_in {
        let mut mean = [0.0; 5];
        for p in &psi {
            for (m, r) in mean.iter_mut().zip(p.to_response()) {
                *m += r / psi.len() as f64;
            }
        }
        vec![HyperParams::from_response(&mean)?]
    } else {
        psi
    };
    let parts = lfi::demographic_variance_samples(&points, v.abundance, v.interval, INNER_DRAWS, ctx.seed)?;
    let rows = points.iter().zip(&parts).map(|(p, d)| {
        [p.omega, p.sigma2, p.c, p.phi1, p.phi2, d.environmental, d.demographic, d.variance].iter().map(|x| x.to_string()).collect()
    });
    emit(ctx.out.as_deref(), &to_csv(&header, rows))
}

/// Parallel equivalent of the core calibration with identical per-case streams.
pub fn parallel_calibration(model: &FittedModel, setup: &CensusSetup, cases: usize, per_case: usize, seed: u64) -> CliResult<lfi::CalibrationReport> {
    let params = latin_hypercube_hyperpriors(cases, &mut rng::stream(seed, u64::MAX))?;
    let sims: Vec<Simulation> = params
        .into_par_iter()
        .enumerate()
        .map(|(i, p)| simulate_from(p, setup, &mut rng::stream(seed, i as u64)).map_err(CliError::from))
        .collect::<CliResult<_>>()?;
    let per: Vec<DMatrix<f64>> = sims
        .par_iter()
        .enumerate()
        .map(|(i, s)| Ok(model.predictive_sample(&s.summaries, per_case, seed.wrapping_add(i as u64))?.samples))
        .collect::<CliResult<_>>()?;
    let draws: Vec<Vec<Vec<f64>>> =
        (0..5).map(|j| per.iter().map(|m| m.column(j).iter().copied().collect()).collect()).collect();
    Ok(calibration_report(&draws)?)
}

pub fn calibrate(ctx: &Context, model: &Path) -> CliResult<()> {
    let art = ModelArtifact::load(model)?;
    let lfi_cfg = ctx.config.lfi.as_ref();
    let cases = lfi_cfg.and_then(|l| l.cases).unwrap_or(200);
    let per_case = lfi_cfg.and_then(|l| l.per_case).unwrap_or(500);
    let report = parallel_calibration(&art.model, &census_setup(&ctx.config)?, cases, per_case, ctx.seed)?;
    if let Some(out) = ctx.out.as_deref() {
        let mut rows = Vec::new();
        for (j, c) in report.curves.iter().enumerate() {
            for k in 0..c.grid.len() {
                rows.push(vec![RESPONSE_NAMES[j].to_string(), c.grid[k].to_string(), c.average[k].to_string(), c.reference[k].to_string()]);
            }
        }
        write_atomic(&sibling(out, "curves.csv"), &to_csv(&["parameter", "value", "average_cdf", "prior_cdf"], rows))?;
    }
    let rows = report.distances().into_iter().enumerate().map(|(j, d)| vec![RESPONSE_NAMES[j].to_string(), d.to_string()]);
    emit(ctx.out.as_deref(), &to_csv(&["parameter", "distance"], rows))
}

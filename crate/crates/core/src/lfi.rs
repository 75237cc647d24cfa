//! Tree-census simulator, summary statistics and amortized posterior estimation.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Binomial, Distribution, Exp, Gamma, Poisson, StandardNormal};

use crate::basis::{BasisSpec, RawCovariates};
use crate::error::{bail, Error, Result};
use crate::margins::Margin;
use crate::math;
use crate::model::PriorKind;
use crate::predict::{calibration_curve, fit_model, reference_grid, CalibrationCurve, FittedModel, MarginSpec, ModelSpec};
use crate::rng::{self, Rng};
use crate::vi::FitTrace;

pub const OMEGA_MEAN: f64 = -3.3;
pub const OMEGA_SD: f64 = 1.2;
pub const C_MEAN: f64 = 0.07;
pub const C_SD: f64 = 0.08;
pub const SIGMA2_SHAPE: f64 = 2.0;
pub const SIGMA2_SCALE: f64 = 1.0;
pub const PHI_SHAPE: f64 = 3.0;
pub const PHI_SCALE: f64 = 200.0;

/// Smallest admissible upper-tail mass of a truncated lognormal.
pub const MIN_TAIL_MASS: f64 = 1e-14;
pub const MIN_SPECIES: usize = 50;
pub const ABUNDANCE_BINS: usize = 10;
/// Minimum abundance for the per-species rate spreads.
pub const RATE_MIN_ABUNDANCE: u64 = 5;
pub const SUMMARY_LEN: usize = 5;
pub const MIN_TRAINING_SIMS: usize = 500;
pub const INNER_DRAWS: usize = 10_000;

pub const DEFAULT_SPECIES: usize = 800;
pub const DEFAULT_MEDIAN_ABUNDANCE: u64 = 8;
pub const DEFAULT_INTERVAL: f64 = 5.0;
/// Prior redraws allowed when a simulation hits a vanishing truncation mass.
pub const MAX_REDRAWS: u32 = 100;

/// Hyperparameters of one census interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub omega: f64,
    pub sigma2: f64,
    pub c: f64,
    pub phi1: f64,
    pub phi2: f64,
}

pub const RESPONSE_NAMES: [&str; 5] = ["omega", "log_sigma2", "c", "log_phi1", "log_phi2"];

impl HyperParams {
    /// Regression responses `(omega, log sigma2, c, log phi1, log phi2)`.
    pub fn to_response(&self) -> [f64; 5] {
        [self.omega, math::ln(self.sigma2), self.c, math::ln(self.phi1), math::ln(self.phi2)]
    }

    pub fn from_response(r: &[f64]) -> Result<Self> {
        if r.len() != 5 {
            bail!(Input, "hyperparameter response needs 5 entries, got {}", r.len());
        }
        Ok(Self { omega: r[0], sigma2: math::exp(r[1]), c: r[2], phi1: math::exp(r[3]), phi2: math::exp(r[4]) })
    }

    /// Prior margins of the regression responses.
    pub fn prior_margins() -> [Margin; 5] {
        [
            Margin::Normal { mean: OMEGA_MEAN, sd: OMEGA_SD },
            Margin::LogInverseGamma { shape: SIGMA2_SHAPE, scale: SIGMA2_SCALE },
            Margin::Normal { mean: C_MEAN, sd: C_SD },
            Margin::LogInverseGamma { shape: PHI_SHAPE, scale: PHI_SCALE },
            Margin::LogInverseGamma { shape: PHI_SHAPE, scale: PHI_SCALE },
        ]
    }
}

fn inverse_gamma(shape: f64, scale: f64, rng: &mut Rng) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0 / scale).expect("valid gamma parameters").sample(rng);
    1.0 / g
}

pub fn sample_hyperpriors(rng: &mut Rng) -> HyperParams {
    let omega = OMEGA_MEAN + OMEGA_SD * rng.sample::<f64, _>(StandardNormal);
    let c = C_MEAN + C_SD * rng.sample::<f64, _>(StandardNormal);
    let sigma2 = inverse_gamma(SIGMA2_SHAPE, SIGMA2_SCALE, rng);
    let phi1 = inverse_gamma(PHI_SHAPE, PHI_SCALE, rng);
    let phi2 = inverse_gamma(PHI_SHAPE, PHI_SCALE, rng);
    HyperParams { omega, sigma2, c, phi1, phi2 }
}

/// Prior draws stratified on every margin's quantile scale.
pub fn latin_hypercube_hyperpriors(count: usize, rng: &mut Rng) -> Result<Vec<HyperParams>> {
    let margins = HyperParams::prior_margins();
    let mut columns = Vec::with_capacity(5);
    for m in margins.iter() {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(rng);
        let mut col = Vec::with_capacity(count);
        for s in strata {
            let u = (s as f64 + rng.random::<f64>()) / count as f64;
            col.push(m.quantile(u.clamp(1e-12, 1.0 - 1e-12))?);
        }
        columns.push(col);
    }
    (0..count).map(|i| HyperParams::from_response(&[columns[0][i], columns[1][i], columns[2][i], columns[3][i], columns[4][i]])).collect()
}

pub fn ald_density(x: f64, c: f64, phi1: f64, phi2: f64) -> f64 {
    let k = phi1 * phi2 / (phi1 + phi2);
    if x >= c {
        k * math::exp(-phi1 * (x - c))
    } else {
        k * math::exp(-phi2 * (c - x))
    }
}

/// Asymmetric Laplace draw: left branch with probability `phi1 / (phi1 + phi2)`.
pub fn sample_ald(c: f64, phi1: f64, phi2: f64, rng: &mut Rng) -> f64 {
    if rng.random::<f64>() < phi1 / (phi1 + phi2) {
        c - Exp::new(phi2).expect("positive rate").sample(rng)
    } else {
        c + Exp::new(phi1).expect("positive rate").sample(rng)
    }
}

/// Lognormal `LN(omega, sigma2)` conditioned on exceeding `lower`.
pub fn sample_trunc_lognormal(omega: f64, sigma2: f64, lower: f64, rng: &mut Rng) -> Result<f64> {
    let sd = math::sqrt(sigma2);
    if lower <= 0.0 {
        return Ok(math::exp(omega + sd * rng.sample::<f64, _>(StandardNormal)));
    }
    let a = (math::ln(lower) - omega) / sd;
    let tail = math::norm_cdf(-a);
    if tail <= MIN_TAIL_MASS {
        bail!(
            Sampling,
            "truncated lognormal has tail mass {tail:e} above {lower} (omega = {omega}, sigma2 = {sigma2})"
        );
    }
    let u: f64 = rng.random();
    let upper_tail = (tail * (1.0 - u)).max(f64::MIN_POSITIVE);
    let z = (-math::norm_quantile(upper_tail)).max(a);
    let out = math::exp(omega + sd * z);
    Ok(if out > lower { out } else { f64::from_bits(lower.to_bits() + 1) })
}

/// Initial abundances and interval lengths of the census.
#[derive(Debug, Clone, PartialEq)]
pub struct CensusSetup {
    pub abundance: Vec<u64>,
    pub interval: Vec<f64>,
}

impl CensusSetup {
    pub fn new(abundance: Vec<u64>, interval: Vec<f64>) -> Result<Self> {
        if abundance.len() != interval.len() || abundance.is_empty() {
            bail!(Input, "abundances and intervals must be equally long and non-empty");
        }
        if let Some(t) = interval.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            bail!(Input, "interval length {t} is not positive");
        }
        Ok(Self { abundance, interval })
    }

    /// Log-series abundances at the midpoint quantiles of `DEFAULT_SPECIES` strata
    /// (median `DEFAULT_MEDIAN_ABUNDANCE`) and a fixed interval.
    pub fn default_synthetic() -> Self {
        let theta = log_series_parameter(DEFAULT_MEDIAN_ABUNDANCE);
        let abundance =
            (0..DEFAULT_SPECIES).map(|i| log_series_quantile(theta, (i as f64 + 0.5) / DEFAULT_SPECIES as f64)).collect();
        Self { abundance, interval: vec![DEFAULT_INTERVAL; DEFAULT_SPECIES] }
    }

    pub fn species(&self) -> usize {
        self.abundance.len()
    }
}

fn log_series_cdf(theta: f64, k: u64) -> f64 {
    let norm = -1.0 / math::ln1p(-theta);
    let (mut term, mut sum) = (1.0, 0.0);
    for j in 1..=k {
        term *= theta;
        sum += term / j as f64;
    }
    norm * sum
}

/// Log-series parameter whose CDF crosses one half midway between `median - 1` and `median`.
pub fn log_series_parameter(median: u64) -> f64 {
    let (mut lo, mut hi) = (1e-9, 1.0 - 1e-15);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let mean_cdf = 0.5 * (log_series_cdf(mid, median - 1) + log_series_cdf(mid, median));
        if mean_cdf > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

pub fn sample_log_series(theta: f64, rng: &mut Rng) -> u64 {
    log_series_quantile(theta, rng.random())
}

pub fn log_series_quantile(theta: f64, u: f64) -> u64 {
    let norm = -1.0 / math::ln1p(-theta);
    let (mut k, mut term, mut cdf) = (1u64, theta, norm * theta);
    while cdf < u && k < 10_000_000 {
        k += 1;
        term *= theta * (k - 1) as f64 / k as f64;
        cdf += norm * term;
    }
    k
}

/// One simulated census interval.
#[derive(Debug, Clone, PartialEq)]
pub struct CensusData {
    pub abundance: Vec<u64>,
    pub survivors: Vec<u64>,
    pub recruits: Vec<u64>,
    pub interval: Vec<f64>,
    pub growth: Vec<f64>,
    pub mortality: Vec<f64>,
}

impl CensusData {
    pub fn next_abundance(&self, i: usize) -> u64 {
        self.survivors[i] + self.recruits[i]
    }
}

/// Per-species latent rates drawn from the hierarchy.
pub fn sample_rates(psi: &HyperParams, rng: &mut Rng) -> Result<(f64, f64)> {
    let rho = sample_ald(psi.c, psi.phi1, psi.phi2, rng);
    let mu = sample_trunc_lognormal(psi.omega, psi.sigma2, -rho, rng)?;
    Ok((rho, mu))
}

/// Survivors and recruits of one species given its latent rates.
pub fn sample_counts(n: u64, rho: f64, mu: f64, dt: f64, rng: &mut Rng) -> Result<(u64, u64)> {
    if n == 0 {
        return Ok((0, 0));
    }
    let survival = math::exp(-mu * dt);
    let s = Binomial::new(n, survival).map_err(|e| Error::Sampling(alloc::format!("binomial: {e}")))?.sample(rng);
    let mean = n as f64 * (math::exp(rho * dt) - survival);
    let a = if mean > 0.0 {
        let d = Poisson::new(mean).map_err(|e| Error::Sampling(alloc::format!("poisson mean {mean:e}: {e}")))?;
        d.sample(rng) as u64
    } else {
        0
    };
    Ok((s, a))
}

pub fn simulate_census(psi: &HyperParams, setup: &CensusSetup, rng: &mut Rng) -> Result<CensusData> {
    let i = setup.species();
    let mut data = CensusData {
        abundance: setup.abundance.clone(),
        survivors: Vec::with_capacity(i),
        recruits: Vec::with_capacity(i),
        interval: setup.interval.clone(),
        growth: Vec::with_capacity(i),
        mortality: Vec::with_capacity(i),
    };
    for k in 0..i {
        let (rho, mu) = sample_rates(psi, rng)?;
        let (s, a) = sample_counts(setup.abundance[k], rho, mu, setup.interval[k], rng)?;
        data.survivors.push(s);
        data.recruits.push(a);
        data.growth.push(rho);
        data.mortality.push(mu);
    }
    Ok(data)
}

fn interquartile_range(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    math::quantile_sorted(&v, 0.75) - math::quantile_sorted(&v, 0.25)
}

/// Five summaries: abundance-variance scaling exponent, pooled survival, pooled recruitment rate,
/// and the interquartile ranges of per-species survival and recruitment rates.
pub fn summaries(data: &CensusData) -> Result<[f64; SUMMARY_LEN]> {
    let mut present: Vec<usize> = (0..data.abundance.len()).filter(|&i| data.abundance[i] > 0).collect();
    if present.len() < MIN_SPECIES {
        bail!(Input, "summaries need at least {MIN_SPECIES} species with positive abundance, got {}", present.len());
    }
    present.sort_by_key(|&i| data.abundance[i]);
    let m = present.len();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for b in 0..ABUNDANCE_BINS {
        let bin = &present[b * m / ABUNDANCE_BINS..(b + 1) * m / ABUNDANCE_BINS];
        if bin.len() < 2 {
            continue;
        }
        let mean_n = bin.iter().map(|&i| data.abundance[i] as f64).sum::<f64>() / bin.len() as f64;
        let deltas: Vec<f64> = bin.iter().map(|&i| data.next_abundance(i) as f64 - data.abundance[i] as f64).collect();
        let md = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let var = deltas.iter().map(|d| (d - md) * (d - md)).sum::<f64>() / (deltas.len() - 1) as f64;
        if var > 0.0 {
            xs.push(math::ln(mean_n));
            ys.push(math::ln(var));
        }
    }
    let slope = if xs.len() >= 2 {
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        if sxx > 0.0 {
            sxy / sxx
        } else {
            0.0
        }
    } else {
        0.0
    };
    let total_n: f64 = present.iter().map(|&i| data.abundance[i] as f64).sum();
    let exposure: f64 = present.iter().map(|&i| data.abundance[i] as f64 * data.interval[i]).sum();
    let survival = present.iter().map(|&i| data.survivors[i] as f64).sum::<f64>() / total_n;
    let recruitment = present.iter().map(|&i| data.recruits[i] as f64).sum::<f64>() / exposure;
    let large: Vec<usize> = present.iter().copied().filter(|&i| data.abundance[i] >= RATE_MIN_ABUNDANCE).collect();
    if large.is_empty() {
        bail!(Input, "no species with abundance at least {RATE_MIN_ABUNDANCE}");
    }
    let surv_iqr = interquartile_range(large.iter().map(|&i| data.survivors[i] as f64 / data.abundance[i] as f64).collect());
    let rec_iqr = interquartile_range(
        large.iter().map(|&i| data.recruits[i] as f64 / (data.abundance[i] as f64 * data.interval[i])).collect(),
    );
    Ok([slope, survival, recruitment, surv_iqr, rec_iqr])
}

/// Hyperparameters and summaries of one simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Simulation {
    pub params: HyperParams,
    pub summaries: [f64; SUMMARY_LEN],
    /// Prior draws discarded before this one because their truncation mass vanished.
    pub redraws: u32,
}

/// Simulate from `first`, redrawing from the prior while the truncation mass vanishes.
pub fn simulate_from(first: HyperParams, setup: &CensusSetup, rng: &mut Rng) -> Result<Simulation> {
    let mut params = first;
    for redraws in 0..=MAX_REDRAWS {
        match simulate_census(&params, setup, rng) {
            Ok(data) => return Ok(Simulation { params, summaries: summaries(&data)?, redraws }),
            Err(Error::Sampling(_)) => params = sample_hyperpriors(rng),
            Err(e) => return Err(e),
        }
    }
    bail!(Sampling, "{MAX_REDRAWS} consecutive prior draws could not be simulated")
}

/// Simulation `index` of a training set, on its own RNG stream.
pub fn simulate_one(setup: &CensusSetup, seed: u64, index: u64) -> Result<Simulation> {
    let mut rng = rng::stream(seed, index);
    let first = sample_hyperpriors(&mut rng);
    simulate_from(first, setup, &mut rng)
}

pub fn simulate_training(setup: &CensusSetup, sims: usize, seed: u64) -> Result<Vec<Simulation>> {
    (0..sims as u64).map(|r| simulate_one(setup, seed, r)).collect()
}

/// Copula regression spec of the amortized posterior.
pub fn lfi_model_spec(knots: usize, basis_seed: u64, prior: PriorKind) -> ModelSpec {
    let margins = HyperParams::prior_margins().into_iter().map(MarginSpec::Fixed).collect();
    ModelSpec::new(BasisSpec::thin_plate(knots, basis_seed), prior, margins)
}

/// Fit the amortized posterior on precomputed simulations.
pub fn lfi_fit(sims: &[Simulation], spec: &ModelSpec) -> Result<(FittedModel, FitTrace)> {
    if sims.len() < MIN_TRAINING_SIMS {
        bail!(Precondition, "amortized fit needs at least {MIN_TRAINING_SIMS} simulations, got {}", sims.len());
    }
    let y = DMatrix::from_fn(sims.len(), 5, |i, j| sims[i].params.to_response()[j]);
    let x = DMatrix::from_fn(sims.len(), SUMMARY_LEN, |i, j| sims[i].summaries[j]);
    let names = (1..=SUMMARY_LEN).map(|k| alloc::format!("H{k}")).collect();
    fit_model(&y, &RawCovariates::new(x, names)?, spec)
}

pub fn lfi_train(setup: &CensusSetup, sims: usize, spec: &ModelSpec, seed: u64) -> Result<(FittedModel, FitTrace)> {
    if sims < MIN_TRAINING_SIMS {
        bail!(Precondition, "amortized fit needs at least {MIN_TRAINING_SIMS} simulations, got {sims}");
    }
    lfi_fit(&simulate_training(setup, sims, seed)?, spec)
}

/// Joint posterior draws of the hyperparameters given observed summaries.
pub fn lfi_posterior(model: &FittedModel, observed: &[f64], m: usize, seed: u64) -> Result<Vec<HyperParams>> {
    if observed.len() != SUMMARY_LEN {
        bail!(Input, "observed summaries need {SUMMARY_LEN} entries, got {}", observed.len());
    }
    let batch = model.predictive_sample(observed, m, seed)?;
    (0..m)
        .map(|i| HyperParams::from_response(&batch.samples.row(i).iter().copied().collect::<Vec<_>>()))
        .collect()
}

/// Environmental and demographic variance components and the implied abundance variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemographicVariance {
    pub environmental: f64,
    pub demographic: f64,
    pub variance: f64,
}

pub fn demographic_variance(
    psi: &HyperParams,
    abundance: f64,
    interval: f64,
    draws: usize,
    rng: &mut Rng,
) -> Result<DemographicVariance> {
    if abundance < 0.0 || !(interval > 0.0) || draws < 2 {
        bail!(Input, "need abundance >= 0, interval > 0 and at least two inner draws");
    }
    let (mut sr, mut sr2, mut sm) = (0.0, 0.0, 0.0);
    for _ in 0..draws {
        let (rho, mu) = sample_rates(psi, rng)?;
        sr += rho;
        sr2 += rho * rho;
        sm += mu;
    }
    let k = draws as f64;
    let mean_rho = sr / k;
    let environmental = (sr2 - k * mean_rho * mean_rho) / (k - 1.0);
    let demographic = mean_rho + 2.0 * sm / k;
    Ok(DemographicVariance {
        environmental,
        demographic,
        variance: variance_at(environmental, demographic, abundance, interval),
    })
}

pub fn variance_at(environmental: f64, demographic: f64, abundance: f64, interval: f64) -> f64 {
    let nt = abundance * interval;
    nt * nt * environmental + nt * demographic
}

/// Decomposition for every posterior draw.
pub fn demographic_variance_samples(
    draws: &[HyperParams],
    abundance: f64,
    interval: f64,
    inner: usize,
    seed: u64,
) -> Result<Vec<DemographicVariance>> {
    draws
        .iter()
        .enumerate()
        .map(|(i, psi)| demographic_variance(psi, abundance, interval, inner, &mut rng::stream(seed, i as u64)))
        .collect()
}

/// Per-parameter calibration of the amortized posterior on fresh prior-predictive simulations.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub curves: Vec<CalibrationCurve>,
    pub test_cases: usize,
}

impl CalibrationReport {
    pub fn distances(&self) -> Vec<f64> {
        self.curves.iter().map(|c| c.distance).collect()
    }
}

/// Summaries of test simulations with Latin-hypercube prior draws.
pub fn calibration_cases(setup: &CensusSetup, cases: usize, seed: u64) -> Result<Vec<Simulation>> {
    let mut rng = rng::stream(seed, u64::MAX);
    let params = latin_hypercube_hyperpriors(cases, &mut rng)?;
    params
        .into_iter()
        .enumerate()
        .map(|(i, p)| simulate_from(p, setup, &mut rng::stream(seed, i as u64)))
        .collect()
}

/// Posterior draws on the response scale for each test case, per parameter.
pub fn calibration_draws(model: &FittedModel, cases: &[Simulation], per_case: usize, seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = vec![Vec::with_capacity(cases.len()); 5];
    for (i, case) in cases.iter().enumerate() {
        let batch = model.predictive_sample(&case.summaries, per_case, seed.wrapping_add(i as u64))?;
        for (j, col) in out.iter_mut().enumerate() {
            col.push(batch.samples.column(j).iter().copied().collect());
        }
    }
    Ok(out)
}

pub const CALIBRATION_GRID: usize = 200;

pub fn calibration_report(draws: &[Vec<Vec<f64>>]) -> Result<CalibrationReport> {
    let margins = HyperParams::prior_margins();
    let mut curves = Vec::with_capacity(5);
    for (j, cases) in draws.iter().enumerate() {
        let grid = reference_grid(&margins[j], CALIBRATION_GRID)?;
        curves.push(calibration_curve(cases, &margins[j], &grid)?);
    }
    Ok(CalibrationReport { curves, test_cases: draws.first().map_or(0, |c| c.len()) })
}

pub fn calibrate(model: &FittedModel, setup: &CensusSetup, cases: usize, per_case: usize, seed: u64) -> Result<CalibrationReport> {
    let sims = calibration_cases(setup, cases, seed)?;
    calibration_report(&calibration_draws(model, &sims, per_case, seed)?)
}

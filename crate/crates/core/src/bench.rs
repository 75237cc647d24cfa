//! Scoring rules, k-fold cross-validation and synthetic data.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::basis::{build_design, Basis, BasisSpec, RawCovariates};
use crate::error::{bail, Error, Result};
use crate::linalg;
use crate::margins::{fit_margin, Bounds, Margin};
use crate::math;
use crate::predict::{fit_model, weighted_rows, FittedModel, ModelSpec, PointEstimate, Quadrature};
use crate::rng;

/// Sample CRPS `mean|X - y| - mean|X - X'| / 2` using the sorted form of the second term.
pub fn crps_sample(samples: &[f64], y: f64) -> Result<f64> {
    let m = samples.len();
    if m < 2 {
        bail!(Input, "CRPS needs at least two samples, got {m}");
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let first = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / m as f64;
    let spread: f64 = sorted.iter().enumerate().map(|(i, x)| x * (2.0 * i as f64 + 1.0 - m as f64)).sum();
    Ok(first - spread / (m as f64 * m as f64))
}

/// Negative log of a predictive density value.
pub fn log_score(density: f64) -> Result<f64> {
    if !(density > 0.0) || !density.is_finite() {
        bail!(Score, "predictive density {density} is not positive and finite");
    }
    Ok(-math::ln(density))
}

pub fn rmse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() || predictions.is_empty() {
        bail!(Input, "RMSE needs equally long non-empty vectors");
    }
    let ss: f64 = predictions.iter().zip(truths).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(math::sqrt(ss / predictions.len() as f64))
}

/// Random partition of `0..n` into `folds` nearly equal test sets.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || n < folds {
        bail!(Input, "need 2 <= folds <= n (folds = {folds}, n = {n})");
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let mut out = vec![Vec::new(); folds];
    for (pos, i) in idx.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    for f in out.iter_mut() {
        f.sort_unstable();
    }
    Ok(out)
}

/// Responses and raw covariates of one dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        if y.nrows() != x.nrows() || y.nrows() == 0 {
            bail!(Input, "responses and covariates must have the same positive row count");
        }
        Ok(Self { y, x })
    }

    pub fn rows(&self, idx: &[usize]) -> Dataset {
        Dataset { y: self.y.select_rows(idx.iter()), x: self.x.select_rows(idx.iter()) }
    }
}

/// Common prediction surface of the benchmarked models.
pub trait Predictor {
    fn ln_density(&self, x: &[f64], y: &[f64]) -> Result<f64>;
    fn sample(&self, x: &[f64], m: usize, seed: u64) -> Result<DMatrix<f64>>;
    fn mean(&self, x: &[f64], j: usize, quad: &Quadrature) -> Result<f64>;
}

impl Predictor for FittedModel {
    fn ln_density(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.ln_predictive_density(x, y)
    }

    fn sample(&self, x: &[f64], m: usize, seed: u64) -> Result<DMatrix<f64>> {
        Ok(self.predictive_sample(x, m, seed)?.samples)
    }

    fn mean(&self, x: &[f64], j: usize, quad: &Quadrature) -> Result<f64> {
        Ok(self.marginal_mean_with(x, j, quad)?.mean)
    }
}

/// Gaussian copula with regression margins: ridge means on the design, kernel residual margins.
#[derive(Debug, Clone)]
pub struct NocModel {
    pub basis: Basis,
    /// `q x p` regression coefficients.
    pub coefficients: DMatrix<f64>,
    pub residual_margins: Vec<Margin>,
    pub sigma: DMatrix<f64>,
    sigma_chol: DMatrix<f64>,
}

impl NocModel {
    pub fn fit(data: &Dataset, basis: &BasisSpec, ridge: f64) -> Result<Self> {
        let x = RawCovariates::unnamed(data.x.clone())?;
        let design = build_design(&x, basis)?;
        let coefficients = linalg::ridge(&design.matrix, &data.y, ridge)?;
        let resid = &data.y - &design.matrix * &coefficients;
        let (n, p) = resid.shape();
        let mut residual_margins = Vec::with_capacity(p);
        for j in 0..p {
            let col: Vec<f64> = resid.column(j).iter().copied().collect();
            residual_margins.push(Margin::Tabulated(fit_margin(&col, Bounds::UNBOUNDED)?));
        }
        let z = DMatrix::from_fn(n, p, |i, j| residual_margins[j].to_z(resid[(i, j)]));
        let mut cov = z.transpose() * &z / n as f64;
        let d: Vec<f64> = (0..p).map(|i| 1.0 / math::sqrt(cov[(i, i)])).collect();
        for c in 0..p {
            for r in 0..p {
                cov[(r, c)] *= d[r] * d[c];
            }
            cov[(c, c)] = 1.0;
        }
        let sigma_chol = linalg::cholesky(&cov)?;
        Ok(Self { basis: design.basis, coefficients, residual_margins, sigma: cov, sigma_chol })
    }

    fn location(&self, x: &[f64]) -> Result<DVector<f64>> {
        let row = DVector::from_vec(self.basis.row(x)?);
        Ok(self.coefficients.transpose() * row)
    }
}

impl Predictor for NocModel {
    fn ln_density(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let loc = self.location(x)?;
        let p = loc.len();
        if y.len() != p {
            bail!(Input, "response vector has {} entries, model has {p}", y.len());
        }
        let e: Vec<f64> = (0..p).map(|j| y[j] - loc[j]).collect();
        let z = DVector::from_iterator(p, (0..p).map(|j| self.residual_margins[j].to_z(e[j])));
        let mut out = linalg::mvn_ln_pdf_chol(&z, &DVector::zeros(p), &self.sigma_chol);
        for j in 0..p {
            out += math::ln(self.residual_margins[j].pdf(e[j])) - math::norm_ln_pdf(z[j]);
        }
        Ok(out)
    }

    fn sample(&self, x: &[f64], m: usize, seed: u64) -> Result<DMatrix<f64>> {
        let loc = self.location(x)?;
        let p = loc.len();
        let mut rng = rng::seeded(seed);
        let mut out = DMatrix::zeros(m, p);
        for i in 0..m {
            let w = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = &self.sigma_chol * w;
            for j in 0..p {
                out[(i, j)] = loc[j] + self.residual_margins[j].from_z(z[j]);
            }
        }
        Ok(out)
    }

    fn mean(&self, x: &[f64], j: usize, quad: &Quadrature) -> Result<f64> {
        let loc = self.location(x)?;
        let margin = &self.residual_margins[j];
        Ok(loc[j] + quad.expect(0.0, 1.0, |z| margin.from_z(z)))
    }
}

/// A benchmarked model configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum VariantKind {
    Copula(ModelSpec),
    Noc { basis: BasisSpec, ridge: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelVariant {
    pub name: String,
    pub kind: VariantKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    /// Weights of the scored linear functional `w^T Y`.
    pub weights: Vec<f64>,
    /// Predictive draws per test row for the CRPS.
    pub samples_per_row: usize,
    pub quadrature_order: usize,
}

impl CvConfig {
    pub fn new(p: usize, seed: u64) -> Self {
        Self { folds: 10, seed, weights: vec![1.0 / p as f64; p], samples_per_row: 1000, quadrature_order: 64 }
    }
}

/// Scores of one model on one held-out fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldScore {
    pub model: String,
    pub fold: usize,
    pub rows: usize,
    pub crps: f64,
    pub ls: f64,
    pub rmse: f64,
    /// Failure reason when the fold could not be fitted or scored.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub model: String,
    pub crps: f64,
    pub ls: f64,
    pub rmse: f64,
    pub folds_scored: usize,
    pub folds_failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    pub folds: Vec<FoldScore>,
    pub seed: u64,
}

fn fit_variant(train: &Dataset, variant: &ModelVariant, seed: u64) -> Result<alloc::boxed::Box<dyn Predictor>> {
    Ok(match &variant.kind {
        VariantKind::Copula(spec) => {
            let mut spec = spec.clone();
            spec.fit.seed = seed;
            let x = RawCovariates::unnamed(train.x.clone())?;
            alloc::boxed::Box::new(fit_model(&train.y, &x, &spec)?.0)
        }
        VariantKind::Noc { basis, ridge } => alloc::boxed::Box::new(NocModel::fit(train, basis, *ridge)?),
    })
}

fn score_rows(model: &dyn Predictor, test: &Dataset, cv: &CvConfig, seed: u64) -> Result<(f64, f64, f64)> {
    let quad = Quadrature::new(cv.quadrature_order);
    let p = test.y.ncols();
    let (mut crps, mut ls) = (0.0, 0.0);
    let mut preds = Vec::with_capacity(test.y.nrows());
    let mut truths = Vec::with_capacity(test.y.nrows());
    for i in 0..test.y.nrows() {
        let x: Vec<f64> = test.x.row(i).iter().copied().collect();
        let y: Vec<f64> = test.y.row(i).iter().copied().collect();
        let truth: f64 = cv.weights.iter().zip(&y).map(|(w, v)| w * v).sum();
        ls += log_score(math::exp(model.ln_density(&x, &y)?))?;
        let draws = model.sample(&x, cv.samples_per_row, seed.wrapping_add(i as u64))?;
        crps += crps_sample(&weighted_rows(&draws, &cv.weights), truth)?;
        let mut point = 0.0;
        for j in 0..p {
            point += cv.weights[j] * model.mean(&x, j, &quad)?;
        }
        preds.push(point);
        truths.push(truth);
    }
    let n = test.y.nrows() as f64;
    Ok((crps / n, ls / n, rmse(&preds, &truths)?))
}

/// Fit `variant` on all folds but `fold` and score it on `fold`.
pub fn score_fold(data: &Dataset, variant: &ModelVariant, partition: &[Vec<usize>], fold: usize, cv: &CvConfig) -> FoldScore {
    let test_idx = &partition[fold];
    let train_idx: Vec<usize> =
        partition.iter().enumerate().filter(|(f, _)| *f != fold).flat_map(|(_, v)| v.iter().copied()).collect();
    let seed = cv.seed.wrapping_mul(1_000_003).wrapping_add(fold as u64);
    let result = fit_variant(&data.rows(&train_idx), variant, seed)
        .and_then(|model| score_rows(model.as_ref(), &data.rows(test_idx), cv, seed));
    match result {
        Ok((crps, ls, rmse)) => FoldScore { model: variant.name.clone(), fold, rows: test_idx.len(), crps, ls, rmse, failure: None },
        Err(e) => FoldScore {
            model: variant.name.clone(),
            fold,
            rows: test_idx.len(),
            crps: f64::NAN,
            ls: f64::NAN,
            rmse: f64::NAN,
            failure: Some(e.to_string()),
        },
    }
}

/// Aggregate fold scores (in the given order) into per-model rows weighted by fold size.
pub fn assemble(variants: &[ModelVariant], folds: Vec<FoldScore>, seed: u64) -> ScoreTable {
    let rows = variants
        .iter()
        .map(|v| {
            let mine: Vec<&FoldScore> = folds.iter().filter(|f| f.model == v.name).collect();
            let ok: Vec<&&FoldScore> = mine.iter().filter(|f| f.failure.is_none()).collect();
            let total: f64 = ok.iter().map(|f| f.rows as f64).sum();
            let avg = |g: fn(&FoldScore) -> f64| {
                if total > 0.0 {
                    ok.iter().map(|f| g(f) * f.rows as f64).sum::<f64>() / total
                } else {
                    f64::NAN
                }
            };
            let rmse = if total > 0.0 {
                math::sqrt(ok.iter().map(|f| f.rmse * f.rmse * f.rows as f64).sum::<f64>() / total)
            } else {
                f64::NAN
            };
            ScoreRow {
                model: v.name.clone(),
                crps: avg(|f| f.crps),
                ls: avg(|f| f.ls),
                rmse,
                folds_scored: ok.len(),
                folds_failed: mine.len() - ok.len(),
            }
        })
        .collect();
    ScoreTable { rows, folds, seed }
}

/// Sequential k-fold cross-validation of every variant.
pub fn kfold_cv(data: &Dataset, variants: &[ModelVariant], cv: &CvConfig) -> Result<ScoreTable> {
    if cv.weights.len() != data.y.ncols() {
        bail!(Input, "{} weights for {} responses", cv.weights.len(), data.y.ncols());
    }
    let partition = fold_assignment(data.y.nrows(), cv.folds, cv.seed)?;
    let mut folds = Vec::new();
    for v in variants {
        for f in 0..cv.folds {
            folds.push(score_fold(data, v, &partition, f, cv));
        }
    }
    Ok(assemble(variants, folds, cv.seed))
}

/// Mean structure of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthMean {
    /// The copula model's own law on the spec basis with local scales `xi` (`q x p`); coefficients are drawn from their prior.
    Copula { xi: DMatrix<f64> },
    /// Nonlinear surface `amplitude * h_j(x)` plus correlated noise scaled by `noise`.
    Surface { amplitude: f64, noise: f64 },
}

/// Recipe for a synthetic dataset with standard normal raw covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub covariate_dim: usize,
    pub basis: BasisSpec,
    pub sigma: DMatrix<f64>,
    pub mean: SynthMean,
    pub margins: Vec<Margin>,
    pub seed: u64,
}

/// Generated data plus the generating basis (for copula-law data).
#[derive(Debug, Clone)]
pub struct SynthData {
    pub data: Dataset,
    pub scores: DMatrix<f64>,
    pub truth: Option<(Basis, PointEstimate)>,
}

/// Nonlinear test surface of equation `j`.
pub fn surface(x: &[f64], j: usize) -> f64 {
    let mut v = math::sin(1.5 * x[0] + 0.7 * j as f64);
    if x.len() > 1 {
        v += 0.4 * (x[1] * x[1] - 1.0);
    }
    v
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    let p = spec.sigma.nrows();
    if spec.margins.len() != p || spec.n < 2 || spec.covariate_dim == 0 {
        bail!(Input, "synthetic spec is inconsistent");
    }
    let sigma_chol = linalg::cholesky(&spec.sigma)
        .map_err(|_| Error::Input("synthetic correlation matrix is not positive definite".to_string()))?;
    let mut rng = rng::seeded(spec.seed);
    let x = DMatrix::from_fn(spec.n, spec.covariate_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut z = DMatrix::zeros(spec.n, p);
    let mut truth = None;
    match &spec.mean {
        SynthMean::Copula { xi } => {
            let raw = RawCovariates::unnamed(x.clone())?;
            let design = build_design(&raw, &spec.basis)?;
            let q = design.matrix.ncols();
            if xi.shape() != (q, p) {
                bail!(Input, "local scales must be {q} x {p}");
            }
            let mut beta = DMatrix::zeros(q, p);
            for k in 0..q {
                let w = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                let e = &sigma_chol * w;
                for j in 0..p {
                    beta[(k, j)] = xi[(k, j)] * e[j];
                }
            }
            let point = PointEstimate::from_parts(beta, xi.map(|v| v * v), spec.sigma.clone())?;
            for i in 0..spec.n {
                let row: Vec<f64> = design.matrix.row(i).iter().copied().collect();
                let law = point.score_law(&row);
                let w = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                let draw = &law.mean + law.covariance().cholesky().expect("score covariance is SPD").l() * w;
                z.set_row(i, &draw.transpose());
            }
            truth = Some((design.basis, point));
        }
        SynthMean::Surface { amplitude, noise } => {
            for i in 0..spec.n {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                let w = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                let e = &sigma_chol * w;
                for j in 0..p {
                    z[(i, j)] = amplitude * surface(&xi, j) + noise * e[j];
                }
            }
        }
    }
    let y = DMatrix::from_fn(spec.n, p, |i, j| spec.margins[j].from_z(z[(i, j)]));
    Ok(SynthData { data: Dataset::new(y, x)?, scores: z, truth })
}

/// Copula and NOC variants under their benchmark labels.
pub fn standard_variants(base: &ModelSpec, knots: usize, basis_seed: u64) -> Vec<ModelVariant> {
    use crate::model::PriorKind;
    let p = base.margins.len();
    let mut out = Vec::new();
    let bases = [
        ("", BasisSpec::thin_plate(knots, basis_seed)),
        (".add", BasisSpec::additive(knots.min(10), basis_seed)),
        (".lin", BasisSpec::linear()),
    ];
    for (label, basis) in bases.iter() {
        for (prior_label, prior) in [("prior1", PriorKind::MatrixLog), ("prior2", PriorKind::Factor { factors: p.min(2) })] {
            let mut spec = base.clone();
            spec.basis = basis.clone();
            spec.prior = prior;
            out.push(ModelVariant { name: format!("MVC{label}.{prior_label}"), kind: VariantKind::Copula(spec) });
        }
    }
    out.push(ModelVariant {
        name: "NOC".to_string(),
        kind: VariantKind::Noc { basis: BasisSpec::thin_plate(knots, basis_seed), ridge: 1.0 },
    });
    out
}

//! Fitting pipeline, plug-in predictive distributions and dependence summaries.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::basis::{build_design, Basis, BasisSpec, RawCovariates};
use crate::error::{bail, Result};
use crate::linalg;
use crate::margins::{fit_margin, Bounds, Margin};
use crate::math;
use crate::model::{scale_factor, scale_matrix, CopulaPosterior, Layout, PriorKind};
use crate::rng;
use crate::vi::{self, FitConfig, FitTrace, Noise, VariationalParams};

/// Default Gauss-Hermite order for marginal means.
pub const GAUSS_HERMITE_ORDER: usize = 64;

/// How the margin of one response is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum MarginSpec {
    /// Adaptive kernel estimate on the given support.
    Kernel(Bounds),
    /// Known distribution.
    Fixed(Margin),
}

/// Everything needed to fit a copula regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub basis: BasisSpec,
    pub prior: PriorKind,
    pub fit: FitConfig,
    pub margins: Vec<MarginSpec>,
    pub init: InitConfig,
}

/// Starting point of the variational mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    /// Ridge penalty of the coefficient warm start.
    pub ridge: f64,
    /// Start local scales at `1 / (rms(F_k) sqrt(q))` and ridge-regress `z / s` on the design with
    /// penalty `ridge / xi_k^2` rather than `z` with a flat penalty.
    pub design_scaled: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { ridge: 1.0, design_scaled: true }
    }
}

impl ModelSpec {
    pub fn new(basis: BasisSpec, prior: PriorKind, margins: Vec<MarginSpec>) -> Self {
        Self { basis, prior, fit: FitConfig::default(), margins, init: InitConfig::default() }
    }
}

/// Plug-in point estimate decoded from the variational mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimate {
    /// Coefficients, `q x p`.
    pub beta: DMatrix<f64>,
    /// Prior variances `xi^2`, `q x p`.
    pub xi2: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    sigma_chol: DMatrix<f64>,
}

impl PointEstimate {
    pub fn from_parts(beta: DMatrix<f64>, xi2: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if beta.shape() != xi2.shape() || sigma.nrows() != beta.ncols() || sigma.ncols() != beta.ncols() {
            bail!(Input, "point estimate shapes are inconsistent");
        }
        let sigma_chol = linalg::cholesky(&sigma)?;
        Ok(Self { beta, xi2, sigma, sigma_chol })
    }

    /// Law of the normal scores at design row `row`.
    pub fn score_law(&self, row: &[f64]) -> ScoreLaw {
        score_law_at(self, row)
    }

    /// Spearman correlations of the copula at design row `row`.
    pub fn spearman(&self, row: &[f64]) -> DMatrix<f64> {
        spearman_at(self, row)
    }

    pub fn decode(layout: &Layout, eta: &[f64]) -> Result<Self> {
        let st = layout.decode(eta)?;
        let (p, q) = (layout.responses, layout.columns);
        let mut xi2 = DMatrix::zeros(q, p);
        for (j, h) in st.copula.horseshoe.iter().enumerate() {
            for (k, w) in h.precision_inv().into_iter().enumerate() {
                xi2[(k, j)] = w;
            }
        }
        let sigma = st.copula.correlation.sigma(p)?;
        let sigma_chol = linalg::cholesky(&sigma)?;
        Ok(Self { beta: st.beta, xi2, sigma, sigma_chol })
    }
}

/// A fitted copula regression, immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub layout: Layout,
    pub basis: Basis,
    pub margins: Vec<Margin>,
    pub variational: VariationalParams,
    point: PointEstimate,
}

/// Gaussian law of the normal scores at one covariate value.
#[derive(Debug, Clone)]
pub struct ScoreLaw {
    pub mean: DVector<f64>,
    pub scales: Vec<f64>,
    chol: DMatrix<f64>,
}

impl ScoreLaw {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    pub fn ln_pdf(&self, z: &DVector<f64>) -> f64 {
        linalg::mvn_ln_pdf_chol(z, &self.mean, &self.chol)
    }
}

/// Pseudo mean, score scale and response mean of one margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalMean {
    pub pseudo_mean: f64,
    pub scale: f64,
    pub mean: f64,
}

/// Draws of the response vector at one covariate value.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveBatch {
    /// `m x p` responses.
    pub samples: DMatrix<f64>,
    pub x_new: Vec<f64>,
    pub seed: u64,
}

impl FittedModel {
    pub fn new(layout: Layout, basis: Basis, margins: Vec<Margin>, variational: VariationalParams) -> Result<Self> {
        if margins.len() != layout.responses {
            bail!(Input, "{} margins for {} responses", margins.len(), layout.responses);
        }
        if basis.columns() != layout.columns {
            bail!(Input, "basis has {} columns, layout expects {}", basis.columns(), layout.columns);
        }
        if variational.dim() != layout.dim() {
            bail!(Input, "variational dimension {} does not match layout {}", variational.dim(), layout.dim());
        }
        let point = PointEstimate::decode(&layout, &variational.mu)?;
        Ok(Self { layout, basis, margins, variational, point })
    }

    pub fn point(&self) -> &PointEstimate {
        &self.point
    }

    pub fn responses(&self) -> usize {
        self.layout.responses
    }

    /// Law of the normal scores at `x_new` under the plug-in estimate.
    pub fn score_law(&self, x_new: &[f64]) -> Result<ScoreLaw> {
        let row = self.basis.row(x_new)?;
        Ok(score_law_at(&self.point, &row))
    }

    fn scores(&self, y: &[f64]) -> Result<DVector<f64>> {
        if y.len() != self.responses() {
            bail!(Input, "response vector has {} entries, model has {}", y.len(), self.responses());
        }
        for (j, (&v, m)) in y.iter().zip(&self.margins).enumerate() {
            if !v.is_finite() || !m.support().contains(v) {
                bail!(Input, "response {j} value {v} lies outside its support");
            }
        }
        Ok(DVector::from_iterator(y.len(), y.iter().zip(&self.margins).map(|(&v, m)| m.to_z(v))))
    }

    fn ln_jacobian(&self, y: &[f64], z: &DVector<f64>) -> f64 {
        y.iter()
            .zip(&self.margins)
            .zip(z.iter())
            .map(|((&v, m), &zj)| math::ln(m.pdf(v)) - math::norm_ln_pdf(zj))
            .sum()
    }

    /// Log plug-in predictive density; `-inf` where a marginal density vanishes.
    pub fn ln_predictive_density(&self, x_new: &[f64], y_new: &[f64]) -> Result<f64> {
        let z = self.scores(y_new)?;
        let law = self.score_law(x_new)?;
        Ok(law.ln_pdf(&z) + self.ln_jacobian(y_new, &z))
    }

    pub fn predictive_density(&self, x_new: &[f64], y_new: &[f64]) -> Result<f64> {
        Ok(math::exp(self.ln_predictive_density(x_new, y_new)?))
    }

    /// Predictive density averaged over `draws` variational draws instead of the plug-in point.
    pub fn ln_predictive_density_averaged(&self, x_new: &[f64], y_new: &[f64], draws: usize, seed: u64) -> Result<f64> {
        if draws == 0 {
            bail!(Input, "averaged density needs at least one draw");
        }
        let z = self.scores(y_new)?;
        let row = self.basis.row(x_new)?;
        let mut rng = rng::seeded(seed);
        let mut logs = Vec::with_capacity(draws);
        let (t, m) = self.variational.loadings.shape();
        for _ in 0..draws {
            let noise = Noise::draw(&mut rng, t, m);
            let eta = self.variational.sample_eta(&noise.w1, &noise.w2);
            let point = PointEstimate::decode(&self.layout, &eta)?;
            logs.push(score_law_at(&point, &row).ln_pdf(&z));
        }
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = logs.iter().map(|l| math::exp(l - top)).sum::<f64>() / draws as f64;
        Ok(top + math::ln(mean) + self.ln_jacobian(y_new, &z))
    }

    pub fn predictive_sample(&self, x_new: &[f64], m: usize, seed: u64) -> Result<PredictiveBatch> {
        if m == 0 {
            bail!(Input, "sample count must be positive");
        }
        let law = self.score_law(x_new)?;
        let p = self.responses();
        let mut rng = rng::seeded(seed);
        let mut samples = DMatrix::zeros(m, p);
        let mut w = DVector::zeros(p);
        for i in 0..m {
            for v in w.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let z = &law.mean + &law.chol * &w;
            for j in 0..p {
                samples[(i, j)] = self.margins[j].from_z(z[j]);
            }
        }
        Ok(PredictiveBatch { samples, x_new: x_new.to_vec(), seed })
    }

    pub fn marginal_mean(&self, x_new: &[f64], j: usize) -> Result<MarginalMean> {
        self.marginal_mean_with(x_new, j, &Quadrature::new(GAUSS_HERMITE_ORDER))
    }

    pub fn marginal_mean_with(&self, x_new: &[f64], j: usize, quad: &Quadrature) -> Result<MarginalMean> {
        if j >= self.responses() {
            bail!(Input, "response index {j} out of range");
        }
        let law = self.score_law(x_new)?;
        let (m, s) = (law.mean[j], law.scales[j]);
        let margin = &self.margins[j];
        let mean = quad.expect(m, s, |z| margin.from_z(z));
        Ok(MarginalMean { pseudo_mean: m, scale: s, mean })
    }

    /// Spearman correlation matrix of the predictive copula at `x_ref`.
    pub fn spearman_matrix(&self, x_ref: &[f64]) -> Result<DMatrix<f64>> {
        let row = self.basis.row(x_ref)?;
        Ok(spearman_at(&self.point, &row))
    }

    pub fn linear_functional_sample(&self, x_new: &[f64], weights: &[f64], m: usize, seed: u64) -> Result<Vec<f64>> {
        if weights.len() != self.responses() || weights.iter().any(|w| !w.is_finite()) {
            bail!(Input, "weights must be {} finite values", self.responses());
        }
        let batch = self.predictive_sample(x_new, m, seed)?;
        Ok(weighted_rows(&batch.samples, weights))
    }
}

pub(crate) fn weighted_rows(samples: &DMatrix<f64>, weights: &[f64]) -> Vec<f64> {
    (0..samples.nrows()).map(|i| weights.iter().enumerate().map(|(j, w)| w * samples[(i, j)]).sum()).collect()
}

fn score_law_at(point: &PointEstimate, row: &[f64]) -> ScoreLaw {
    let (q, p) = point.beta.shape();
    let x = DVector::from_column_slice(row);
    let mut scales = Vec::with_capacity(p);
    let mut mean = DVector::zeros(p);
    for j in 0..p {
        let xi2: Vec<f64> = (0..q).map(|k| point.xi2[(k, j)]).collect();
        let s = scale_factor(row, &xi2);
        mean[j] = s * x.dot(&point.beta.column(j));
        scales.push(s);
    }
    let mut chol = point.sigma_chol.clone();
    for r in 0..p {
        for c in 0..p {
            chol[(r, c)] *= scales[r];
        }
    }
    ScoreLaw { mean, scales, chol }
}

fn spearman_at(point: &PointEstimate, row: &[f64]) -> DMatrix<f64> {
    let (q, p) = point.beta.shape();
    let mut v = DMatrix::zeros(p, p);
    for j in 0..p {
        for l in 0..p {
            let cross: f64 =
                (0..q).map(|k| row[k] * row[k] * math::sqrt(point.xi2[(k, j)] * point.xi2[(k, l)])).sum();
            v[(j, l)] = point.sigma[(j, l)] * (1.0 + cross);
        }
    }
    let mut out = DMatrix::identity(p, p);
    for j in 0..p {
        for l in 0..p {
            if j != l {
                let r = v[(j, l)] / math::sqrt(v[(j, j)] * v[(l, l)]);
                out[(j, l)] = spearman_from_pearson(r);
            }
        }
    }
    out
}

/// Spearman correlation of a bivariate Gaussian copula with Pearson correlation `r`.
pub fn spearman_from_pearson(r: f64) -> f64 {
    6.0 / core::f64::consts::PI * math::asin(r / 2.0)
}

/// Gauss-Hermite rule for expectations under a normal law.
#[derive(Debug, Clone)]
pub struct Quadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Quadrature {
    pub fn new(order: usize) -> Self {
        let (nodes, weights) = math::gauss_hermite(order);
        Self { nodes, weights }
    }

    /// `E f(Z)` for `Z ~ N(mean, sd^2)`.
    pub fn expect(&self, mean: f64, sd: f64, f: impl Fn(f64) -> f64) -> f64 {
        let scale = core::f64::consts::SQRT_2 * sd;
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mean + scale * x);
        }
        acc / math::sqrt(core::f64::consts::PI)
    }
}

/// Fit margins, basis and the variational approximation.
pub fn fit_model(y: &DMatrix<f64>, x: &RawCovariates, spec: &ModelSpec) -> Result<(FittedModel, FitTrace)> {
    let (n, p) = y.shape();
    if x.nrows() != n {
        bail!(Input, "{n} response rows but {} covariate rows", x.nrows());
    }
    if spec.margins.len() != p {
        bail!(Input, "{} margin specifications for {p} responses", spec.margins.len());
    }
    let mut margins = Vec::with_capacity(p);
    for (j, ms) in spec.margins.iter().enumerate() {
        let column: Vec<f64> = y.column(j).iter().copied().collect();
        margins.push(match ms {
            MarginSpec::Kernel(bounds) => Margin::Tabulated(fit_margin(&column, *bounds)?),
            MarginSpec::Fixed(m) => {
                if let Some(v) = column.iter().find(|v| !m.support().contains(**v)) {
                    bail!(Input, "response {j} value {v} lies outside the declared margin's support");
                }
                m.clone()
            }
        });
    }
    let z = DMatrix::from_fn(n, p, |i, j| margins[j].to_z(y[(i, j)]));
    let design = build_design(x, &spec.basis)?;
    let posterior = CopulaPosterior::new(z, design.matrix, spec.prior)?;
    let (variational, trace) = fit_posterior(&posterior, &spec.fit, &spec.init)?;
    let model = FittedModel::new(*posterior.layout(), design.basis, margins, variational)?;
    Ok((model, trace))
}

/// Fit the variational approximation to a posterior, in preconditioned coordinates when configured.
pub fn fit_posterior(posterior: &CopulaPosterior, config: &FitConfig, start: &InitConfig) -> Result<(VariationalParams, FitTrace)> {
    let init = initial_params(posterior, config, start)?;
    if !config.precondition {
        return vi::fit(posterior, init, config);
    }
    let scale = optimizer_scale(posterior);
    let target = vi::Rescaled::new(posterior, scale.clone())?;
    let (fitted, trace) = vi::fit(&target, init.rescaled(&scale, true), config)?;
    Ok((fitted.rescaled(&scale, false), trace))
}

/// Per-coordinate scale of the optimizer: `1 / rms(F_k)` for coefficient `k` of every equation, 1 elsewhere.
pub fn optimizer_scale(posterior: &CopulaPosterior) -> Vec<f64> {
    let layout = posterior.layout();
    let f = posterior.design();
    let mut scale = vec![1.0; layout.dim()];
    for k in 0..layout.columns {
        let rms = math::sqrt(f.column(k).iter().map(|v| v * v).sum::<f64>() / f.nrows() as f64);
        if rms > 0.0 {
            for j in 0..layout.responses {
                scale[layout.beta_index(j, k)] = 1.0 / rms;
            }
        }
    }
    scale
}

/// Ridge warm start for the coefficients, zero or design-scaled local scales, zero elsewhere;
/// loadings and `delta` are set in optimizer coordinates.
pub fn initial_params(posterior: &CopulaPosterior, config: &FitConfig, start: &InitConfig) -> Result<VariationalParams> {
    let layout = posterior.layout();
    let mut mu = vec![0.0; layout.dim()];
    let f = posterior.design();
    let (n, q) = f.shape();
    let mut target = posterior.scores().clone();
    if start.design_scaled {
        for k in 0..q {
            let rms = math::sqrt(f.column(k).iter().map(|v| v * v).sum::<f64>() / n as f64);
            let log_xi = if rms > 0.0 { -math::ln(rms * math::sqrt(q as f64)) } else { 0.0 };
            for j in 0..layout.responses {
                mu[layout.log_xi_index(j, k)] = log_xi;
            }
        }
        for j in 0..layout.responses {
            let log_xi = mu[layout.log_xi_index(j, 0)..layout.log_xi_index(j, 0) + q].iter().sum::<f64>() / q as f64;
            mu[layout.log_tau_index(j)] = log_xi;
        }
        let state = layout.decode(&mu)?;
        let s = scale_matrix(f, &state.copula.horseshoe);
        target.component_div_assign(&s);
        let xi: Vec<f64> = (0..q).map(|k| math::exp(mu[layout.log_xi_index(0, k)])).collect();
        let scaled = DMatrix::from_fn(n, q, |i, k| f[(i, k)] * xi[k]);
        let mut beta = linalg::ridge(&scaled, &target, start.ridge)?;
        for k in 0..q {
            beta.row_mut(k).scale_mut(xi[k]);
        }
        mu[layout.beta_range()].copy_from_slice(beta.as_slice());
    } else {
        let beta = linalg::ridge(f, &target, start.ridge)?;
        mu[layout.beta_range()].copy_from_slice(beta.as_slice());
    }
    let mut rng = rng::stream(config.seed, 1);
    let params =
        VariationalParams::initial(mu, config.factors.min(layout.dim()), config.init_loading_sd, config.init_delta, &mut rng)?;
    if !config.precondition {
        return Ok(params);
    }
    let scale = optimizer_scale(posterior);
    let mut out = params.rescaled(&scale, false);
    out.mu = params.mu;
    Ok(out)
}

/// Average of empirical predictive CDFs against a reference distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCurve {
    pub grid: Vec<f64>,
    pub average: Vec<f64>,
    pub reference: Vec<f64>,
    pub distance: f64,
}

/// Minimum number of test cases for a calibration assessment.
pub const MIN_CALIBRATION_CASES: usize = 50;

pub fn calibration_curve(cases: &[Vec<f64>], reference: &Margin, grid: &[f64]) -> Result<CalibrationCurve> {
    if cases.is_empty() {
        bail!(Input, "calibration needs at least one test case");
    }
    if cases.len() < MIN_CALIBRATION_CASES {
        bail!(Precondition, "calibration needs at least {MIN_CALIBRATION_CASES} test cases, got {}", cases.len());
    }
    if grid.is_empty() || cases.iter().any(|c| c.is_empty()) {
        bail!(Input, "calibration grid and every case must be non-empty");
    }
    let sorted: Vec<Vec<f64>> = cases
        .iter()
        .map(|c| {
            let mut s = c.clone();
            s.sort_by(|a, b| a.total_cmp(b));
            s
        })
        .collect();
    let mut average = Vec::with_capacity(grid.len());
    let mut reference_cdf = Vec::with_capacity(grid.len());
    let mut distance: f64 = 0.0;
    for &y in grid {
        let avg = sorted.iter().map(|s| s.partition_point(|&v| v <= y) as f64 / s.len() as f64).sum::<f64>()
            / sorted.len() as f64;
        let r = reference.cdf(y);
        distance = distance.max((avg - r).abs());
        average.push(avg);
        reference_cdf.push(r);
    }
    Ok(CalibrationCurve { grid: grid.to_vec(), average, reference: reference_cdf, distance })
}

/// Sup-distance between the average predictive CDF and the reference CDF.
pub fn calibration_distance(cases: &[Vec<f64>], reference: &Margin, grid: &[f64]) -> Result<f64> {
    Ok(calibration_curve(cases, reference, grid)?.distance)
}

/// Grid of reference quantiles at `points` equally spaced probabilities in `(0, 1)`.
pub fn reference_grid(reference: &Margin, points: usize) -> Result<Vec<f64>> {
    (1..=points).map(|i| reference.quantile(i as f64 / (points + 1) as f64)).collect()
}

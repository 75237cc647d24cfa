//! Factor-Gaussian variational approximation fitted by stochastic gradient ascent.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{bail, Error, Result};
use crate::math;
use crate::model::CopulaPosterior;
use crate::rng::{self, Rng};

/// Consecutive rejected draws tolerated before an iteration fails.
pub const MAX_CONSECUTIVE_REJECTS: usize = 10;

/// Unnormalized log target with gradient.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn log_density(&self, eta: &[f64]) -> Result<f64>;
    fn log_density_and_grad(&self, eta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl LogDensity for CopulaPosterior {
    fn dim(&self) -> usize {
        self.layout().dim()
    }

    fn log_density(&self, eta: &[f64]) -> Result<f64> {
        self.log_h(eta)
    }

    fn log_density_and_grad(&self, eta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.log_h_and_grad(eta)
    }
}

/// `log_norm + log N(eta; mean, precision^{-1})`.
#[derive(Debug, Clone)]
pub struct GaussianLogDensity {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub log_norm: f64,
    log_det_precision: f64,
}

impl GaussianLogDensity {
    pub fn new(mean: DVector<f64>, covariance: &DMatrix<f64>, log_norm: f64) -> Result<Self> {
        let inv = crate::linalg::SpdInverse::new(covariance)?;
        Ok(Self { mean, precision: inv.inverse, log_norm, log_det_precision: -inv.log_det })
    }
}

impl LogDensity for GaussianLogDensity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, eta: &[f64]) -> Result<f64> {
        Ok(self.log_density_and_grad(eta)?.0)
    }

    fn log_density_and_grad(&self, eta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let x = DVector::from_column_slice(eta) - &self.mean;
        let px = &self.precision * &x;
        let t = self.mean.len() as f64;
        let value = self.log_norm - 0.5 * t * math::LN_2PI + 0.5 * self.log_det_precision - 0.5 * x.dot(&px);
        Ok((value, px.iter().map(|v| -v).collect()))
    }
}

/// Mean, lower-triangular factor loadings and diagonal scales of `N(mu, B B^T + diag(delta)^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub mu: Vec<f64>,
    pub loadings: DMatrix<f64>,
    pub delta: Vec<f64>,
}

/// Woodbury pieces for one value of the variational parameters.
#[derive(Debug, Clone)]
pub struct CovarianceFactor {
    inv_d2: Vec<f64>,
    inner: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    log_det: f64,
}

impl CovarianceFactor {
    pub fn new(params: &VariationalParams) -> Result<Self> {
        let (t, m) = params.loadings.shape();
        if params.delta.iter().any(|d| *d == 0.0 || !d.is_finite()) {
            bail!(Numerical, "variational diagonal scale is zero or non-finite");
        }
        let inv_d2: Vec<f64> = params.delta.iter().map(|d| 1.0 / (d * d)).collect();
        let mut scaled = params.loadings.clone();
        for r in 0..t {
            for c in 0..m {
                scaled[(r, c)] *= inv_d2[r];
            }
        }
        let mut inner = params.loadings.transpose() * scaled;
        for i in 0..m {
            inner[(i, i)] += 1.0;
        }
        let Some(chol) = inner.cholesky() else {
            bail!(Numerical, "Woodbury inner system is singular");
        };
        let inner_log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| math::ln(*v)).sum::<f64>();
        let log_det = inner_log_det + params.delta.iter().map(|d| 2.0 * math::ln(d.abs())).sum::<f64>();
        Ok(Self { inv_d2, inner: chol, log_det })
    }

    /// `log det(B B^T + Delta^2)`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `(B B^T + Delta^2)^{-1} r` without forming a `T x T` matrix.
    pub fn solve(&self, loadings: &DMatrix<f64>, r: &[f64]) -> Vec<f64> {
        let dr: DVector<f64> = DVector::from_iterator(r.len(), r.iter().zip(&self.inv_d2).map(|(a, b)| a * b));
        let proj = loadings.transpose() * &dr;
        let inner = self.inner.solve(&proj);
        let back = loadings * inner;
        dr.iter().zip(back.iter()).zip(&self.inv_d2).map(|((a, b), w)| a - w * b).collect()
    }
}

/// Target seen through the fixed diagonal change of variables `eta = scale .* u`.
pub struct Rescaled<'a, D: ?Sized> {
    inner: &'a D,
    scale: Vec<f64>,
}

impl<'a, D: LogDensity + ?Sized> Rescaled<'a, D> {
    pub fn new(inner: &'a D, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != inner.dim() || scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            bail!(Input, "rescaling needs {} positive finite factors", inner.dim());
        }
        Ok(Self { inner, scale })
    }

    fn map(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.scale).map(|(a, s)| a * s).collect()
    }
}

impl<D: LogDensity + ?Sized> LogDensity for Rescaled<'_, D> {
    fn dim(&self) -> usize {
        self.scale.len()
    }

    fn log_density(&self, u: &[f64]) -> Result<f64> {
        self.inner.log_density(&self.map(u))
    }

    fn log_density_and_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (value, grad) = self.inner.log_density_and_grad(&self.map(u))?;
        Ok((value, grad.iter().zip(&self.scale).map(|(g, s)| g * s).collect()))
    }
}

impl VariationalParams {
    /// Image of this Gaussian under `eta = scale .* u`, or its preimage when `inverse` is set.
    pub fn rescaled(&self, scale: &[f64], inverse: bool) -> Self {
        let f = |t: usize| if inverse { 1.0 / scale[t] } else { scale[t] };
        let mut out = self.clone();
        for t in 0..self.dim() {
            out.mu[t] *= f(t);
            out.delta[t] *= f(t);
            for c in 0..self.factors() {
                out.loadings[(t, c)] *= f(t);
            }
        }
        out
    }

    pub fn new(mu: Vec<f64>, loadings: DMatrix<f64>, delta: Vec<f64>) -> Result<Self> {
        let t = mu.len();
        if loadings.nrows() != t || delta.len() != t || loadings.ncols() == 0 {
            bail!(Input, "variational parameter shapes are inconsistent");
        }
        for c in 0..loadings.ncols() {
            for r in 0..c.min(t) {
                if loadings[(r, c)] != 0.0 {
                    bail!(Input, "loading ({r}, {c}) lies in the fixed upper triangle");
                }
            }
        }
        if delta.iter().any(|d| *d == 0.0) {
            bail!(Input, "diagonal scales must be non-zero");
        }
        Ok(Self { mu, loadings, delta })
    }

    /// Starting point: given mean, loadings `N(0, loading_sd^2)` on the free triangle, constant scale.
    pub fn initial(mu: Vec<f64>, factors: usize, loading_sd: f64, delta: f64, rng: &mut Rng) -> Result<Self> {
        let t = mu.len();
        let mut loadings = DMatrix::zeros(t, factors);
        for c in 0..factors {
            for r in c..t {
                let w: f64 = rng.sample(StandardNormal);
                loadings[(r, c)] = loading_sd * w;
            }
        }
        Self::new(mu, loadings, vec![delta; t])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn factors(&self) -> usize {
        self.loadings.ncols()
    }

    /// `mu + B w1 + delta * w2`.
    pub fn sample_eta(&self, w1: &[f64], w2: &[f64]) -> Vec<f64> {
        let bw = &self.loadings * DVector::from_column_slice(w1);
        (0..self.dim()).map(|t| self.mu[t] + bw[t] + self.delta[t] * w2[t]).collect()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mut c = &self.loadings * self.loadings.transpose();
        for (t, d) in self.delta.iter().enumerate() {
            c[(t, t)] += d * d;
        }
        c
    }

    pub fn ln_q(&self, eta: &[f64]) -> Result<f64> {
        let cov = CovarianceFactor::new(self)?;
        let x: Vec<f64> = eta.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        let e = cov.solve(&self.loadings, &x);
        let quad: f64 = x.iter().zip(&e).map(|(a, b)| a * b).sum();
        Ok(-0.5 * (self.dim() as f64 * math::LN_2PI + cov.log_det() + quad))
    }

    fn as_flat(&self) -> Vec<f64> {
        let mut out = self.mu.clone();
        out.extend(self.free_loadings());
        out.extend_from_slice(&self.delta);
        out
    }

    fn free_loadings(&self) -> impl Iterator<Item = f64> + '_ {
        let (t, m) = self.loadings.shape();
        (0..m).flat_map(move |c| (c..t).map(move |r| self.loadings[(r, c)]))
    }

    fn add_flat(&mut self, step: &[f64]) {
        let (t, m) = self.loadings.shape();
        let mut idx = 0;
        for v in self.mu.iter_mut() {
            *v += step[idx];
            idx += 1;
        }
        for c in 0..m {
            for r in c..t {
                self.loadings[(r, c)] += step[idx];
                idx += 1;
            }
        }
        for v in self.delta.iter_mut() {
            *v += step[idx];
            idx += 1;
        }
    }
}

/// `woodbury_apply`: `(B B^T + Delta^2)^{-1} r`.
pub fn woodbury_apply(params: &VariationalParams, r: &[f64]) -> Result<Vec<f64>> {
    if r.len() != params.dim() {
        bail!(Input, "vector length {} does not match dimension {}", r.len(), params.dim());
    }
    Ok(CovarianceFactor::new(params)?.solve(&params.loadings, r))
}

/// Standard normal noise of one reparameterized draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl Noise {
    pub fn draw(rng: &mut Rng, dim: usize, factors: usize) -> Self {
        let w1 = (0..factors).map(|_| rng.sample(StandardNormal)).collect();
        let w2 = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        Self { w1, w2 }
    }
}

/// Gradient of the ELBO with respect to each block of the variational parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    pub mu: Vec<f64>,
    pub loadings: DMatrix<f64>,
    pub delta: Vec<f64>,
}

impl ElboGradient {
    fn zeros(t: usize, m: usize) -> Self {
        Self { mu: vec![0.0; t], loadings: DMatrix::zeros(t, m), delta: vec![0.0; t] }
    }

    fn scale(&mut self, f: f64) {
        self.mu.iter_mut().for_each(|v| *v *= f);
        self.loadings *= f;
        self.delta.iter_mut().for_each(|v| *v *= f);
    }

    fn as_flat(&self) -> Vec<f64> {
        let (t, m) = self.loadings.shape();
        let mut out = self.mu.clone();
        for c in 0..m {
            for r in c..t {
                out.push(self.loadings[(r, c)]);
            }
        }
        out.extend_from_slice(&self.delta);
        out
    }
}

/// Single-draw contribution: gradient estimate and `log h - log q` at the draw.
pub fn draw_gradient<D: LogDensity + ?Sized>(
    target: &D,
    params: &VariationalParams,
    cov: &CovarianceFactor,
    noise: &Noise,
) -> Result<(ElboGradient, f64)> {
    let (t, m) = params.loadings.shape();
    let eta = params.sample_eta(&noise.w1, &noise.w2);
    let (log_h, g) = target.log_density_and_grad(&eta)?;
    if !log_h.is_finite() || g.iter().any(|v| !v.is_finite()) {
        bail!(Numerical, "non-finite target gradient");
    }
    let x: Vec<f64> = eta.iter().zip(&params.mu).map(|(a, b)| a - b).collect();
    let e = cov.solve(&params.loadings, &x);
    let quad: f64 = x.iter().zip(&e).map(|(a, b)| a * b).sum();
    let ln_q = -0.5 * (t as f64 * math::LN_2PI + cov.log_det() + quad);
    let u: Vec<f64> = g.iter().zip(&e).map(|(a, b)| a + b).collect();
    let mut out = ElboGradient::zeros(t, m);
    out.mu.copy_from_slice(&u);
    for c in 0..m {
        for r in c..t {
            out.loadings[(r, c)] = u[r] * noise.w1[c];
        }
    }
    for r in 0..t {
        out.delta[r] = u[r] * noise.w2[r];
    }
    Ok((out, log_h - ln_q))
}

/// Average of [`draw_gradient`] over the supplied draws.
pub fn gradient_from_noise<D: LogDensity + ?Sized>(
    target: &D,
    params: &VariationalParams,
    noise: &[Noise],
) -> Result<ElboGradient> {
    let cov = CovarianceFactor::new(params)?;
    let mut acc = ElboGradient::zeros(params.dim(), params.factors());
    for n in noise {
        let (g, _) = draw_gradient(target, params, &cov, n)?;
        add_into(&mut acc, &g);
    }
    acc.scale(1.0 / noise.len() as f64);
    Ok(acc)
}

fn add_into(acc: &mut ElboGradient, g: &ElboGradient) {
    acc.mu.iter_mut().zip(&g.mu).for_each(|(a, b)| *a += b);
    acc.loadings += &g.loadings;
    acc.delta.iter_mut().zip(&g.delta).for_each(|(a, b)| *a += b);
}

/// Monte Carlo gradient from `draws` fresh draws, resampling rejected ones.
///
/// Returns the gradient, the mean `log h - log q` over accepted draws and the rejection count.
pub fn elbo_gradient<D: LogDensity + ?Sized>(
    target: &D,
    params: &VariationalParams,
    draws: usize,
    rng: &mut Rng,
) -> Result<(ElboGradient, f64, usize)> {
    let cov = CovarianceFactor::new(params)?;
    let (t, m) = params.loadings.shape();
    let mut acc = ElboGradient::zeros(t, m);
    let mut elbo = 0.0;
    let mut rejects = 0;
    for _ in 0..draws {
        let mut consecutive = 0;
        loop {
            let noise = Noise::draw(rng, t, m);
            match draw_gradient(target, params, &cov, &noise) {
                Ok((g, value)) => {
                    add_into(&mut acc, &g);
                    elbo += value;
                    break;
                }
                Err(err) => {
                    rejects += 1;
                    consecutive += 1;
                    if consecutive >= MAX_CONSECUTIVE_REJECTS {
                        return Err(Error::Numerical(alloc::format!(
                            "{MAX_CONSECUTIVE_REJECTS} consecutive draws rejected; last error: {err}"
                        )));
                    }
                }
            }
        }
    }
    acc.scale(1.0 / draws as f64);
    Ok((acc, elbo / draws as f64, rejects))
}

/// Monte Carlo ELBO `mean(log h(eta) - log q(eta))` over the given draws.
pub fn elbo_estimate<D: LogDensity + ?Sized>(
    target: &D,
    params: &VariationalParams,
    noise: &[Noise],
) -> Result<f64> {
    if noise.is_empty() {
        bail!(Input, "ELBO estimate needs at least one draw");
    }
    let cov = CovarianceFactor::new(params)?;
    let mut acc = 0.0;
    for n in noise {
        let eta = params.sample_eta(&n.w1, &n.w2);
        let x: Vec<f64> = eta.iter().zip(&params.mu).map(|(a, b)| a - b).collect();
        let e = cov.solve(&params.loadings, &x);
        let quad: f64 = x.iter().zip(&e).map(|(a, b)| a * b).sum();
        let ln_q = -0.5 * (params.dim() as f64 * math::LN_2PI + cov.log_det() + quad);
        acc += target.log_density(&eta)? - ln_q;
    }
    Ok(acc / noise.len() as f64)
}

/// Early stopping on a stalled smoothed ELBO.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    /// Look-back distance in iterations.
    pub lag: usize,
    /// Minimum relative improvement of the smoothed ELBO over `lag` iterations.
    pub relative_tolerance: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { lag: 1000, relative_tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    /// Draws per gradient estimate.
    pub draws: usize,
    pub factors: usize,
    /// Decay of the running averages of the adaptive step rule.
    pub decay: f64,
    /// Damping added under both square roots of the step rule.
    pub damping: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Window of the moving average reported as the smoothed ELBO.
    pub window: usize,
    pub early_stop: Option<EarlyStop>,
    pub init_loading_sd: f64,
    pub init_delta: f64,
    /// Run the ascent in coordinates where each coefficient is divided by its design column's RMS.
    pub precondition: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            draws: 1,
            factors: 10,
            decay: 0.95,
            damping: 1e-6,
            clip_norm: 1e4,
            seed: 0,
            window: 100,
            early_stop: None,
            init_loading_sd: 0.01,
            init_delta: 0.1,
            precondition: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.draws == 0 || self.factors == 0 || self.window == 0 {
            bail!(Input, "iterations, draws, factors and window must be positive");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) || !(self.damping > 0.0) || !(self.clip_norm > 0.0) {
            bail!(Input, "decay must lie in (0, 1); damping and clip norm must be positive");
        }
        if !(self.init_delta != 0.0) || !(self.init_loading_sd >= 0.0) {
            bail!(Input, "initial scales are invalid");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub elbo: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub rejected_draws: usize,
    pub clipped_steps: usize,
    pub stopped_early: bool,
}

/// Running averages of the adaptive per-coordinate step rule.
#[derive(Debug, Clone)]
struct StepRule {
    decay: f64,
    damping: f64,
    grad_sq: Vec<f64>,
    step_sq: Vec<f64>,
}

impl StepRule {
    fn new(len: usize, decay: f64, damping: f64) -> Self {
        Self { decay, damping, grad_sq: vec![0.0; len], step_sq: vec![0.0; len] }
    }

    fn step(&mut self, grad: &[f64]) -> Vec<f64> {
        let (r, eps) = (self.decay, self.damping);
        grad.iter()
            .enumerate()
            .map(|(i, &g)| {
                self.grad_sq[i] = r * self.grad_sq[i] + (1.0 - r) * g * g;
                let d = math::sqrt(self.step_sq[i] + eps) / math::sqrt(self.grad_sq[i] + eps) * g;
                self.step_sq[i] = r * self.step_sq[i] + (1.0 - r) * d * d;
                d
            })
            .collect()
    }
}

/// Stochastic gradient ascent on the ELBO from `init`.
pub fn fit<D: LogDensity + ?Sized>(
    target: &D,
    init: VariationalParams,
    config: &FitConfig,
) -> Result<(VariationalParams, FitTrace)> {
    config.validate()?;
    if init.dim() != target.dim() {
        bail!(Input, "initial parameters have dimension {}, target {}", init.dim(), target.dim());
    }
    let mut params = init;
    let mut rng = rng::stream(config.seed, 0);
    let flat_len = params.as_flat().len();
    let mut rule = StepRule::new(flat_len, config.decay, config.damping);
    let mut trace = FitTrace {
        elbo: Vec::with_capacity(config.iterations),
        smoothed: Vec::with_capacity(config.iterations),
        rejected_draws: 0,
        clipped_steps: 0,
        stopped_early: false,
    };
    let mut window_sum = 0.0;
    for it in 0..config.iterations {
        let (grad, value, rejects) = elbo_gradient(target, &params, config.draws, &mut rng)?;
        trace.rejected_draws += rejects;
        let mut flat = grad.as_flat();
        let norm = math::sqrt(flat.iter().map(|v| v * v).sum());
        if norm > config.clip_norm {
            let f = config.clip_norm / norm;
            flat.iter_mut().for_each(|v| *v *= f);
            trace.clipped_steps += 1;
        }
        let step = rule.step(&flat);
        params.add_flat(&step);

        window_sum += value;
        if it >= config.window {
            window_sum -= trace.elbo[it - config.window];
        }
        trace.elbo.push(value);
        let smoothed = window_sum / (it + 1).min(config.window) as f64;
        if !smoothed.is_finite() {
            return Err(Error::Numerical(diagnose(&params, it)));
        }
        trace.smoothed.push(smoothed);
        if let Some(stop) = config.early_stop {
            if it >= stop.lag + config.window {
                let before = trace.smoothed[it - stop.lag];
                if (smoothed - before) < stop.relative_tolerance * before.abs() {
                    trace.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok((params, trace))
}

fn diagnose(params: &VariationalParams, it: usize) -> String {
    let bad = params.as_flat().iter().position(|v| !v.is_finite());
    let mu_norm = math::sqrt(params.mu.iter().map(|v| v * v).sum());
    let delta_max = params.delta.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    alloc::format!(
        "smoothed ELBO became non-finite at iteration {it}: |mu| = {mu_norm:e}, max |delta| = {delta_max:e}, first non-finite variational coordinate {bad:?}"
    )
}

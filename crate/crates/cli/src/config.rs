//! TOML run configuration. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use regcopula::basis::{BasisKind, BasisSpec};
use regcopula::bench::{SynthMean, SynthSpec};
use regcopula::margins::{Bounds, Margin};
use regcopula::model::PriorKind;
use regcopula::predict::{InitConfig, MarginSpec, ModelSpec};
use regcopula::vi::{EarlyStop, FitConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: Option<DataConfig>,
    pub basis: Option<BasisConfig>,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub init: InitSection,
    pub margins: Option<Vec<MarginConfig>>,
    pub benchmark: Option<BenchmarkConfig>,
    pub synthetic: Option<SyntheticConfig>,
    pub lfi: Option<LfiConfig>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub responses: Vec<String>,
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisName {
    ThinPlate,
    Additive,
    Linear,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub kind: BasisName,
    pub knots: usize,
    pub seed: u64,
    pub max_degree: Option<u32>,
    pub radial_exponent: Option<i32>,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { kind: BasisName::ThinPlate, knots: 10, seed: 0, max_degree: None, radial_exponent: None }
    }
}

impl BasisConfig {
    pub fn spec(&self) -> BasisSpec {
        let mut spec = match self.kind {
            BasisName::ThinPlate => BasisSpec::thin_plate(self.knots, self.seed),
            BasisName::Additive => BasisSpec::additive(self.knots, self.seed),
            BasisName::Linear => BasisSpec::linear(),
        };
        if let Some(d) = self.max_degree {
            spec.max_degree = d;
        }
        if let Some(m) = self.radial_exponent {
            spec.radial_exponent = m;
        }
        spec
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// 1 for the matrix-logarithm prior, 2 for the factor prior.
    pub kind: u8,
    /// Factor count of prior 2; defaults to `min(p, 2)`.
    pub factors: Option<usize>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { kind: 1, factors: None }
    }
}

impl PriorConfig {
    pub fn kind(&self, p: usize) -> CliResult<PriorKind> {
        match self.kind {
            1 => Ok(PriorKind::MatrixLog),
            2 => Ok(PriorKind::Factor { factors: self.factors.unwrap_or(p.min(2)) }),
            k => Err(CliError::input(format!("prior.kind must be 1 or 2, got {k}"))),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub iterations: Option<usize>,
    pub draws: Option<usize>,
    pub factors: Option<usize>,
    pub decay: Option<f64>,
    pub damping: Option<f64>,
    pub clip_norm: Option<f64>,
    pub window: Option<usize>,
    pub precondition: Option<bool>,
    pub early_stop: Option<EarlyStopConfig>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub lag: usize,
    pub relative_tolerance: f64,
}

impl FitSection {
    pub fn config(&self, seed: u64) -> FitConfig {
        let mut c = FitConfig { seed, ..FitConfig::default() };
        if let Some(v) = self.iterations {
            c.iterations = v;
        }
        if let Some(v) = self.draws {
            c.draws = v;
        }
        if let Some(v) = self.factors {
            c.factors = v;
        }
        if let Some(v) = self.decay {
            c.decay = v;
        }
        if let Some(v) = self.damping {
            c.damping = v;
        }
        if let Some(v) = self.clip_norm {
            c.clip_norm = v;
        }
        if let Some(v) = self.window {
            c.window = v;
        }
        if let Some(v) = self.precondition {
            c.precondition = v;
        }
        if let Some(e) = &self.early_stop {
            c.early_stop = Some(EarlyStop { lag: e.lag, relative_tolerance: e.relative_tolerance });
        }
        c
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    pub ridge: Option<f64>,
    pub design_scaled: Option<bool>,
}

impl InitSection {
    pub fn config(&self) -> InitConfig {
        let d = InitConfig::default();
        InitConfig { ridge: self.ridge.unwrap_or(d.ridge), design_scaled: self.design_scaled.unwrap_or(d.design_scaled) }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarginConfig {
    Kernel { lower: Option<f64>, upper: Option<f64> },
    Normal { mean: f64, sd: f64 },
    LogNormal { meanlog: f64, sdlog: f64 },
    Exponential { rate: f64 },
    Kumaraswamy { a: f64, b: f64 },
}

impl MarginConfig {
    pub fn spec(&self) -> CliResult<MarginSpec> {
        Ok(match *self {
            MarginConfig::Kernel { lower, upper } => MarginSpec::Kernel(Bounds::new(
                lower.unwrap_or(f64::NEG_INFINITY),
                upper.unwrap_or(f64::INFINITY),
            )?),
            _ => MarginSpec::Fixed(self.margin()?),
        })
    }

    /// Known distribution; kernel entries map to none.
    pub fn margin(&self) -> CliResult<Margin> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(CliError::input(format!("margin parameter {name} must be positive, got {v}")))
            }
        };
        Ok(match *self {
            MarginConfig::Kernel { .. } => return Err(CliError::input("kernel margins have no closed form")),
            MarginConfig::Normal { mean, sd } => Margin::normal(mean, sd)?,
            MarginConfig::LogNormal { meanlog, sdlog } => Margin::LogNormal { meanlog, sdlog: positive("sdlog", sdlog)? },
            MarginConfig::Exponential { rate } => Margin::Exponential { rate: positive("rate", rate)? },
            MarginConfig::Kumaraswamy { a, b } => Margin::Kumaraswamy { a: positive("a", a)?, b: positive("b", b)? },
        })
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub folds: Option<usize>,
    pub samples_per_row: Option<usize>,
    pub quadrature_order: Option<usize>,
    /// Weights of the linear functional; equal weights `1/p` by default.
    pub weights: Option<Vec<f64>>,
    /// Keep only these variant names.
    pub variants: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub covariate_dim: usize,
    /// Row-major cross-response correlation matrix.
    pub sigma: Vec<Vec<f64>>,
    pub margins: Vec<MarginConfig>,
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn spec(&self) -> CliResult<SynthSpec> {
        let p = self.sigma.len();
        if p == 0 || self.sigma.iter().any(|r| r.len() != p) {
            return Err(CliError::input("synthetic.sigma must be a square matrix"));
        }
        let flat: Vec<f64> = self.sigma.iter().flatten().copied().collect();
        Ok(SynthSpec {
            n: self.n,
            covariate_dim: self.covariate_dim,
            basis: BasisSpec::linear(),
            sigma: DMatrix::from_row_slice(p, p, &flat),
            mean: SynthMean::Surface { amplitude: self.amplitude, noise: self.noise },
            margins: self.margins.iter().map(|m| m.margin()).collect::<CliResult<_>>()?,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LfiConfig {
    pub sims: Option<usize>,
    /// CSV with `abundance` and `interval` columns; the default synthetic census otherwise.
    pub census_file: Option<PathBuf>,
    /// Previously exported simulations to train on instead of simulating.
    pub simulations_file: Option<PathBuf>,
    pub cases: Option<usize>,
    pub per_case: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::input(format!("config: {e}")))
    }

    /// Load a config and resolve relative paths against its directory.
    pub fn load(path: &Path) -> CliResult<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = cfg.data.as_mut() {
            fix(&mut d.path);
        }
        if let Some(l) = cfg.lfi.as_mut() {
            l.census_file.as_mut().map(fix);
            l.simulations_file.as_mut().map(fix);
        }
        Ok((cfg, text))
    }

    pub fn margin_specs(&self, p: usize) -> CliResult<Vec<MarginSpec>> {
        match &self.margins {
            None => Ok(vec![MarginSpec::Kernel(Bounds::UNBOUNDED); p]),
            Some(m) if m.len() == p => m.iter().map(|c| c.spec()).collect(),
            Some(m) => Err(CliError::input(format!("{} margins configured for {p} responses", m.len()))),
        }
    }

    pub fn basis_or(&self, fallback: BasisConfig) -> BasisConfig {
        self.basis.clone().unwrap_or(fallback)
    }

    pub fn model_spec(&self, p: usize, seed: u64) -> CliResult<ModelSpec> {
        let basis = self.basis_or(BasisConfig::default()).spec();
        let mut spec = ModelSpec::new(basis, self.prior.kind(p)?, self.margin_specs(p)?);
        spec.fit = self.fit.config(seed);
        spec.init = self.init.config();
        spec.fit.validate()?;
        Ok(spec)
    }
}

pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn basis_name(kind: BasisKind) -> BasisName {
    match kind {
        BasisKind::ThinPlate => BasisName::ThinPlate,
        BasisKind::Additive => BasisName::Additive,
        BasisKind::Linear => BasisName::Linear,
    }
}

pub fn basis_kind(name: BasisName) -> BasisKind {
    match name {
        BasisName::ThinPlate => BasisKind::ThinPlate,
        BasisName::Additive => BasisKind::Additive,
        BasisName::Linear => BasisKind::Linear,
    }
}

//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::artifact::Storage;
use crate::commands::{self, Context, Globals, PredictProduct, VarianceRequest};
use crate::error::{CliError, CliResult, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "regcopula", version, about = "Multivariate regression copula fitting, prediction, benchmarking and likelihood-free inference")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of every random stream; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for folds and simulations (all cores by default).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file; stdout for tabular output when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct StorageArgs {
    /// Store arrays in a `.bin` file next to the JSON instead of inline base64.
    #[arg(long)]
    pub sidecar: bool,
}

impl StorageArgs {
    fn storage(&self) -> Storage {
        if self.sidecar {
            Storage::Sidecar
        } else {
            Storage::Inline
        }
    }
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ProductArgs {
    /// Joint predictive draws per covariate row.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Spearman correlation matrix of the predictive copula.
    #[arg(long)]
    pub spearman: bool,
    /// Marginal predictive means.
    #[arg(long)]
    pub mean: bool,
    /// Marginal predictive densities on this many points per response.
    #[arg(long)]
    pub density_grid: Option<usize>,
    /// Log predictive density of each row of this CSV (responses and covariates by name).
    #[arg(long)]
    pub density: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a copula regression to the CSV named in the config.
    Fit(StorageArgs),
    /// Predict from a model artifact.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV with the model's covariate columns.
        #[arg(long, conflicts_with = "at")]
        x: Option<PathBuf>,
        /// One covariate vector, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        at: Option<String>,
        #[command(flatten)]
        product: ProductArgs,
    },
    /// K-fold cross-validated scores of the standard model variants.
    Benchmark,
    /// Simulate census summaries from the hyperprior.
    Simulate,
    /// Fit the amortized posterior on simulated summaries.
    LfiTrain(StorageArgs),
    /// Posterior draws of the hyperparameters given observed summaries.
    LfiPosterior {
        #[arg(long)]
        model: PathBuf,
        /// Observed summaries H1..H5, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        at: String,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        /// Append the variance decomposition at this initial abundance.
        #[arg(long)]
        abundance: Option<f64>,
        #[arg(long, default_value_t = regcopula::lfi::DEFAULT_INTERVAL)]
        interval: f64,
        /// Decompose once at the posterior mean instead of per draw.
        #[arg(long, requires = "abundance")]
        plug_in: bool,
    },
    /// Calibration of an amortized posterior on fresh prior-predictive simulations.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
    },
}

fn product(p: &ProductArgs) -> PredictProduct {
    if let Some(m) = p.samples {
        PredictProduct::Samples(m)
    } else if p.spearman {
        PredictProduct::Spearman
    } else if p.mean {
        PredictProduct::Mean
    } else if let Some(n) = p.density_grid {
        PredictProduct::DensityGrid(n)
    } else {
        PredictProduct::Density(p.density.clone().expect("clap enforces one product"))
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::input(format!("--threads: {e}")))?;
    }
    let globals = Globals { config: cli.config.clone(), seed: cli.seed, out: cli.out.clone() };
    let ctx = Context::new(&globals)?;
    match &cli.command {
        Command::Fit(s) => commands::fit(&ctx, s.storage()),
        Command::Predict { model, x, at, product: p } => {
            commands::predict(&ctx, model, x.as_deref(), at.as_deref(), &product(p))
        }
        Command::Benchmark => commands::benchmark(&ctx),
        Command::Simulate => commands::simulate(&ctx),
        Command::LfiTrain(s) => commands::lfi_train(&ctx, s.storage()),
        Command::LfiPosterior { model, at, draws, abundance, interval, plug_in } => {
            let variance = abundance.map(|a| VarianceRequest { abundance: a, interval: *interval, plug_in: *plug_in });
            commands::lfi_posterior(&ctx, model, at, *draws, variance)
        }
        Command::Calibrate { model } => commands::calibrate(&ctx, model),
    }
}

/// Parse arguments, run, and map the outcome to the exit-code contract.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

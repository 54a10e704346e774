//! `rmix`: simulate data, fit robust mixture-error models, and summarize runs.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when a chain
//! diverged (outputs of the surviving chains are still written).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rmix_core::dists::ErrorKind;
use rmix_core::mixture::Variant;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "rmix", version, about = "Robust Gaussian / Student-t mixture errors for hierarchical and O-U models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a data set and write it with its provenance.
    Simulate(SimulateArgs),
    /// Fit one error variant to a data file.
    Fit(FitArgs),
    /// Autocorrelation and effective sample size of fitted chains.
    Diagnose(DiagnoseArgs),
    /// Join fit outputs into one comparison table.
    Report(ReportArgs),
    /// Fit the Student-t model and the mixture under a grid of Beta priors.
    Sensitivity(SensitivityArgs),
    /// Run a JSON experiment spec end to end.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Toy,
    Hier,
    Ou,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Gaussian,
    T,
    Nn,
    Nt,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Gaussian => Variant::Gaussian,
            VariantArg::T => Variant::StudentT,
            VariantArg::Nn => Variant::GaussianMixture,
            VariantArg::Nt => Variant::ProposedMixture,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ErrorArg {
    Gaussian,
    T4,
}

impl From<ErrorArg> for ErrorKind {
    fn from(e: ErrorArg) -> Self {
        match e {
            ErrorArg::Gaussian => ErrorKind::Gaussian,
            ErrorArg::T4 => ErrorKind::T4,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ChainArgs {
    /// Iterations per chain, burn-in included.
    #[arg(long, default_value_t = 100_000)]
    iters: usize,
    #[arg(long, default_value_t = 10_000)]
    burn_in: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    /// Seed for every random draw; there is no clock-based default.
    #[arg(long)]
    seed: u64,
    /// Beta-prior strength on theta; defaults to the number of observations.
    #[arg(long)]
    k: Option<f64>,
    /// Beta-prior mean of theta.
    #[arg(long, default_value_t = 0.01)]
    m: f64,
    /// Indicator mean above which an observation is flagged as an outlier.
    #[arg(long, default_value_t = 0.3)]
    outlier_threshold: f64,
    /// Record wall-clock times (written to a separate timing file).
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    model: ModelKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Template: hierarchical CSV (its V column) or light curve `t,y,sd`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ErrorArg::Gaussian)]
    errors: ErrorArg,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    #[arg(long = "A", default_value_t = 0.722)]
    a: f64,
    /// Outliers as `row:multiple` pairs, 1-based, e.g. `1:4,2:-5,3:6`.
    #[arg(long)]
    outliers: Option<String>,
    #[arg(long, default_value_t = 17.667)]
    mu: f64,
    #[arg(long, default_value_t = 0.018 * 0.018)]
    sigma2: f64,
    #[arg(long, default_value_t = 284.066)]
    tau: f64,
    /// 1-based template rows whose values are kept as outliers.
    #[arg(long, value_delimiter = ',')]
    outlier_rows: Option<Vec<usize>>,
    /// Candidate curves drawn when copying template outliers.
    #[arg(long, default_value_t = 10_000)]
    repeats: usize,
    /// Toy sample size.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Replace the last toy observation by this value.
    #[arg(long)]
    outlier_value: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long, value_enum)]
    model: ModelKind,
    #[arg(long, value_enum)]
    variant: VariantArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    chain: ChainArgs,
    /// Generative values for bias and MSE, e.g. `beta=0,log_A=-0.3257`.
    #[arg(long)]
    truth: Option<String>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    /// Output directory of a `fit` run.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    max_lag: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Output directories of `fit` runs.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Variant whose MSE is the numerator of every ratio.
    #[arg(long, value_enum, default_value_t = VariantArg::Nt)]
    reference: VariantArg,
}

#[derive(Args, Debug)]
struct SensitivityArgs {
    #[arg(long, value_enum)]
    model: ModelKind,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    chain: ChainArgs,
    /// Beta priors as `k:m` entries where k may be `n` or `n/5`, or `uniform`.
    #[arg(long)]
    priors: Option<String>,
    #[arg(long)]
    truth: Option<String>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// JSON experiment spec; it must contain a seed.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    timing: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Report(a) => commands::report(a),
        Command::Sensitivity(a) => commands::sensitivity(a),
        Command::Experiment(a) => commands::experiment(a),
    };
    match result {
        Ok(commands::Outcome::Done) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Diverged(n)) => {
            eprintln!("rmix: {n} chain(s) diverged; see the manifest for details");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("rmix: {e}");
            ExitCode::from(1)
        }
    }
}

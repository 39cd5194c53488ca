//! `wda`: balancing demos, fitting, projection, evaluation and scaling
//! benchmarks from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wda_core::data::LabelColumn;
use wda_core::eval::ScalingAxis;
use wda_core::wda::Initialization;

mod commands;
mod error;
mod output;

#[derive(Parser, Debug)]
#[command(name = "wda", version, about = "Wasserstein discriminant analysis")]
pub struct Cli {
    /// Worker threads; computations currently run on one thread
    #[arg(long, global = true, env = "WDA_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Balance a kernel matrix with SK or Acc-SK and report convergence
    Balance(BalanceArgs),
    /// Fit a projection and write it with its convergence trace
    Fit(FitArgs),
    /// Project a dataset with a fitted projection
    Transform(TransformArgs),
    /// Repeated-holdout KNN error of fitted projections
    Eval(EvalArgs),
    /// Time fits along one parameter axis
    Bench(BenchArgs),
    /// Solve a single trace-ratio problem max tr(PᵀAP)/tr(PᵀBP)
    Tropt(TroptArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Builtin {
    K1,
    K2,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algorithm {
    Sk,
    Accsk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Random,
    Pca,
    Lda,
}

impl From<InitArg> for Initialization {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Random => Initialization::Random,
            InitArg::Pca => Initialization::Pca,
            InitArg::Lda => Initialization::Lda,
        }
    }
}

fn parse_label_column(s: &str) -> Result<LabelColumn, String> {
    match s {
        "first" => Ok(LabelColumn::First),
        "last" => Ok(LabelColumn::Last),
        _ => s
            .parse::<usize>()
            .map(LabelColumn::Index)
            .map_err(|_| format!("expected `first`, `last` or a zero-based column index, got {s:?}")),
    }
}

fn parse_axis(s: &str) -> Result<ScalingAxis, String> {
    s.parse().map_err(|e: wda_core::WdaError| e.to_string())
}

#[derive(Args, Debug)]
pub struct BalanceArgs {
    /// Kernel CSV (numeric matrix, no header)
    #[arg(long, conflicts_with = "builtin", required_unless_present = "builtin")]
    pub kernel: Option<PathBuf>,
    /// Built-in kernel
    #[arg(long, value_enum)]
    pub builtin: Option<Builtin>,
    /// Small corner entry of the k1/k2 kernels
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    /// Side length of the uniform kernel
    #[arg(long, default_value_t = 4)]
    pub size: usize,
    /// Balancing algorithm
    #[arg(long, value_enum, default_value_t = Algorithm::Accsk)]
    pub alg: Algorithm,
    /// Stopping tolerance on iterate distance and marginals
    #[arg(long)]
    pub tol: Option<f64>,
    /// Iteration cap
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// JSON file with a `balancing` section
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Include the transport plan in the report
    #[arg(long)]
    pub plan: bool,
    /// Report path (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Labeled CSV: numeric features plus one label column
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub data: Option<PathBuf>,
    /// Use the built-in three-class synthetic generator
    #[arg(long)]
    pub synthetic: bool,
    /// Label column: `first`, `last` or a zero-based index
    #[arg(long, value_parser = parse_label_column, default_value = "last")]
    pub label_column: LabelColumn,
    /// Synthetic feature dimension
    #[arg(long = "d", default_value_t = 10)]
    pub dim: usize,
    /// Synthetic class sizes
    #[arg(long, value_delimiter = ',', default_values_t = [30, 40, 30])]
    pub counts: Vec<usize>,
    /// Synthetic generator seed
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// JSON file with `wda`, `split` and `balancing` sections
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Entropic regularization strength (0 gives LDA)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Subspace dimension
    #[arg(long = "p")]
    pub p: Option<usize>,
    /// Outer stopping tolerance (radians)
    #[arg(long)]
    pub tol: Option<f64>,
    /// Outer iteration cap
    #[arg(long)]
    pub max_outer_iter: Option<usize>,
    /// Seed for random initialization
    #[arg(long, env = "WDA_SEED")]
    pub seed: Option<u64>,
    /// Add the identity ridge (epsilon = 1) to the within-class matrix
    #[arg(long)]
    pub ridge: bool,
    /// Starting projection
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Fit on the data as given, without standardizing
    #[arg(long)]
    pub no_standardize: bool,
    /// Projection file to write
    #[arg(long)]
    pub out: PathBuf,
    /// Report path (default: `<out>.trace.json`)
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TransformArgs {
    /// Projection file written by `fit`
    #[arg(long)]
    pub projection: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Fit report whose standardization statistics are applied to the data
    #[arg(long, conflicts_with = "no_standardize")]
    pub fit_report: Option<PathBuf>,
    /// Project the data as given
    #[arg(long)]
    pub no_standardize: bool,
    /// Output CSV (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Neighbors used by the KNN classifier
    #[arg(short = 'K', long = "K", default_value_t = 10)]
    pub k: usize,
    /// Random train/test splits
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    /// Per-class share of points used for training
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Seed of the first split
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Report path (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Parameter to vary: `p`, `d` or `n`
    #[arg(long, value_parser = parse_axis)]
    pub axis: ScalingAxis,
    /// Strictly increasing values along the axis
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Feature dimension on the p and n axes
    #[arg(long = "d", default_value_t = 10)]
    pub dim: usize,
    /// Class sizes on the p and d axes
    #[arg(long, value_delimiter = ',', default_values_t = [30, 40, 30])]
    pub counts: Vec<usize>,
    /// Synthetic generator seed
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Timed fits per grid value
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Ridge epsilon (default: 1 on the d axis, 0 otherwise)
    #[arg(long, conflicts_with = "ridge")]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Report path (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TroptArgs {
    /// Symmetric numerator matrix (CSV)
    #[arg(long = "a")]
    pub a: PathBuf,
    /// Symmetric positive definite denominator matrix (CSV)
    #[arg(long = "b")]
    pub b: PathBuf,
    /// Subspace dimension
    #[arg(long = "p")]
    pub p: usize,
    /// Stopping tolerance on the subspace step (radians)
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Iteration cap
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    /// Starting projection file (default: seeded random)
    #[arg(long)]
    pub p0: Option<PathBuf>,
    /// Seed of the random start
    #[arg(long, env = "WDA_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Write the optimal projection here
    #[arg(long)]
    pub projection: Option<PathBuf>,
    /// Report path (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

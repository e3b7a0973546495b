use std::path::PathBuf;

use cam_core::kde::KernelFamily;
use cam_core::simlab::{AdjustmentChoice, BandwidthRule, Model, UTarget};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cam", version, about = "Correlation-assisted estimators for data with missing features")]
pub struct Cli {
    /// Worker threads for parallel sections; 0 uses every core.
    #[arg(long, global = true, env = "CAM_THREADS", default_value_t = 1)]
    pub threads: usize,

    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true, env = "CAM_OUT")]
    pub out: Option<PathBuf>,

    /// Also write plot-ready CSV (grids, fitted values, per-replication metrics).
    #[arg(long, global = true, env = "CAM_EMIT_CSV")]
    pub emit_csv: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// CAM estimate of a mean with a confidence interval.
    EstimateMean(EstimateMeanArgs),
    /// CAM estimate of a covariance with a confidence interval.
    EstimateCov(EstimateCovArgs),
    /// CAM kernel density estimate at points or on a grid.
    Density(DensityArgs),
    /// CAM local-constant regression at points.
    Regress(RegressArgs),
    /// Replicated experiment on a synthetic model.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Headered CSV file.
    #[arg(long)]
    pub input: PathBuf,

    /// Response column (always observed).
    #[arg(long, env = "CAM_RESPONSE")]
    pub response: String,

    /// Feature columns in order; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,

    /// Missing-value marker; repeat for several. Defaults to "NA" and the empty field.
    #[arg(long = "na")]
    pub na: Vec<String>,
}

#[derive(Args, Debug)]
pub struct PatternArgs {
    /// Smallest pattern group used for adjustment.
    #[arg(long, env = "CAM_MIN_COUNT", default_value_t = cam_core::simlab::DEFAULT_MIN_COUNT)]
    pub min_count: usize,

    /// Let each pattern borrow rows that observe a superset of its features.
    #[arg(long)]
    pub integrate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Phi {
    /// Replace missing variables by the response.
    Practical,
    /// Least-squares surrogate fitted on the complete cases.
    Linear,
}

#[derive(Args, Debug)]
pub struct UStatArgs {
    #[command(flatten)]
    pub patterns: PatternArgs,

    /// Adjustment kernel.
    #[arg(long, value_enum, default_value_t = Phi::Practical)]
    pub phi: Phi,

    /// Two-sided interval level (0.05 gives a 95% interval).
    #[arg(long, env = "CAM_LEVEL", default_value_t = 0.05)]
    pub level: f64,

    /// Subsets sampled per geometry entry when enumeration is too large.
    #[arg(long, env = "CAM_GEOMETRY_BUDGET", default_value_t = cam_core::ustat::DEFAULT_GEOMETRY_BUDGET)]
    pub geometry_budget: u64,

    /// Subsets sampled per point estimate when enumeration is too large.
    #[arg(long, env = "CAM_POINT_BUDGET", default_value_t = cam_core::ustat::DEFAULT_POINT_BUDGET)]
    pub point_budget: u64,

    #[arg(long, env = "CAM_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EstimateMeanArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Feature whose mean is estimated, by 1-based position or name; the response when absent.
    #[arg(long)]
    pub feature: Option<String>,

    #[command(flatten)]
    pub ustat: UStatArgs,
}

#[derive(Args, Debug)]
pub struct EstimateCovArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// First variable: 1-based feature position, feature name, or "y".
    #[arg(long)]
    pub first: String,

    /// Second variable: 1-based feature position, feature name, or "y".
    #[arg(long, default_value = "y")]
    pub second: String,

    #[command(flatten)]
    pub ustat: UStatArgs,
}

#[derive(Args, Debug)]
pub struct PointArgs {
    /// Query point as comma-separated coordinates; repeat for several.
    #[arg(long, allow_hyphen_values = true)]
    pub at: Vec<String>,

    /// Headered CSV of query points.
    #[arg(long, conflicts_with = "at")]
    pub points: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DensityArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub patterns: PatternArgs,

    #[command(flatten)]
    pub query: PointArgs,

    /// Grid points per axis when no query points are given.
    #[arg(long, default_value_t = 50)]
    pub grid: usize,

    /// Grid padding around the data, in bandwidths.
    #[arg(long, default_value_t = 3.0)]
    pub pad: f64,

    /// "lscv", "rot" (normal reference) or a fixed positive bandwidth.
    #[arg(long, env = "CAM_BANDWIDTH", default_value = "lscv")]
    pub bandwidth: BandwidthRule,

    #[arg(long, env = "CAM_KERNEL", default_value = "gaussian")]
    pub kernel: KernelFamily,
}

#[derive(Args, Debug)]
pub struct RegressArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub patterns: PatternArgs,

    /// Query points; the complete rows are used when none are given.
    #[command(flatten)]
    pub query: PointArgs,

    /// Fixed bandwidth; otherwise chosen by leave-one-out cross-validation.
    #[arg(long)]
    pub h: Option<f64>,

    /// Cross-validation candidates as multiples of the normal-reference bandwidth.
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.35, 0.5, 0.7, 1.0, 1.4, 2.0])]
    pub h_factors: Vec<f64>,

    #[arg(long, env = "CAM_KERNEL", default_value = "gaussian")]
    pub kernel: KernelFamily,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// toy, example1, example2, density1-3 or regression1-3.
    #[arg(long)]
    pub model: Model,

    /// Sample size (rows per arm for the toy model).
    #[arg(long, default_value_t = 1000)]
    pub n: usize,

    /// Probability that the first feature is missing.
    #[arg(long, default_value_t = 0.5)]
    pub p1: f64,

    #[arg(long, env = "CAM_REPS", default_value_t = 200)]
    pub reps: usize,

    #[arg(long, env = "CAM_SEED", default_value_t = 0)]
    pub seed: u64,

    /// U-statistic target for the exponential-normal model: mean or cov.
    #[arg(long)]
    pub target: Option<UTarget>,

    /// Adjustment kernel for U-statistic targets: practical, linear or oracle.
    #[arg(long, default_value = "practical")]
    pub choice: AdjustmentChoice,

    #[arg(long, env = "CAM_MIN_COUNT", default_value_t = cam_core::simlab::DEFAULT_MIN_COUNT)]
    pub min_count: usize,

    #[arg(long, env = "CAM_LEVEL", default_value_t = 0.05)]
    pub level: f64,

    /// Density bandwidth: "lscv", "rot" or a fixed value.
    #[arg(long, env = "CAM_BANDWIDTH", default_value = "lscv")]
    pub bandwidth: BandwidthRule,

    #[arg(long, env = "CAM_KERNEL", default_value = "gaussian")]
    pub kernel: KernelFamily,

    /// Monte Carlo draws per integrated squared error.
    #[arg(long, default_value_t = 10_000)]
    pub n_mc: usize,
}

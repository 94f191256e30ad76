//! Command-line flags.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "pivdml", version, about = "Panel IV double machine learning with weak-instrument diagnostics")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the treatment effect on a long-format panel.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo preset.
    Simulate(SimulateArgs),
    /// Grid-search learner hyperparameters for one nuisance target.
    Tune(TuneArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LearnerName {
    Lasso,
    Boosting,
    Mlp,
    Linear,
}

impl LearnerName {
    pub fn as_str(&self) -> &'static str {
        match self {
            LearnerName::Lasso => "lasso",
            LearnerName::Boosting => "boosting",
            LearnerName::Mlp => "mlp",
            LearnerName::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatName {
    Table,
    Kv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Strong,
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    /// Outcome difference.
    L,
    /// Treatment difference.
    R,
    /// Instrument difference.
    M,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub unit: Option<String>,
    #[arg(long)]
    pub time: Option<String>,
    #[arg(long)]
    pub y: Option<String>,
    #[arg(long)]
    pub d: Option<String>,
    /// Instrument column; repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    pub z: Vec<String>,
    /// Covariate column; repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    pub x: Vec<String>,
    /// Cluster column (default: the unit column).
    #[arg(long)]
    pub cluster: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct OutputArgs {
    /// Base seed; falls back to PIVDML_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output file (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatName>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Cross-fitting folds (K ≥ 2).
    #[arg(long)]
    pub folds: Option<usize>,
    /// Learner for all three nuisance functions.
    #[arg(long, value_enum)]
    pub learner: Option<LearnerName>,
    /// Tune boosting or MLP hyperparameters inside each fold.
    #[arg(long)]
    pub tune: bool,
    /// Confidence level of the Anderson–Rubin set.
    #[arg(long)]
    pub level: Option<f64>,
    /// Null value for the Anderson–Rubin test.
    #[arg(long)]
    pub theta0: Option<f64>,
    /// Also report 2SLS on the differenced data with linear controls.
    #[arg(long)]
    pub compare_2sls: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Number of units.
    #[arg(long, short = 'n')]
    pub n: Option<usize>,
    #[arg(long)]
    pub periods: Option<usize>,
    #[arg(long, short = 'r')]
    pub replications: Option<usize>,
    /// Estimators, comma separated: 2sls, 2sls-x, dml-lasso, dml-boosting, dml-mlp, dml-linear.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Vec<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub tune: bool,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub theta0: Option<f64>,
    /// Also write the table as CSV to this path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub target: Option<Target>,
    /// Instrument column for target m (default: the first).
    #[arg(long)]
    pub instrument: Option<String>,
    #[arg(long, value_enum)]
    pub learner: Option<LearnerName>,
    /// Distinct draws per hyperparameter.
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Candidates evaluated from the shuffled grid.
    #[arg(long)]
    pub evaluations: Option<usize>,
    #[arg(long)]
    pub cv_folds: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

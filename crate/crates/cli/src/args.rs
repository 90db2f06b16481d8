//! Command-line surface. Every flag also reads a `WIT_`-prefixed environment variable.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wit_core::{BuiltinCase, ColumnRef, Method, PenaltyKind};

#[derive(Debug, Parser)]
#[command(
    name = "wit",
    version,
    about = "WIT estimator for IV models with weak and invalid instruments"
)]
pub struct Cli {
    /// TOML file with defaults for any flag; flags and environment variables win.
    #[arg(long, global = true, env = "WIT_CONFIG")]
    pub config: Option<PathBuf>,

    /// Print progress and diagnostics to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select valid instruments and estimate the treatment effect on a CSV file.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study and write the metrics table.
    Simulate(SimulateArgs),
    /// List the observationally equivalent models for a set of true coefficients.
    #[command(name = "enumerate-dgps")]
    EnumerateDgps(EnumerateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

fn penalty_kind(s: &str) -> Result<PenaltyKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "mcp" => Ok(PenaltyKind::Mcp),
        "scad" => Ok(PenaltyKind::Scad),
        "lasso" => Ok(PenaltyKind::Lasso),
        other => Err(format!(
            "unknown penalty '{other}' (expected mcp, scad or lasso)"
        )),
    }
}

/// Penalty and tuning overrides shared by `estimate` and `simulate`.
#[derive(Debug, Clone, Default, Args)]
pub struct TuningArgs {
    /// Penalty family: mcp, scad or lasso.
    #[arg(long, env = "WIT_PENALTY", value_parser = penalty_kind)]
    pub penalty: Option<PenaltyKind>,

    /// MCP concavity parameter (must exceed 1).
    #[arg(long, env = "WIT_RHO")]
    pub rho: Option<f64>,

    /// SCAD shape parameter (must exceed 2).
    #[arg(long, env = "WIT_A")]
    pub a: Option<f64>,

    /// Multiplies every value of the default lambda grid.
    #[arg(long, env = "WIT_GRID_SCALE")]
    pub grid_scale: Option<f64>,

    /// MCD test size; the default shrinks with n.
    #[arg(long, env = "WIT_SIZE")]
    pub size: Option<f64>,

    /// Fuzzy clustering level for the starting points.
    #[arg(long, env = "WIT_LAMBDA_BAR")]
    pub lambda_bar: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    /// CSV file with a header row.
    #[arg(long, env = "WIT_INPUT")]
    pub input: Option<PathBuf>,

    /// Outcome column (header name or zero-based position).
    #[arg(long, env = "WIT_Y_COL")]
    pub y_col: Option<ColumnRef>,

    /// Treatment column.
    #[arg(long, env = "WIT_D_COL")]
    pub d_col: Option<ColumnRef>,

    /// Instrument columns, comma separated.
    #[arg(long, env = "WIT_Z_COLS", value_delimiter = ',')]
    pub z_cols: Vec<ColumnRef>,

    /// Exogenous covariate columns, comma separated; an intercept is always partialled out with them.
    #[arg(long, env = "WIT_W_COLS", value_delimiter = ',')]
    pub w_cols: Vec<ColumnRef>,

    #[command(flatten)]
    pub tuning: TuningArgs,

    /// Report destination; the JSON goes to stdout when absent.
    #[arg(long, env = "WIT_OUT")]
    pub out: Option<PathBuf>,

    /// json writes the full report; csv writes the estimate table only.
    #[arg(long, env = "WIT_FORMAT", value_enum)]
    pub format: Option<Format>,

    /// Also write every tuning candidate (start, lambda, valid set, MCD test) as CSV.
    #[arg(long, env = "WIT_CANDIDATES")]
    pub candidates: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Built-in design: C1_I, C1_II, C1_III, C1_IV, C2_I, C2_II or EXAMPLE_1.
    #[arg(long, env = "WIT_CASE")]
    pub case: Option<BuiltinCase>,

    /// Sample sizes, comma separated.
    #[arg(long, env = "WIT_N", value_delimiter = ',')]
    pub n: Vec<usize>,

    /// Replications per sample size.
    #[arg(long, env = "WIT_REPS")]
    pub reps: Option<usize>,

    /// Methods, comma separated (wit, wit-scad, lasso-baseline, oracle-liml, oracle-tsls, tsls, liml, ols).
    #[arg(long, env = "WIT_METHODS", value_delimiter = ',')]
    pub methods: Vec<Method>,

    /// Master seed; drawn from entropy and printed when absent.
    #[arg(long, env = "WIT_SEED")]
    pub seed: Option<u64>,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long, env = "WIT_WORKERS")]
    pub workers: Option<usize>,

    #[command(flatten)]
    pub tuning: TuningArgs,

    /// Metrics table destination; stdout when absent.
    #[arg(long, env = "WIT_OUT")]
    pub out: Option<PathBuf>,

    #[arg(long, env = "WIT_FORMAT", value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct EnumerateArgs {
    /// Direct effects alpha*, comma separated.
    #[arg(
        long,
        env = "WIT_ALPHA",
        value_delimiter = ',',
        allow_hyphen_values = true
    )]
    pub alpha: Vec<f64>,

    /// First-stage coefficients gamma*, comma separated.
    #[arg(
        long,
        env = "WIT_GAMMA",
        value_delimiter = ',',
        allow_hyphen_values = true
    )]
    pub gamma: Vec<f64>,

    /// True treatment effect.
    #[arg(long, env = "WIT_BETA", allow_hyphen_values = true)]
    pub beta: Option<f64>,

    /// Take the truth from a built-in design instead of --alpha/--gamma.
    #[arg(long, env = "WIT_CASE")]
    pub case: Option<BuiltinCase>,

    /// Sample size for designs whose coefficients depend on n.
    #[arg(long, env = "WIT_N")]
    pub n: Option<usize>,

    /// Destination; stdout when absent.
    #[arg(long, env = "WIT_OUT")]
    pub out: Option<PathBuf>,

    /// Machine-readable output instead of the table.
    #[arg(long, env = "WIT_FORMAT", value_enum)]
    pub format: Option<Format>,
}

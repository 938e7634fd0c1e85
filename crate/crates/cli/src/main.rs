//! `jetsde`: simulate, convert, analyse and draw SDEs given as model files.

// positivity checks are written `!(x > 0.0)` so that NaN fails them
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "jetsde", version, about = "Stochastic differential equations as fields of 2-jets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate paths and write them as CSV.
    Simulate(SimulateArgs),
    /// Measure strong convergence over a ladder of step counts.
    Converge(ConvergeArgs),
    /// Convert between representations or push through a map; prints a probe table.
    Transform(TransformArgs),
    /// Percentile fan: expansion, Monte Carlo quantiles and fan curves.
    Fan(FanArgs),
    /// Brownian motion on the manifold of a model file.
    Manifold(ManifoldArgs),
    /// Draw a model or a trajectory file as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    #[value(name = "2jet")]
    TwoJet,
    Euler,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Model file (JSON).
    model: PathBuf,
    #[arg(long, value_enum, default_value = "2jet")]
    scheme: SchemeArg,
    /// Horizon.
    #[arg(long = "T", visible_alias = "horizon", default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1024)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep every k-th step (the last step is always kept).
    #[arg(long, default_value_t = 1)]
    every: usize,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReferenceArg {
    #[value(name = "finest-2jet")]
    FinestTwoJet,
    #[value(name = "finest-euler")]
    FinestEuler,
    #[value(name = "closed-form")]
    ClosedForm,
}

#[derive(Debug, Args)]
struct ConvergeArgs {
    model: PathBuf,
    /// Step counts, comma separated, each twice the previous.
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256, 512, 1024, 2048, 4096])]
    levels: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "T", visible_alias = "horizon", default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, value_enum, default_value = "2jet")]
    scheme: SchemeArg,
    /// Defaults to the model's closed form when it registers one.
    #[arg(long, value_enum)]
    reference: Option<ReferenceArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetForm {
    Ito,
    Stratonovich,
    Standard,
}

#[derive(Debug, Args)]
struct TransformArgs {
    model: PathBuf,
    /// Conversions, applied in order.
    #[arg(long = "to", value_enum)]
    to: Vec<TargetForm>,
    /// Map `f1; ...; fn` over the model's states.
    #[arg(long)]
    pushforward: Option<String>,
    #[arg(long, default_value_t = 20)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FanArgs {
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1587, 0.5, 0.8413])]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0025, 0.005, 0.0075, 0.01])]
    times: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    /// Steps up to the largest time.
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use antithetic path pairs.
    #[arg(long)]
    antithetic: bool,
    /// Report (JSON); standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fan curve table (CSV).
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ManifoldArgs {
    model: PathBuf,
    #[arg(long = "T", visible_alias = "horizon", default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1024)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clamp radius; overrides the model file.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = 1)]
    every: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary (JSON) with the largest surface residual.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlotKind {
    FieldOfCurves,
    EllipseField,
    Fan,
    Trajectory,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long, value_enum)]
    kind: PlotKind,
    /// Model file, for field and fan plots.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Trajectory CSV, for trajectory plots.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// `xmin,xmax,ymin,ymax` of the anchor grid.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [-2.0, 2.0, -2.0, 2.0])]
    bounds: Vec<f64>,
    /// Anchors per axis, `n` or `nx,ny`.
    #[arg(long, value_delimiter = ',', default_values_t = [9usize])]
    grid: Vec<usize>,
    /// Curve half-width or ball radius; 0.1 for curves, 0.05 for ellipses.
    #[arg(long)]
    eps: Option<f64>,
    /// Draw the field pushed through `f1; f2`.
    #[arg(long)]
    pushforward: Option<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1587, 0.5, 0.8413])]
    alphas: Vec<f64>,
    /// Largest time of a fan plot.
    #[arg(long, default_value_t = 0.01)]
    horizon: f64,
    /// Monte Carlo paths for fan plots; none when zero.
    #[arg(long, default_value_t = 0)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    max_paths: usize,
    #[arg(long)]
    title: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_MODEL: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn model(message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_MODEL,
            message: message.to_string(),
        }
    }

    pub fn numerical(message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: message.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Converge(a) => commands::converge(a),
        Command::Transform(a) => commands::transform(a),
        Command::Fan(a) => commands::fan(a),
        Command::Manifold(a) => commands::manifold(a),
        Command::Plot(a) => commands::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("jetsde: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

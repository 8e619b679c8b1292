//! `probreach`: datasets, density fits, scenarios, reachable sets and
//! validation studies from the command line.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when a numeric
//! step fails or a solve does not converge. Every run writes a manifest that
//! `probreach replay` can rerun and check byte for byte.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use probreach::cde::CvScore;
use probreach::par::Execution;
use probreach::resample::RawPathRule;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "probreach",
    version,
    about = "Probabilistic reachable sets from data"
)]
pub struct Cli {
    /// Run every loop on the calling thread (results are identical).
    #[arg(long, global = true)]
    pub sequential: bool,

    /// Manifest path; defaults to a file next to the outputs.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    /// More log output (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Sample (state, disturbance) pairs from a built-in model.
    GenData(GenData),
    /// Fit a conditional density model with cross-validated bandwidths.
    FitCde(FitCde),
    /// Propagate scenario particles and write one CSV per step.
    Scenarios(ScenariosArgs),
    /// Solve for a minimum-volume set from a scenario CSV.
    Reach(Reach),
    /// Run a Monte-Carlo study described by a TOML file.
    Validate(Validate),
    /// Reproduce one case of the two-state biased-sampling example.
    Example1(Example1),
    /// Monte-Carlo study on the engine model with flags instead of a file.
    EngineStudy(EngineStudy),
    /// Evaluate q on a regular 2-D grid for contour plots.
    PlotData(PlotData),
    /// Rerun a manifest and check that every artifact is byte-identical.
    Replay(Replay),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::FitCde(_) => "fit-cde",
            Command::Scenarios(_) => "scenarios",
            Command::Reach(_) => "reach",
            Command::Validate(_) => "validate",
            Command::Example1(_) => "example1",
            Command::EngineStudy(_) => "engine-study",
            Command::PlotData(_) => "plot-data",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    #[value(name = "example1_linear", alias = "example1")]
    Example1Linear,
    #[value(name = "engine_powertrain", alias = "engine")]
    EnginePowertrain,
}

impl From<ModelName> for probreach::dynamics::BuiltinModel {
    fn from(m: ModelName) -> Self {
        match m {
            ModelName::Example1Linear => Self::Example1Linear,
            ModelName::EnginePowertrain => Self::EnginePowertrain,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    Ratio,
    Density,
}

impl From<Score> for CvScore {
    fn from(s: Score) -> Self {
        match s {
            Score::Ratio => CvScore::RatioLoss,
            Score::Density => CvScore::DensityLoss,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RawRule {
    PerStep,
    FixedPerPath,
}

impl From<RawRule> for RawPathRule {
    fn from(r: RawRule) -> Self {
        match r {
            RawRule::PerStep => RawPathRule::PerStepResample,
            RawRule::FixedPerPath => RawPathRule::FixedPerPath,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Scenario,
    Sca,
    Proposed,
}

impl From<MethodName> for probreach::validate::Method {
    fn from(m: MethodName) -> Self {
        match m {
            MethodName::Scenario => Self::Scenario,
            MethodName::Sca => Self::Sca,
            MethodName::Proposed => Self::Proposed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenData {
    #[arg(long, value_enum, default_value = "engine_powertrain")]
    pub model: ModelName,
    /// Number of pairs.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitCde {
    /// Dataset CSV as written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 100)]
    pub max_centers: usize,
    /// Held-out criterion for the bandwidth search.
    #[arg(long, value_enum, default_value = "ratio")]
    pub score: Score,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ScenariosArgs {
    #[arg(long, value_enum, default_value = "engine_powertrain")]
    pub model: ModelName,
    /// Fitted density model; scenarios resample from it at every step.
    #[arg(
        long,
        required_unless_present = "raw_data",
        conflicts_with = "raw_data"
    )]
    pub cde: Option<PathBuf>,
    /// Dataset whose disturbances are reused without regard to the state.
    #[arg(long)]
    pub raw_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "per-step")]
    pub raw_rule: RawRule,
    /// Initial state, comma separated.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required = true
    )]
    pub x0: Vec<f64>,
    /// Last step to write.
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 500)]
    pub nr: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `scenarios_k<k>.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct Reach {
    /// A scenario CSV, or a directory written by `scenarios`.
    #[arg(long)]
    pub scenarios: PathBuf,
    /// Step to read from a directory; also recorded in the result.
    #[arg(long)]
    pub k: Option<usize>,
    /// Polynomial degree of the monomial basis.
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    /// Allowed scenario violation rate.
    #[arg(long, default_value_t = 0.185)]
    pub alpha_s: f64,
    /// Enclose every scenario with a minimum-volume ellipsoid instead.
    #[arg(long)]
    pub enclose_all: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration objective trace.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct Validate {
    /// Study description; see `StudyConfig` for the fields.
    #[arg(long)]
    pub study: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the file's trial count.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Overrides the file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct Example1 {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub case: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Disturbance samples given to the solver.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.185)]
    pub alpha_s: f64,
    /// True draws for the coverage estimate.
    #[arg(long, default_value_t = 100_000)]
    pub m_eval: usize,
    /// Output directory; defaults to `example1-case<C>-seed<S>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EngineStudy {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Scenario counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "500")]
    pub nr: Vec<usize>,
    /// Horizon steps, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "11,15")]
    pub k: Vec<usize>,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "scenario,sca,proposed"
    )]
    pub methods: Vec<MethodName>,
    #[arg(long, default_value_t = 1000)]
    pub n_data: usize,
    #[arg(long, default_value_t = 10_000)]
    pub m_eval: usize,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.185)]
    pub alpha_s: f64,
    #[arg(long, value_enum, default_value = "ratio")]
    pub score: Score,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; defaults to `engine-study-seed<S>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PlotData {
    /// Solve result or bare parameter JSON.
    #[arg(long)]
    pub params: PathBuf,
    /// Points per axis.
    #[arg(long, default_value_t = 200)]
    pub grid: usize,
    /// `lo1,hi1,lo2,hi2`; defaults to the scenario box stored in the result.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub bbox: Option<Vec<f64>>,
    /// Output CSV; defaults to `<params>.grid.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct Replay {
    /// Manifest written by an earlier run.
    #[arg(value_name = "MANIFEST")]
    pub path: PathBuf,
}

/// Why a run stopped.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numeric(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numeric(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<probreach::Error> for Failure {
    fn from(e: probreach::Error) -> Self {
        use probreach::Error as E;
        match e {
            E::IllConditioned(_) | E::Numeric(_) | E::StudyAborted(_) => {
                Failure::Numeric(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli, argv[1..].to_vec()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

//! Command-line front end: fit, λ selection and synthetic benchmarks for
//! mixture-of-EP low-rank factorization.

pub mod commands;
pub mod io;
pub mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use moep_lrmf::em::{EmConfig, EtaInit, FactorSolver};
use moep_lrmf::{Error, PenaltyConfig, PenaltyScale};

/// Failure of a command, carrying its exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad flags or unreadable input (exit 2).
    Usage(String),
    /// Inconsistent shapes (exit 3).
    Shape(String),
    /// The numerical work failed (exit 4).
    Numerical(String),
    /// Output could not be written (exit 2).
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Shape(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Shape(m) | CliError::Numerical(m) | CliError::Io(m) => {
                f.write_str(m)
            }
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let msg = err.to_string();
        match err {
            Error::InvalidParameter(_) | Error::PenaltyTooLarge(_) => CliError::Usage(msg),
            Error::Shape(_) | Error::TooFewObserved { .. } => CliError::Shape(msg),
            Error::NonFinite(_)
            | Error::Numerical(_)
            | Error::AllRestartsFailed(..)
            | Error::AllCandidatesFailed(..) => CliError::Numerical(msg),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "moep", version, about, args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit one matrix.
    Fit(commands::FitArgs),
    /// Choose λ by BIC over a grid.
    Select(commands::SelectArgs),
    /// Run replicates of the synthetic noise regimes.
    Bench(commands::BenchArgs),
}

/// Model and solver flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// TOML file whose keys supply any flag; the command line wins.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    /// Initial component count; must match the number of shapes.
    #[arg(long)]
    pub k_start: Option<usize>,
    /// Shape exponents of the initial components.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,1,2")]
    pub p: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_outer: usize,
    /// auto, alm, weighted-l2 or reweighted.
    #[arg(long, default_value = "reweighted", value_parser = parse_solver)]
    pub solver: FactorSolver,
    /// unit or matched.
    #[arg(long, default_value = "matched", value_parser = parse_eta_init)]
    pub eta_init: EtaInit,
    /// observed or columns.
    #[arg(long, default_value = "observed", value_parser = parse_scale)]
    pub penalty_scale: PenaltyScale,
    /// Start the first restart from the truncated SVD.
    #[arg(long)]
    pub svd_start: bool,
}

impl ModelArgs {
    pub fn config(&self, lambda: f64) -> Result<EmConfig, CliError> {
        if let Some(k) = self.k_start {
            if k != self.p.len() {
                return Err(CliError::Usage(format!(
                    "--k-start {k} does not match the {} shapes given by --p",
                    self.p.len()
                )));
            }
        }
        let config = EmConfig {
            rank: self.rank,
            p_candidates: self.p.clone(),
            penalty: PenaltyConfig {
                lambda,
                scale: self.penalty_scale,
                ..PenaltyConfig::default()
            },
            tol: self.tol,
            max_outer: self.max_outer,
            restarts: self.restarts,
            seed: self.seed,
            solver: self.solver,
            eta_init: self.eta_init,
            svd_start: self.svd_start,
            ..EmConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

fn parse_solver(s: &str) -> Result<FactorSolver, String> {
    match s {
        "auto" => Ok(FactorSolver::Auto),
        "alm" => Ok(FactorSolver::Alm),
        "weighted-l2" => Ok(FactorSolver::WeightedL2),
        "reweighted" => Ok(FactorSolver::Reweighted),
        _ => Err(format!("unknown solver '{s}'")),
    }
}

fn parse_eta_init(s: &str) -> Result<EtaInit, String> {
    match s {
        "unit" => Ok(EtaInit::Unit),
        "matched" => Ok(EtaInit::Matched),
        _ => Err(format!("unknown precision start '{s}'")),
    }
}

fn parse_scale(s: &str) -> Result<PenaltyScale, String> {
    match s {
        "observed" => Ok(PenaltyScale::Observed),
        "columns" => Ok(PenaltyScale::Columns),
        _ => Err(format!("unknown penalty scale '{s}'")),
    }
}

/// Inserts the flags of a `--config` file right after the subcommand so that
/// later command-line flags override them.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let pos = args.iter().position(|a| a == "--config");
    let path = match pos {
        Some(i) => args
            .get(i + 1)
            .cloned()
            .ok_or_else(|| CliError::Usage("--config needs a file".into()))?,
        None => match args
            .iter()
            .find_map(|a| a.to_str().and_then(|s| s.strip_prefix("--config=")))
        {
            Some(p) => OsString::from(p),
            None => return Ok(args),
        },
    };
    let path = PathBuf::from(path);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("cannot parse config {}: {e}", path.display())))?;
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in table {
        if key == "config" {
            continue;
        }
        let flag = format!("--{key}");
        let text = match value {
            toml::Value::Boolean(true) => {
                extra.push(flag.into());
                continue;
            }
            toml::Value::Boolean(false) => continue,
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(i) => Ok(i.to_string()),
                    toml::Value::Float(f) => Ok(f.to_string()),
                    other => Err(CliError::Usage(format!(
                        "config key {key}: unsupported item {other}"
                    ))),
                })
                .collect::<Result<Vec<_>, _>>()?
                .join(","),
            other => {
                return Err(CliError::Usage(format!(
                    "config key {key}: unsupported value {other}"
                )))
            }
        };
        extra.push(flag.into());
        extra.push(text.into());
    }
    let at = 2.min(args.len());
    let mut out = args[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit(args) => commands::fit(&args),
        Command::Select(args) => commands::select(&args),
        Command::Bench(args) => commands::bench(&args),
    }
}

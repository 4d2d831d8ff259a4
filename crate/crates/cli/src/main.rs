mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

use synthpanel::Error;

use settings::{read_config, resolve, Resolved};

/// Counterfactual outcomes and treatment effects from untreated donor panels.
#[derive(Parser, Debug)]
#[command(name = "synthpanel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML or JSON settings file; a run manifest replays that run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Covariate matching only: neighbor lists, donor set, quantile alignment.
    Match(RunArgs),
    /// Full pipeline: effects, per-unit effects, leaderboard, weights.
    Estimate(RunArgs),
    /// Compare synthetic estimates with a real control group.
    Validate(RunArgs),
    /// Write a synthetic experiment with a known effect.
    Simulate(SimArgs),
    /// Plot data: per-model error and bias distributions, unit time series.
    Diagnose(RunArgs),
}

#[derive(Args, Debug, Default, Serialize)]
struct InputArgs {
    /// Wide outcome CSV: `unit_id` then one column per period.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    outcomes: Option<PathBuf>,
    /// Treated unit ids, one per line.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    treated: Option<PathBuf>,
    /// Number of pre-treatment periods.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    t0: Option<usize>,
    /// Covariate CSV: `unit_id` then one column per covariate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    covariates: Option<PathBuf>,
    /// Control unit ids, one per line; never used as donors.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    control: Option<PathBuf>,
    /// Unit ids to keep out of the donor pool (e.g. spillover).
    #[arg(long = "exclude")]
    #[serde(skip_serializing_if = "Option::is_none")]
    exclude_file: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize)]
struct RunArgs {
    #[command(flatten)]
    #[serde(flatten)]
    inputs: InputArgs,
    /// Experiment label in verdict tables.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    experiment: Option<String>,
    /// Neighbors per treated unit.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    trees: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    leaf_size: Option<usize>,
    #[arg(long, value_parser = ["euclidean", "cosine"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    metric: Option<String>,
    /// Exact neighbor search instead of the tree forest.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    exact: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    search_k: Option<usize>,
    /// Random donor subsample fraction (implies --single-phase).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    subsample: Option<f64>,
    /// Skip covariate matching and regress on every eligible donor.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    single_phase: Option<bool>,
    #[arg(long, value_parser = ["union", "per-unit"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pool_mode: Option<String>,
    #[arg(long, value_parser = ["none", "column"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    center: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    intercept: Option<bool>,
    /// Weight of |bias| in the selection loss.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[arg(long, value_parser = ["l1", "frobenius"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    norm: Option<String>,
    #[arg(long, value_parser = ["rolling", "holdout"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    cv: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    folds: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    val_width: Option<usize>,
    /// TOML file overriding the candidate grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<PathBuf>,
    #[arg(long, value_parser = ["ttest", "placebo"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    inference: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    placebo_draws: Option<usize>,
    /// Hold out this fraction of donors to estimate and remove bias.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    split_fraction: Option<f64>,
    /// Train on a window ending this many periods before t0.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    stale_gap: Option<usize>,
    /// Unit to export a time series for (repeatable).
    #[arg(long = "unit")]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    units: Vec<String>,
    /// Leaderboard models to export error distributions for.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    top: Option<usize>,
}

#[derive(Args, Debug, Default, Serialize)]
struct SimArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_units: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_treated: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_control: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_periods: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    t0: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_covariates: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    latent_rank: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    factor_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    level_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tau_true: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    heterogeneity: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    drift: Option<f64>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Match(_) => "match",
            Command::Estimate(_) => "estimate",
            Command::Validate(_) => "validate",
            Command::Simulate(_) => "simulate",
            Command::Diagnose(_) => "diagnose",
        }
    }

    fn flags(&self) -> Result<Map<String, Value>> {
        let value = match self {
            Command::Simulate(a) => serde_json::to_value(a)?,
            Command::Match(a) | Command::Estimate(a) | Command::Validate(a) | Command::Diagnose(a) => {
                serde_json::to_value(a)?
            }
        };
        match value {
            Value::Object(m) => Ok(m),
            _ => unreachable!("flag structs serialize to objects"),
        }
    }
}

fn absolutize(resolved: &mut Resolved) -> Result<()> {
    let s = &mut resolved.settings;
    for path in [
        &mut s.outcomes,
        &mut s.treated,
        &mut s.covariates,
        &mut s.control,
        &mut s.exclude_file,
        &mut s.grid,
    ]
    .into_iter()
    .flatten()
    {
        *path = std::path::absolute(&*path).with_context(|| format!("resolving {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<commands::Outcome> {
    let config = match &cli.config {
        Some(path) => read_config(path)?,
        None => Map::new(),
    };
    let mut flags = cli.command.flags()?;
    if let Some(seed) = cli.seed {
        flags.insert("seed".into(), seed.into());
    }
    if let Some(threads) = cli.threads {
        flags.insert("threads".into(), threads.into());
    }
    if let Some(out) = &cli.out {
        flags.insert("out".into(), Value::String(out.to_string_lossy().into_owned()));
    }
    let mut resolved = resolve(config, flags)?;
    absolutize(&mut resolved)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = resolved.settings.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("starting worker threads")?;
    let command = cli.command;
    pool.install(|| match command {
        Command::Match(_) => commands::cmd_match(&resolved),
        Command::Estimate(_) => commands::cmd_estimate(&resolved),
        Command::Validate(_) => commands::cmd_validate(&resolved),
        Command::Simulate(_) => commands::cmd_simulate(&resolved),
        Command::Diagnose(_) => commands::cmd_diagnose(&resolved),
    })
}

/// Exit status per error class.
fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|e| e.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Io { .. } | Error::Csv { .. } => 10,
        Error::Parse(_)
        | Error::MissingValue { .. }
        | Error::DuplicateUnitId(_)
        | Error::UnknownTreatedId(_)
        | Error::BadT0 { .. }
        | Error::InvalidPanel(_) => 11,
        Error::RowMismatch(_) => 12,
        Error::UnknownUnitId(_) | Error::ExcludedIsTreated(_) => 13,
        Error::ConfigInvalid(_) | Error::InvalidSpec(_) | Error::BadFraction(_) => 14,
        Error::EmptyDonorSet
        | Error::EmptyGroup(_)
        | Error::TooFewDonors { .. }
        | Error::InsufficientDonors { .. }
        | Error::EmptySplit => 15,
        Error::SingularSystem(_) | Error::ShapeMismatch(_) | Error::ZeroActualNorm | Error::AllCandidatesFailed(_) => 16,
        Error::InsufficientColumns(_) | Error::TooFewUnits(_) => 17,
        Error::EmptyControl => 18,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(outcome) if outcome.passed => ExitCode::SUCCESS,
        Ok(_) => {
            eprintln!("{name}: validation failed");
            ExitCode::from(3)
        }
        Err(err) => {
            eprintln!("{name}: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

//! `fraclab`: batch front-end for the fractional heat/wave laboratory.
//!
//! Exit codes: 0 success, 1 numerical or verification failure, 2 invalid
//! configuration or arguments (no output written). Failures print one JSON
//! object on stderr.

// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{ConfigError, ExperimentConfig, Task};
use run::RunError;

#[derive(Parser)]
#[command(
    name = "fraclab",
    version,
    about = "Fractional heat/wave solvers, DN maps and jet recovery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML, or JSON by extension). Omitted: the bundled
    /// config for the task.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for all random data (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; changes speed only, never results. 0 = all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the (semilinear) heat equation with exterior data.
    SolveHeat(Common),
    /// Solve the (semilinear) wave equation with exterior data.
    SolveWave(Common),
    /// DN records of the configured model for a list of exterior inputs.
    Dn(Common),
    /// Compare mixed DN differences with directly solved linearizations.
    Linearize(Common),
    /// Least-squares exterior controls for interior targets.
    Runge(Common),
    /// Recover the Taylor jets of the nonlinearity from DN data.
    Recover {
        #[command(flatten)]
        common: Common,
        /// Standard deviation of additive DN noise.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Run the property and oracle suite.
    Verify(Common),
    /// Run whatever task the config names.
    Run(Common),
    /// Render SVG figures for the artifacts of a finished run.
    Plot {
        /// Output directory of the run.
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(ConfigError),
    Run(RunError),
    Plot(plot::PlotError),
}

impl Failure {
    fn report(&self) -> ExitCode {
        let (code, kind, message) = match self {
            Failure::Config(e) => (2, "ConfigError".to_string(), e.to_string()),
            Failure::Run(e) => (1, e.kind().to_string(), e.to_string()),
            Failure::Plot(e) => (1, "PlotError".to_string(), e.to_string()),
        };
        let mut err = json!({ "kind": kind, "message": message });
        if let Some(h) = hint(&kind) {
            err["hint"] = json!(h);
        }
        eprintln!("{}", json!({ "error": err }));
        ExitCode::from(code)
    }
}

/// The precondition behind each error kind, in words.
fn hint(kind: &str) -> Option<&'static str> {
    Some(match kind {
        "ConfigError" => "fix the configuration; nothing was written",
        "OverlapError" => "W and V must stay away from the closure of Omega (at least two cells)",
        "DomainError" => "the sets or stencils must fit inside the computational box",
        "SupportError" => "exterior bumps must be supported inside W and strictly inside (0, T)",
        "ParamError" => "a parameter is outside its admissible range (e.g. 0 < s < 1; 1/2 < s < 1 for the wave equation)",
        "SmallnessError" | "BudgetError" => "well-posedness holds for small exterior data only; lower the amplitude or raise delta",
        "DivergenceError" => "the fixed-point map is not contracting for these data; lower the amplitude",
        "RankDeficientError" | "IllConditionedError" => "the source-to-DN map is not numerically injective for this design; add tuples or use a positive regularization weight",
        "SingularSystemError" => "a time-step matrix is singular; check the potential and the time step",
        "VerificationFailed" => "see verify.txt in the output directory",
        _ => return None,
    })
}

fn load(common: &Common, task: Option<Task>) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match (&common.config, task) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(task)) => {
            let mut cfg = ExperimentConfig::parse(config::bundled(task), false)?;
            cfg.resolve_paths(None)?;
            cfg
        }
        (None, None) => return Err(ConfigError("`run` needs --config".into())),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let (common, task, noise) = match cli.command {
        Command::Plot { out } => {
            let files = plot::plot_dir(&out).map_err(Failure::Plot)?;
            for f in files {
                println!("{}", f.display());
            }
            return Ok(());
        }
        Command::SolveHeat(c) => (c, Some(Task::SolveHeat), None),
        Command::SolveWave(c) => (c, Some(Task::SolveWave), None),
        Command::Dn(c) => (c, Some(Task::Dn), None),
        Command::Linearize(c) => (c, Some(Task::Linearize), None),
        Command::Runge(c) => (c, Some(Task::Runge), None),
        Command::Recover { common, noise } => (common, Some(Task::Recover), noise),
        Command::Verify(c) => (c, Some(Task::Verify), None),
        Command::Run(c) => (c, None, None),
    };
    let mut cfg = load(&common, task).map_err(Failure::Config)?;
    let task = cfg.validate(task).map_err(Failure::Config)?;
    if let Some(sigma) = noise {
        if !(sigma >= 0.0) {
            return Err(Failure::Config(ConfigError(format!(
                "--noise must be nonnegative, got {sigma}"
            ))));
        }
        if let Some(rc) = cfg.recover.as_mut() {
            rc.noise = sigma;
        }
    }
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("fraclab-out").join(task.name()));
    let dir = fraclab_core::par::with_threads(common.threads, || run::run(&cfg, task, &out))
        .map_err(Failure::Run)?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}

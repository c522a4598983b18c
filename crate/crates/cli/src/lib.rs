//! Config-driven runner for the gradflow experiments.
//!
//! Each subcommand reads a JSON [`ExperimentConfig`], runs one flow, writes
//! CSV and JSON outputs plus a `manifest.json` that echoes the config, and
//! exits 0 when every identity check passes, 2 when one fails and 1 on a
//! usage or config error.

pub mod config;
pub mod criteria;
pub mod output;
pub mod run;
pub mod verify;

use std::ffi::OsString;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gradflow::FlowError;
use serde::Serialize;

pub use config::{validate, Diagnostic, ExperimentConfig, Kind};
pub use run::{Check, Outcome};

/// Output directory when neither the config nor `--out-dir` names one.
pub const DEFAULT_OUT_DIR: &str = "gradflow-out";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config:\n{}", .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<Diagnostic>),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("run failed: {0}")]
    Flow(#[from] FlowError),
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    kind: Kind,
    config: &'a ExperimentConfig,
    files: &'a [String],
    passed: bool,
    checks: &'a [Check],
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(ExperimentConfig::from_json(&text)?)
}

/// Validates and runs `config`, writing outputs, `summary.json` and
/// `manifest.json` into its output directory.
pub fn run_config(config: &ExperimentConfig, kind: Option<Kind>) -> Result<Outcome, CliError> {
    let plan = config::resolve(config, kind).map_err(CliError::Config)?;
    let out = config
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    output::ensure_dir(&out)?;
    let mut outcome = run::execute(&plan, &out)?;

    let mut echoed = config.clone();
    echoed.kind = Some(plan.kind.name().to_string());
    output::write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "kind": plan.kind,
            "passed": outcome.passed(),
            "checks": outcome.checks,
            "summary": outcome.summary,
        }),
    )?;
    outcome.files.push("summary.json".into());
    let mut files = outcome.files.clone();
    files.push("manifest.json".into());
    output::write_json(
        &out.join("manifest.json"),
        &Manifest {
            tool: "gradflow",
            version: env!("CARGO_PKG_VERSION"),
            kind: plan.kind,
            config: &echoed,
            files: &files,
            passed: outcome.passed(),
            checks: &outcome.checks,
        },
    )?;
    outcome.files = files;
    Ok(outcome)
}

#[derive(Debug, Parser)]
#[command(name = "gradflow", version, about = "Gradient flows and their optimal-control certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Gradient flow in R^n.
    Euclidean(RunArgs),
    /// Newton flow in R^n.
    Newton(RunArgs),
    /// Projected (stochastic) gradient flow in R^n.
    Sgd(RunArgs),
    /// Fokker–Planck flow on a grid.
    FokkerPlanck(RunArgs),
    /// Coupled flow of a density pair.
    Product(RunArgs),
    /// Run the identity suite and print a pass/fail table.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    /// Output directory (overrides the config).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    dt: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    t_final: Option<f64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Only validate the config and print diagnostics.
    #[arg(long)]
    check: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn apply(config: &mut ExperimentConfig, o: &Overrides) {
    if let Some(d) = &o.out_dir {
        config.out_dir = Some(d.clone());
    }
    if let Some(s) = o.seed {
        config.seed = s;
    }
    if let Some(dt) = o.dt {
        config.dt = Some(dt);
    }
    if let Some(t) = o.t_final {
        config.t_final = Some(t);
    }
}

fn print_checks(outcome: &Outcome) {
    if let Some(table) = outcome.summary.get("table").and_then(|t| t.as_array()) {
        for line in table.iter().filter_map(|l| l.as_str()) {
            println!("{line}");
        }
        return;
    }
    for c in &outcome.checks {
        println!(
            "{} {} = {:.6e} (tolerance {:.1e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance
        );
    }
}

/// Runs the command line and returns the process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (kind, config, overrides, check_only) = match cli.command {
        Command::Verify(a) => {
            let config = match &a.config {
                Some(p) => match read_config(p) {
                    Ok(c) => c,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return 1;
                    }
                },
                None => ExperimentConfig::from_json("{}").expect("empty config"),
            };
            (Kind::Verify, config, a.overrides, false)
        }
        other => {
            let (kind, a) = match other {
                Command::Euclidean(a) => (Kind::Euclidean, a),
                Command::Newton(a) => (Kind::Newton, a),
                Command::Sgd(a) => (Kind::Sgd, a),
                Command::FokkerPlanck(a) => (Kind::FokkerPlanck, a),
                Command::Product(a) => (Kind::Product, a),
                Command::Verify(_) => unreachable!(),
            };
            match read_config(&a.config) {
                Ok(c) => (kind, c, a.overrides, a.check),
                Err(e) => {
                    eprintln!("error: {e}");
                    return 1;
                }
            }
        }
    };
    let mut config = config;
    apply(&mut config, &overrides);

    let diagnostics = validate(&config, Some(kind));
    if !diagnostics.is_empty() {
        eprintln!("error: {}", CliError::Config(diagnostics));
        return 1;
    }
    if check_only {
        println!("config is valid");
        return 0;
    }
    // Verify writes files only when an output directory was asked for.
    let result = if kind == Kind::Verify && config.out_dir.is_none() {
        verify::run_suite()
    } else {
        run_config(&config, Some(kind))
    };
    match result {
        Ok(outcome) => {
            print_checks(&outcome);
            if outcome.passed() {
                0
            } else {
                2
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

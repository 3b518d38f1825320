//! Command-line driver for averaged and full-fidelity formation runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use emff::runlog::write_sidecar;
use emff::scenario::{builtin_scenario_file, Scenario, ScenarioError};
use emff::sim::{metadata, run_averaged, run_full, FullOptions, RunOptions, Termination};
use emff::validate::run_all;
use serde_json::json;

/// Exit status for a malformed or invalid scenario.
const EXIT_SCENARIO: u8 = 2;
/// Exit status when a run leaves the safe set or fails numerically.
const EXIT_RUN: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "emff", version, about = "Electromagnetic formation flying with alternating-field forces")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory for CSV logs and JSON sidecars.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Log every k-th step (overrides the scenario).
    #[arg(long, global = true)]
    log_every: Option<usize>,

    /// Seed for the randomized property suites.
    #[arg(long, global = true, default_value_t = 2024)]
    seed: u64,

    /// Simulated duration in seconds (overrides the scenario).
    #[arg(long, global = true)]
    duration: Option<f64>,

    /// Stop an averaged run after this many wall-clock seconds.
    #[arg(long, global = true)]
    wall_budget: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-loop run of the averaged model. `paper` selects the built-in scenario.
    RunAveraged { scenario: String },
    /// Full sinusoidal dynamics over a whole number of amplitude periods.
    RunFull {
        scenario: String,
        /// Window length in seconds; must be a multiple of the common period.
        #[arg(long)]
        window: f64,
    },
    /// Run the property suites and report each check with its margin.
    Validate,
    /// Print the built-in formation scenario as JSON.
    ScenarioPaper,
}

enum Failure {
    Scenario(ScenarioError),
    Run(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load(spec: &str) -> Result<Scenario, Failure> {
    let path = Path::new(spec);
    if spec == "paper" && !path.exists() {
        return Ok(Scenario::builtin());
    }
    Scenario::load(path).map_err(Failure::Scenario)
}

fn out_path(dir: &Path, name: &str, ext: &str) -> PathBuf {
    dir.join(format!("{name}.{ext}"))
}

fn averaged(cli: &Cli, spec: &str) -> Result<(), Failure> {
    let s = load(spec)?;
    if let Some(d) = cli.duration {
        if !(d.is_finite() && d >= 0.0) {
            return Err(Failure::Other(anyhow::anyhow!("--duration must be a nonnegative number of seconds")));
        }
    }
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let start = std::time::Instant::now();
    let run = run_averaged(&s, &RunOptions { duration: cli.duration, log_every: cli.log_every, abort_on_exit: true, wall_budget_s: cli.wall_budget })
        .context("averaged run")?;
    let elapsed = start.elapsed().as_secs_f64();

    let csv = out_path(&cli.out, &s.output_name, "csv");
    run.log.write_csv(&csv).context("writing run log")?;
    let meta = metadata(
        &s,
        "averaged",
        &run.log.columns,
        json!({ "termination": run.termination, "summary": run.summary, "wall_time_s": elapsed }),
    );
    write_sidecar(&out_path(&cli.out, &s.output_name, "json"), &meta).context("writing sidecar")?;

    let sm = &run.summary;
    println!("wrote {} ({} rows)", csv.display(), run.log.len());
    println!(
        "t = {:.2} s, min distance {:.4} m, max relative speed {:.4} m/s, max power {:.4e} VA, min h {:.4e}",
        sm.final_time_s, sm.min_distance_m, sm.max_relative_speed_m_per_s, sm.max_power_va, sm.min_h
    );
    for (label, e) in &sm.final_formation_error_m {
        println!("final |r{label} - d{label}| = {e:.4e} m");
    }
    match run.termination {
        Termination::Completed => Ok(()),
        Termination::SafeSetExit { time, detail } => Err(Failure::Run(format!("left the safe set at t = {time} s: {detail}"))),
        Termination::Failed { time, error } => Err(Failure::Run(format!("integration failed at t = {time} s: {error}"))),
        Termination::BudgetExhausted { time, wall_s } => {
            Err(Failure::Run(format!("wall-clock budget exhausted after {wall_s:.1} s at t = {time} s")))
        }
    }
}

fn full(cli: &Cli, spec: &str, window: f64) -> Result<(), Failure> {
    let s = load(spec)?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let opts = FullOptions { log_every: cli.log_every.unwrap_or(s.log_every), ..FullOptions::default() };
    let run = run_full(&s, window, &opts).map_err(|e| Failure::Run(format!("full run: {e}")))?;
    let name = format!("{}_full", s.output_name);
    let csv = out_path(&cli.out, &name, "csv");
    run.samples.write_csv(&csv).context("writing samples")?;
    let periods = out_path(&cli.out, &format!("{name}_periods"), "csv");
    run.periods.write_csv(&periods).context("writing period summary")?;
    let meta = metadata(
        &s,
        "full",
        &run.samples.columns,
        json!({
            "window_s": window,
            "periods": run.periods.len(),
            "period_columns": run.periods.columns,
            "max_relative_error": run.max_relative_error,
        }),
    );
    write_sidecar(&out_path(&cli.out, &name, "json"), &meta).context("writing sidecar")?;
    println!("wrote {} and {}", csv.display(), periods.display());
    println!("{} periods, max relative error of the period-mean acceleration {:.4e}", run.periods.len(), run.max_relative_error);
    Ok(())
}

fn validate(cli: &Cli) -> Result<(), Failure> {
    let results = run_all(cli.seed).context("property suites")?;
    let mut failed = 0;
    for r in &results {
        println!("{}", r.line());
        failed += usize::from(!r.passed);
    }
    println!("{} checks, {} failed", results.len(), failed);
    if failed > 0 {
        return Err(Failure::Run(format!("{failed} checks failed")));
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::RunAveraged { scenario } => averaged(cli, scenario),
        Command::RunFull { scenario, window } => full(cli, scenario, *window),
        Command::Validate => validate(cli),
        Command::ScenarioPaper => {
            let text = serde_json::to_string_pretty(&builtin_scenario_file()).context("serializing scenario")?;
            println!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Scenario(e)) => {
            eprintln!("error: invalid scenario: {e}");
            ExitCode::from(EXIT_SCENARIO)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUN)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

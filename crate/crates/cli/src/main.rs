mod config;
mod experiments;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use config::{ConfigError, Experiment, ExperimentConfig};
use experiments::{Ctx, RunError};
use report::ReportError;

const THREADS_ENV: &str = "DUALITY_NETS_THREADS";

/// Runs one experiment and writes results.csv, report.json and plot.svg.
///
/// Exit codes: 0 all assertions pass, 1 an assertion failed, 2 invalid
/// arguments or config, 3 runtime failure.
#[derive(Debug, Parser)]
#[command(name = "duality-nets", version)]
struct Cli {
    /// fig1_spline, fig2_rank_vs_beta, fig3_norms, fig3b_relu_rank,
    /// fig4_whitened, fig6_projections, neural_collapse, verify_suite,
    /// construct or train
    experiment: Experiment,
    /// JSON experiment config; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: out/<experiment>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; DUALITY_NETS_THREADS takes precedence
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("config error at {}: {}", if .0.pointer.is_empty() { "/" } else { &.0.pointer }, .0.message)]
    Config(ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => CliError::Config(c),
            RunError::Core(c) => CliError::Runtime(c.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
            CliError::Config(ConfigError::at("", format!("{THREADS_ENV}={v:?} is not a thread count")))
        })?),
        Err(_) => flag,
    };
    match n {
        Some(0) => Err(CliError::Config(ConfigError::at("", "thread count must be at least 1"))),
        n => Ok(n),
    }
}

fn run(cli: Cli) -> Result<bool, CliError> {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(CliError::Config)?,
        None => ExperimentConfig::defaults(cli.experiment),
    };
    if cfg.experiment != cli.experiment {
        return Err(CliError::Config(ConfigError::at(
            "/experiment",
            format!("config is for {} but {} was requested", cfg.experiment, cli.experiment),
        )));
    }
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    cfg.seed = Some(seed);
    let out_dir = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out").join(cli.experiment.name()));
    cfg.out = Some(out_dir.clone());
    let echo = serde_json::to_value(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;

    let start = Instant::now();
    let outcome = experiments::run(&Ctx { cfg, seed })?;
    let wall = start.elapsed().as_secs_f64();

    let name = cli.experiment.name();
    let report = report::emit_report(name, echo, &outcome.rows, outcome.metrics, outcome.assertions, wall)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    report::write_csv(&out_dir.join("results.csv"), name, &outcome.rows)?;
    report::write_json(&out_dir.join("report.json"), &report)?;
    let svg = out_dir.join("plot.svg");
    std::fs::write(&svg, outcome.chart.to_svg()).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", svg.display())))?;
    for (file, value) in &outcome.files {
        report::write_json(&out_dir.join(file), value)?;
    }

    for a in &report.assertions {
        let verdict = if a.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {}: {:.3e} {} {:.3e} (tol {:.1e})", a.name, a.actual, a.relation.symbol(), a.expected, a.tol);
    }
    println!("{name}: {} in {wall:.1}s, artifacts in {}", if report.pass { "pass" } else { "FAIL" }, out_dir.display());
    Ok(report.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ CliError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use filtration_lab_cli::config::{all_suites, RunConfig};
use filtration_lab_cli::{execute, render, write_outputs, EXIT_CONFIG};

/// Run exact and Monte Carlo checks on enlarged filtrations.
///
/// Exit status: 0 when every check passes or is skipped, 1 when any check
/// fails, 2 on a configuration or output error.
#[derive(Debug, Parser)]
#[command(name = "filtration-lab", version)]
struct Args {
    /// JSON run configuration; defaults to the finite checks on an independent kernel.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Check or group to run (all, finite, refinement, mc); replaces the configured list.
    #[arg(long = "suite", value_name = "NAME")]
    suites: Vec<String>,
    /// Output directory for summary.json and series.csv.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for the finite checks and the Monte Carlo paths.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Print every check name and exit.
    #[arg(long)]
    list_suites: bool,
}

fn configure(args: &Args) -> Result<(RunConfig, PathBuf), String> {
    let (mut cfg, base) = match &args.config {
        Some(p) => {
            let cfg = RunConfig::load(p).map_err(|e| e.to_string())?;
            (cfg, p.parent().unwrap_or(Path::new(".")).to_path_buf())
        }
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    if !args.suites.is_empty() {
        cfg.suites = args.suites.clone();
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        if let Some(mc) = cfg.mc.as_mut() {
            mc.seed = seed;
        }
    }
    Ok((cfg, base))
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.list_suites {
        all_suites().for_each(|n| println!("{n}"));
        return ExitCode::SUCCESS;
    }
    let (cfg, base) = match configure(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let summary = match execute(&cfg, &base) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    for r in &summary.reports {
        println!("{}", render(r));
    }
    if let Err(e) = write_outputs(&cfg.output_dir, &summary) {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    println!(
        "{} passed, {} failed, {} skipped; reports in {}",
        summary.passed,
        summary.failed,
        summary.skipped,
        cfg.output_dir.display()
    );
    ExitCode::from(summary.exit_code())
}

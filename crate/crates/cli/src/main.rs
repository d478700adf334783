use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use cpt_cli::report::emit_report;
use cpt_cli::run::{run_experiment, RunOptions};
use cpt_cli::{CliError, RunConfig};
use cpt_core::experiment::Arm;

/// Continual pre-training experiments: replay, Reptile and their combination over a
/// seed × model size × arm matrix.
#[derive(Parser, Debug)]
#[command(name = "cpt", version)]
struct Args {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only these arms (repeatable).
    #[arg(long = "arm")]
    arms: Vec<Arm>,
    /// Run only these seeds (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Discard unfinished cells left by an interrupted run and redo them.
    #[arg(long)]
    resume: bool,
    /// Skip training and rebuild the report from the existing metrics.
    #[arg(long)]
    report_only: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: Args) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if !args.arms.is_empty() {
        cfg.arms = args.arms;
    }
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds;
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }

    if !args.report_only {
        let summary = run_experiment(&cfg, RunOptions { resume: args.resume }, &mut |line| eprintln!("{line}"))?;
        eprintln!("{} cell(s) run, {} already complete", summary.ran.len(), summary.skipped.len());
    }
    let files = emit_report(&cfg.output_dir)?;
    eprintln!(
        "report over {} cell(s): {}, {}, {} plot(s)",
        files.cells,
        files.report.display(),
        files.fits.display(),
        files.plots.len()
    );
    Ok(())
}

//! `weakform run <config>`, `weakform matrix <manifest>` and
//! `weakform reference singlephase|buckley <dir>`.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 invalid config,
//! 3 training aborted on a non-finite loss.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use weakform::Error;
use weakform::evalkit::{METRICS_HEADER, Model};
use weakform::experiment::{ExperimentConfig, Problem, Reference, parse_manifest, run, run_matrix};

#[derive(Parser)]
#[command(name = "weakform", version, about = "Train and evaluate weak-form surrogate models")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for residual assembly.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Print progress every N epochs (0 disables).
    #[arg(long, global = true, default_value_t = 100)]
    progress: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Run { config: PathBuf },
    /// Train every entry of a manifest and aggregate the metrics.
    Matrix { manifest: PathBuf },
    /// Write the reference solution only.
    Reference { problem: RefProblem, dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum RefProblem {
    Singlephase,
    Buckley,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse(_) => 2,
        Error::Training(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => run_one(&cli, config),
        Command::Matrix { manifest } => matrix(&cli, manifest),
        Command::Reference { problem, dir } => reference(*problem, dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run_one(cli: &Cli, path: &Path) -> weakform::Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let config = ExperimentConfig::parse(&text)?;
    let every = cli.progress;
    let out = run(&config, &cli.out, cli.threads, |r| {
        if every > 0 && r.epoch % every == 0 {
            eprintln!(
                "epoch {:>6}  loss {:.4e}  data {:.3e}  theory {:.3e}  ic {:.3e}  bc {:.3e}  lambda {:.4}",
                r.epoch, r.loss, r.residuals.data, r.residuals.theory, r.residuals.ic, r.residuals.bc, r.lambda_f
            );
        }
    })?;
    println!("{METRICS_HEADER}");
    println!("{}", out.report.csv_row());
    Ok(())
}

fn matrix(cli: &Cli, path: &Path) -> weakform::Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().map(PathBuf::from).unwrap_or_default();
    let entries = parse_manifest(&text, &base)?;
    for row in run_matrix(&entries, &cli.out, cli.threads)? {
        println!("{row}");
    }
    Ok(())
}

fn reference(problem: RefProblem, dir: &Path) -> weakform::Result<()> {
    let problem = match problem {
        RefProblem::Singlephase => Problem::SinglePhase,
        RefProblem::Buckley => Problem::Buckley,
    };
    let config = ExperimentConfig::defaults(problem, Model::TgnnWf);
    Reference::build(&config)?.write(dir)?;
    println!("wrote {} reference to {}", problem, dir.display());
    Ok(())
}

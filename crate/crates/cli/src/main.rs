use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fas_crb::channel::BlockSpec;
use fas_crb::sweep::{pdf_table, run_sweep, run_validation, write_csv_file, write_pdf_csv, SweepPlan};
use fas_crb::Error;

#[derive(Parser)]
#[command(name = "fas-crb", version, about = "Activity-detection bounds for fluid and fixed-position antennas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every curve of a plan along its axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV; defaults to the plan's `output` field.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Draws per E[1/|g|^2] estimate.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run the plan's Monte-Carlo validation scenarios.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the max-port density of a block spec such as "3x0.97,2x0.5".
    Pdf {
        #[arg(long)]
        blocks: String,
        #[arg(long)]
        tmax: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 201)]
        points: usize,
    },
}

fn output_path(out: Option<PathBuf>, plan: &SweepPlan) -> Result<PathBuf, Error> {
    out.or_else(|| plan.output.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no output path: pass --out or set \"output\" in the plan".into()))
}

fn write_pdf(table: &[(f64, f64)], path: &Path) -> Result<(), Error> {
    let file = std::fs::File::create(path)?;
    write_pdf_csv(table, std::io::BufWriter::new(file))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Sweep { config, out, seed, trials } => {
            let mut plan = SweepPlan::load(&config)?;
            if let Some(s) = seed {
                plan.seed = s;
            }
            if let Some(t) = trials {
                plan.inverse_trials = t;
            }
            let path = output_path(out, &plan)?;
            let rows = run_sweep(&plan)?;
            write_csv_file(&rows, &path)?;
            eprintln!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::Validate { config, out } => {
            let plan = SweepPlan::load(&config)?;
            let path = output_path(out, &plan)?;
            let rows = run_validation(&plan)?;
            write_csv_file(&rows, &path)?;
            eprintln!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::Pdf { blocks, tmax, out, points } => {
            let spec = BlockSpec::parse(&blocks).map_err(|e| Error::Config(e.to_string()))?;
            let table = pdf_table(&spec, tmax, points)?;
            write_pdf(&table, &out)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::NumericalAccuracy(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

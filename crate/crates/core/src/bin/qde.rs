use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qde::cli::{cmd_calibrate, cmd_quantize_tensor, cmd_report, cmd_run, Options};
use qde::Error;

/// Simulated mixed-precision inference for a toy diffusion transformer.
#[derive(Parser)]
#[command(name = "qde", version)]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Diagnostics on stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-layer routing predictors; `--out` is the predictor file.
    Calibrate,
    /// Quantized inference; `--out` is the run directory.
    Run {
        #[arg(long)]
        predictors: PathBuf,
    },
    /// Recompute the summary of a trace file.
    Report { trace: PathBuf },
    /// Quantize a QDT1 tensor; `--out` is the quantized file.
    QuantizeTensor {
        input: PathBuf,
        #[arg(long)]
        format: String,
    },
}

fn required(v: Option<PathBuf>, flag: &str) -> Result<PathBuf, Error> {
    v.ok_or_else(|| Error::Config(format!("missing --{flag}")))
}

fn init_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("QDE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("QDE_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<String, Error> {
    init_threads()?;
    let opts = Options {
        seed: cli.seed,
        verbose: cli.verbose,
    };
    match cli.command {
        Command::Calibrate => cmd_calibrate(
            &required(cli.config, "config")?,
            &required(cli.out, "out")?,
            &opts,
        ),
        Command::Run { predictors } => cmd_run(
            &required(cli.config, "config")?,
            &predictors,
            &required(cli.out, "out")?,
            &opts,
        ),
        Command::Report { trace } => cmd_report(&trace, &opts),
        Command::QuantizeTensor { input, format } => {
            cmd_quantize_tensor(&input, &format, &required(cli.out, "out")?, &opts)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(out) => {
            print!("{out}");
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("qde: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evosynth::{commands, CliError, EXIT_INPUT};

#[derive(Parser)]
#[command(name = "evosynth", version, about = "Evolve progressively sparser saliency networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image/mask dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a lineage described by a TOML configuration.
    Evolve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a dataset directory or the test split of a config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path (defaults to eval.json inside the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a lineage.csv as a table.
    Report {
        #[arg(long)]
        lineage: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    let mut stderr = std::io::stderr();
    match cli.command {
        Command::GenData { seed, count, size, out } => commands::gen_data(seed, count, size, &out, &mut stdout),
        Command::Evolve { config } => commands::evolve(&config, &mut stdout, &mut stderr),
        Command::Eval { checkpoint, data, out } => {
            commands::eval(&checkpoint, &data, out.as_deref(), None, &mut stdout).map(|_| ())
        }
        Command::Report { lineage } => commands::report(&lineage, &mut stdout, &mut stderr),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dadil_cli::pipeline::{cmd_consensus, cmd_eval, cmd_generate, cmd_run, Method};
use dadil_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dadil", version, about = "Decentralized dataset dictionary learning experiments")]
struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic domains as CSV files plus a manifest.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and write a results directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict target labels from a results directory.
    Eval {
        /// Results directory written by `run`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Compute the consensus curve of a results directory.
    Consensus {
        /// Results directory written by `run`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))?;
    }
    match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(&ExperimentConfig::load(&config, seed)?, &out),
        Command::Run { config, out, seed } => {
            let trained = cmd_run(&ExperimentConfig::load(&config, seed)?, &out)?;
            println!("{} messages, {} payload entries", trained.ledger.total_messages, trained.ledger.total_payload);
            Ok(())
        }
        Command::Eval { out, method } => {
            match cmd_eval(&out, method)? {
                Some(acc) => println!("target accuracy ({}): {acc:.4}", method.name()),
                None => println!("predictions written; target has no labels"),
            }
            Ok(())
        }
        Command::Consensus { out } => {
            let curve = cmd_consensus(&out)?;
            if let (Some(first), Some(last)) = (curve.values.first(), curve.values.last()) {
                println!("consensus {first:.6} -> {last:.6} over {} snapshots", curve.values.len());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

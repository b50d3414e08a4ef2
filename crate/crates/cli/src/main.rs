use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use styleblend_cli::commands::{self, TrainArgs};
use styleblend_cli::CliError;

#[derive(Parser)]
#[command(name = "styleblend", version, about = "Face swapping by style-code blending")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a folder of PNG images.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// JSON training schedule; desk-scale defaults when omitted.
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Overrides the schedule's total step count.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Put the identity of SOURCE onto TARGET.
    Swap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print every loss term for one image pair as JSON.
    Losses {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Run the float64 gradient and invariant checks.
    Selfcheck,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let env_seed = commands::parse_seed(std::env::var("STYLEBLEND_SEED").ok().as_deref())?;
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            resume,
            train_config,
            steps,
        } => {
            let args = TrainArgs {
                config,
                data,
                out,
                resume,
                train_config,
                steps,
            };
            let summary = commands::train(&args, env_seed)?;
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
        }
        Command::Swap {
            ckpt,
            source,
            target,
            out,
            seed,
        } => commands::swap(&ckpt, &source, &target, &out, seed.or(env_seed))?,
        Command::Losses { ckpt, source, target } => {
            let report = commands::pair_losses(&ckpt, &source, &target, env_seed)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Selfcheck => {
            let mutation = commands::parse_mutation(std::env::var("STYLEBLEND_SELFCHECK_MUTATION").ok().as_deref())?;
            commands::selfcheck(mutation, &mut std::io::stdout())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

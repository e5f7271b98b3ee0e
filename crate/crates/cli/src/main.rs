use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csdn_cli::commands::{self, BenchArgs, EvalArgs, GenDataArgs, GradcheckArgs, InferArgs, TrainArgs};
use csdn_cli::{CliResult, ExitKind};

/// Two-stream IVUS segmentation: data generation, training, evaluation,
/// inference, benchmarking and gradient checks.
///
/// CSDN_THREADS caps internal parallelism (0 runs single-threaded and
/// deterministic). RUST_LOG controls log verbosity (default: info).
#[derive(Parser, Debug)]
#[command(name = "csdn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData(GenDataArgs),
    /// Train a network and write checkpoints and a log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Segment one sample and draw contour overlays.
    Infer(InferArgs),
    /// Time eval-mode forward passes on one thread.
    Bench(BenchArgs),
    /// Finite-difference check of every layer and the full training graph.
    Gradcheck(GradcheckArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a, &mut out),
        Command::Train(a) => commands::train(a, &mut out),
        Command::Eval(a) => commands::eval(a, &mut out),
        Command::Infer(a) => commands::infer(a, &mut out),
        Command::Bench(a) => commands::bench(a, &mut out),
        Command::Gradcheck(a) => commands::gradcheck(a, &mut out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // clap's message already starts with "error:".
            let _ = e.print();
            return ExitCode::from(ExitKind::Usage as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.code() as u8)
        }
    }
}

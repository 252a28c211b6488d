mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, ExtractArgs, NoisyArgs, PcaArgs, ShiftArgs, SweepArgs, SynthArgs, TrainArgs};

/// Node-based Bayesian neural networks: training, evaluation and
/// robustness analysis.
#[derive(Parser)]
#[command(name = "nodebnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate one checkpoint, or several as an ensemble.
    Eval(EvalArgs),
    /// Train and evaluate every (gamma, seed) pair.
    Sweep(SweepArgs),
    /// Train on partially relabelled data and track both subsets.
    NoisyLabels(NoisyArgs),
    /// Turn latent samples into explicit input corruptions.
    Extract(ExtractArgs),
    /// Layer-wise output shift under a corruption.
    Shift(ShiftArgs),
    /// PCA of one image's layer outputs against its corrupted versions.
    Pca(PcaArgs),
    /// Write synthetic digit images in IDX format.
    SynthData(SynthArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::NoisyLabels(a) => commands::noisy_labels(a),
        Command::Extract(a) => commands::extract(a),
        Command::Shift(a) => commands::shift(a),
        Command::Pca(a) => commands::pca(a),
        Command::SynthData(a) => commands::synth_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

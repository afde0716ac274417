use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "geoedit", version, about = "Training-free geometric image editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy denoiser on the procedural shapes dataset.
    TrainToy(commands::TrainArgs),
    /// Write a procedural shapes dataset to disk.
    GenData(commands::GenDataArgs),
    /// Build a benchmark manifest from a directory of images and masks.
    GenBench(commands::GenBenchArgs),
    /// Apply one geometric edit to an image.
    Edit(commands::EditArgs),
    /// Evaluate a benchmark manifest and write reports.
    Eval(commands::EvalArgs),
    /// Start the HTTP session service.
    Serve(commands::ServeArgs),
}

pub(crate) fn default_checkpoint() -> PathBuf {
    std::env::var_os("GEOEDIT_CHECKPOINT")
        .map(PathBuf::from)
        .unwrap_or_else(geoedit_core::backbone::checkpoint::default_path)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainToy(a) => commands::train_toy(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::GenBench(a) => commands::gen_bench(a),
        Command::Edit(a) => commands::edit(a),
        Command::Eval(a) => commands::eval(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

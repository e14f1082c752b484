//! `avcap`: data generation, training, streaming inference and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "avcap", version, about = "Low-latency audio-visual event captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Flags {
    /// Run configuration file of `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Detector firing threshold F in (0, 1)
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Beam width; 1 decodes greedily
    #[arg(long)]
    pub beam: Option<usize>,
    /// Teacher checkpoint
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Checkpoint to run
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory holding train.tsv and valid.tsv
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training epochs for this command
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Event id for `infer`
    #[arg(long)]
    pub event: Option<String>,
    /// Extra `key=value` config overrides, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset
    GenData(Flags),
    /// Train the offline captioner on full clips
    TrainTeacher(Flags),
    /// Train the streaming captioner and end detector from a teacher
    TrainStudent(Flags),
    /// Stream one event and print its caption and emission time
    Infer(Flags),
    /// Stream a split at one threshold and write a report row
    Eval(Flags),
    /// Stream a split at several thresholds and compare with fixed-ratio truncation
    Sweep(Flags),
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
    let result = match &cli.command {
        Command::GenData(f) => commands::gen_data(f),
        Command::TrainTeacher(f) => commands::train_teacher(f),
        Command::TrainStudent(f) => commands::train_student(f),
        Command::Infer(f) => commands::infer(f),
        Command::Eval(f) => commands::eval(f),
        Command::Sweep(f) => commands::sweep(f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

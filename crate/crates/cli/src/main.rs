//! `scg`: train the toy model, sample with or without self-coherence
//! guidance, profile attention entropy, emit the binding benchmark and score
//! images against it.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::{Seeds, TraceVerbosity};

#[derive(Parser, Debug)]
#[command(
    name = "scg",
    version,
    about = "Self-coherence guidance on a toy diffusion transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy model on the synthetic shapes dataset.
    Train {
        /// Run configuration (TOML).
        #[arg(short, long)]
        config: PathBuf,
        /// Checkpoint to write; defaults to the config's `checkpoint`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample images for a prompt or for every prompt of a benchmark file.
    Sample(SampleArgs),
    /// Per-step, per-layer attention entropy of one token, as CSV.
    Entropy {
        /// Attention dump written by `sample --trace maps`.
        dump: PathBuf,
        /// Token position in the prompt.
        #[arg(long)]
        token: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the structured binding benchmark as JSON Lines.
    Bench(BenchArgs),
    /// Score sampled images against a benchmark file.
    Eval {
        /// Directory holding `<prompt-id>/<seed>.ppm`.
        images: PathBuf,
        /// Benchmark JSON Lines the images were sampled from.
        benchmark: PathBuf,
        /// Run configuration; its dataset section describes the shapes and colors.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Report CSV; defaults to `<images>/report.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
struct SampleArgs {
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Prompt text, e.g. "a red square and a blue disc".
    #[arg(long, conflicts_with = "benchmark", required_unless_present = "benchmark")]
    prompt: Option<String>,
    /// Directory name for this prompt's images; derived from the text if absent.
    #[arg(long, requires = "prompt")]
    prompt_id: Option<String>,
    /// Sample every prompt in this benchmark file instead.
    #[arg(long)]
    benchmark: Option<PathBuf>,
    /// Seeds: `0..3` (inclusive), `1,5,9` or a single number.
    #[arg(long)]
    seeds: Option<Seeds>,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    scg: Switch,
    /// Amplification factor; overrides the config.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    trace: Option<TraceVerbosity>,
}

#[derive(clap::Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchPreset::Paper)]
    preset: BenchPreset,
    /// Run configuration; the `toy` preset reads its dataset section.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    coarse: Option<usize>,
    #[arg(long)]
    fine: Option<usize>,
    #[arg(long)]
    style: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// 64 seeds, 50 steps, c = 4.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchPreset {
    /// The published templates and counts (54 coarse, 56 fine, 48 style).
    Paper,
    /// Published templates with counts from --coarse/--fine/--style.
    Custom,
    /// Coarse prompts over the toy dataset's shapes and colors.
    Toy,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            out,
            epochs,
            seed,
        } => commands::train(&config, out, epochs, seed),
        Command::Sample(args) => commands::sample(args),
        Command::Entropy { dump, token, out } => commands::entropy(&dump, token, out.as_deref()),
        Command::Bench(args) => commands::bench(args),
        Command::Eval {
            images,
            benchmark,
            config,
            out,
        } => commands::eval(&images, &benchmark, config.as_deref(), out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

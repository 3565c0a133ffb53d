//! `spectttra` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bad flags, presets or configuration values (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "spectttra", version, about = "Long-audio synthetic song detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Built-in preset (tiny, full)
    #[arg(long, default_value = "tiny")]
    preset: String,
    /// TOML file overriding the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// alpha, beta, gamma or vit
    #[arg(long)]
    variant: Option<String>,
    /// Use temporal tokens only
    #[arg(long)]
    temporal_only: bool,
    /// Use spectral tokens only
    #[arg(long)]
    spectral_only: bool,
    /// Model input length in frames
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy corpus (WAVs and manifest)
    GenToy {
        #[arg(long)]
        out: PathBuf,
        /// Songs per class
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Song length in seconds
        #[arg(long, default_value_t = 24.0)]
        duration: f64,
        /// Repetition period of the fake-class motif in seconds
        #[arg(long, default_value_t = 4.0)]
        period: f64,
    },
    /// Train from scratch on the train/valid splits of a manifest
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score a checkpoint and write a partitioned metric report
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// train, valid, test or all
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated partition axes
        #[arg(long, default_value = "algorithm,fake_type,singer_seen")]
        axes: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Report CSV path
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-example scores CSV path
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Parameter, FLOP, activation and throughput report
    Profile {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated models (alpha, beta, gamma, vit)
        #[arg(long, default_value = "alpha,beta,gamma,vit")]
        models: String,
        /// Also time forward passes
        #[arg(long)]
        time: bool,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tokenize one audio file with freshly initialized weights
    Tokenize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Token matrix CSV path
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenToy {
            out,
            n,
            seed,
            duration,
            period,
        } => commands::gen_toy(&out, n, seed, duration, period),
        Command::Train {
            cfg,
            manifest,
            out,
            epochs,
            seed,
            batch_size,
            lr,
        } => commands::train(&cfg, manifest, out, epochs, seed, batch_size, lr),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            axes,
            threshold,
            out,
            scores,
        } => commands::eval(&checkpoint, &manifest, &split, &axes, threshold, out, scores),
        Command::Profile {
            cfg,
            models,
            time,
            warmup,
            runs,
            out,
        } => commands::profile(&cfg, &models, time.then_some((warmup, runs)), out),
        Command::Tokenize { cfg, audio, seed, out } => commands::tokenize(&cfg, &audio, seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| {
                c.is::<UsageError>() || matches!(c.downcast_ref::<spectttra::Error>(), Some(spectttra::Error::Config(_)))
            });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

//! `msc`: command-line driver for the macro-management benchmark pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msc_core::dataset::Split;
use msc_core::models::{FeatureSet, Task};
use msc_core::trace::{DifficultyProfile, Matchup};

#[derive(Debug, Parser)]
#[command(name = "msc", version, about = "Macro-management benchmark pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// JSON config file (flags override its values).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Work directory [default: $MSC_WORKDIR or ./msc-work].
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Threads for per-replay work (0 = all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate seeded synthetic traces.
    Gen(GenArgs),
    /// Apply the replay quality filter.
    Filter(FilterArgs),
    /// Parse traces into (observation, action) sequences.
    Parse(ParseArgs),
    /// Balance parsed sequences and extract features.
    Extract(ExtractArgs),
    /// Split sample files 7:1:2 into a dataset.
    Split(SplitArgs),
    /// Train a baseline network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Corpus statistics.
    Stats(StatsArgs),
    /// Run filter, parse, extract and split in order (resumable).
    Run(RunArgs),
    /// Render a report CSV as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Matchup group, e.g. TvT or PvZ.
    #[arg(long)]
    pub matchup: Matchup,
    /// Number of traces.
    #[arg(long)]
    pub n: usize,
    /// RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: <workdir>/traces].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// easy | standard | hard
    #[arg(long, default_value = "standard")]
    pub profile: DifficultyProfile,
    /// Shortest trace length in frames.
    #[arg(long)]
    pub min_frames: Option<u64>,
    /// Longest trace length in frames.
    #[arg(long)]
    pub max_frames: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Trace directory [default: <workdir>/traces].
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Filter manifest [default: <workdir>/reports/filter.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// Trace directory [default: <workdir>/traces].
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Only parse replays accepted by this filter manifest
    /// [default: <workdir>/reports/filter.json when present].
    #[arg(long)]
    pub filter: Option<PathBuf>,
    /// Output directory [default: <workdir>/parsed].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Observation stride in frames.
    #[arg(long)]
    pub n: Option<u64>,
    /// Restrict to one matchup group.
    #[arg(long)]
    pub matchup: Option<Matchup>,
    /// Vocabulary file [default: built-in].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Also write the vocabulary in use to this file.
    #[arg(long)]
    pub write_vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Trace directory [default: <workdir>/traces].
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Parsed directory [default: <workdir>/parsed].
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output directory [default: <workdir>/samples].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for null-action balancing.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also extract 13×64×64 spatial tensors.
    #[arg(long)]
    pub spatial: bool,
    /// Normalization caps file.
    #[arg(long)]
    pub caps: Option<PathBuf>,
    /// Vocabulary file [default: built-in].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Sample directory [default: <workdir>/samples].
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Dataset directory [default: <workdir>/dataset].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Split shuffle seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Assign the two perspectives of a replay independently.
    #[arg(long)]
    pub no_pair_lock: bool,
    /// Matchup recorded in the manifest.
    #[arg(long)]
    pub matchup: Option<Matchup>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// gse (global state evaluation) | bop (build order prediction)
    #[arg(long)]
    pub task: Option<Task>,
    /// global | both
    #[arg(long)]
    pub features: Option<FeatureSet>,
    /// Dataset manifest [default: <workdir>/dataset/manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Layer width factor.
    #[arg(long)]
    pub width: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initialization and shuffling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sequences per batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Truncated backprop window in steps.
    #[arg(long)]
    pub tbptt_len: Option<usize>,
    /// Initial learning rate, decayed every epoch.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Checkpoint directory [default: <workdir>/ckpt].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Expected task of the checkpoint.
    #[arg(long)]
    pub task: Option<Task>,
    /// Checkpoint directory or .mscw file [default: <workdir>/ckpt].
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// train | val | test
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Dataset manifest [default: <workdir>/dataset/manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Report directory [default: <workdir>/reports].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Write the partially observed enemy density per game decile.
    #[arg(long)]
    pub po_density: bool,
    /// Trace directory [default: <workdir>/traces].
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Report directory [default: <workdir>/reports].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sampling stride in frames for the density.
    #[arg(long)]
    pub n: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Trace directory [default: <workdir>/traces].
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Seed for balancing and splitting.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Observation stride in frames.
    #[arg(long)]
    pub n: Option<u64>,
    /// Restrict to one matchup group.
    #[arg(long)]
    pub matchup: Option<Matchup>,
    /// Also extract 13×64×64 spatial tensors.
    #[arg(long)]
    pub spatial: bool,
    /// Assign the two perspectives of a replay independently.
    #[arg(long)]
    pub no_pair_lock: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// phase_accuracy.csv, po_density.csv or curves.csv
    #[arg(long = "in")]
    pub input: PathBuf,
    /// SVG output [default: input with .svg extension].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Chart title.
    #[arg(long)]
    pub title: Option<String>,
    /// Column plotted for training curves.
    #[arg(long, default_value = "accuracy")]
    pub metric: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // Help and version exit 0, usage errors exit 2.
        Err(e) => e.exit(),
    };
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Multi-scale speaking-style TTS pipeline: corpus generation, staged
/// training, synthesis, evaluation and figures.
#[derive(Debug, Parser)]
#[command(name = "msstyle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.base_lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Checkpoint directory, e.g. `runs/x/ckpt/stage3`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus manifest.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Test,
    Train,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SourceArg {
    Predicted,
    Extracted,
    /// Ground truth against itself.
    Copy,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic audiobook corpus.
    GenCorpus {
        #[command(flatten)]
        config: ConfigArgs,
        /// Generation seed; defaults to the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the directory of `corpus.manifest`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run training stages.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Partial checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory; overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize one sentence's mel spectrogram.
    Synthesize {
        #[command(flatten)]
        model: ModelArgs,
        /// `DOCUMENT:INDEX`
        #[arg(long)]
        utterance: String,
        /// Take styles from the ground-truth mel instead of the predictor.
        #[arg(long)]
        use_extractor: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Program run as `PROGRAM MEL_FILE WAV_FILE` after the mel is written.
        #[arg(long, value_name = "PROGRAM")]
        invert: Option<PathBuf>,
    },
    /// Synthesize a whole document sentence by sentence.
    SynthesizeParagraph {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        document: String,
        /// Output directory for the combined and per-sentence mels.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_name = "PROGRAM")]
        invert: Option<PathBuf>,
    },
    /// Objective metrics over a split.
    Evaluate {
        /// Not needed with `--source copy`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "predicted")]
        source: SourceArg,
        /// Report stem; `.jsonl` and `.txt` are written.
        #[arg(long)]
        out: PathBuf,
    },
    /// Inter-sentence attention weights over sampled windows.
    InspectAttention {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TensorFile for the samples × window matrix.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a figure as PNG.
    Plot {
        #[command(subcommand)]
        figure: PlotCommand,
    },
    /// Write style embeddings of every utterance as TensorFiles.
    ExportStyles {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "extracted")]
        source: SourceArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum PlotCommand {
    /// Mel spectrogram and pitch contour of a synthesized sentence against
    /// the recording.
    PitchContour {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        utterance: String,
        #[arg(long)]
        use_extractor: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention heatmap, from a saved matrix or computed from a checkpoint.
    Attention {
        #[arg(long, conflicts_with_all = ["ckpt", "corpus"])]
        input: Option<PathBuf>,
        #[arg(long, requires = "corpus")]
        ckpt: Option<PathBuf>,
        #[arg(long, requires = "ckpt")]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Training loss curve from a run's log.
    Losses {
        /// `train_log.jsonl` or the run directory holding it.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

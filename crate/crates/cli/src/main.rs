use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use brst::decode::{DecodeMethod, DEFAULT_BEAM, DEFAULT_CTC_NBEST, DEFAULT_RESCORE_WEIGHT};
use brst::presets::ExperimentPreset;

mod commands;

#[derive(Parser)]
#[command(name = "brst", version, about = "Block-reusing CTC/attention speech Transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Decode a manifest with one of the four decoders.
    Decode(DecodeArgs),
    /// Score a hypotheses file against manifest references.
    Evaluate(EvaluateArgs),
    /// CKA similarity reports between models or across blocks.
    Analyze(AnalyzeArgs),
    /// Per-component parameter counts.
    CountParams(CountArgs),
    /// Write the synthetic toy corpus.
    GenCorpus(GenCorpusArgs),
    /// Initialize a model from a compatible checkpoint.
    WarmStart(WarmStartArgs),
}

fn parse_preset(s: &str) -> Result<ExperimentPreset, String> {
    s.parse().map_err(|e: brst::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<DecodeMethod, String> {
    s.parse().map_err(|e: brst::Error| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_preset)]
    preset: ExperimentPreset,
    /// Flat key = value file overriding preset fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Vocabulary file, one token per line after <blank> <sos> <eos>.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: DecodeMethod,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    beam: usize,
    #[arg(long, default_value_t = DEFAULT_CTC_NBEST)]
    nbest: usize,
    #[arg(long, default_value_t = DEFAULT_RESCORE_WEIGHT)]
    rescore_weight: f64,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    length_bonus: f64,
    /// Hypotheses file; a CER summary is written next to it as `<out>.cer.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Hypotheses file written by `decode`.
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AnalyzeMode {
    Horizontal,
    Vertical,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Second model for horizontal mode.
    #[arg(long)]
    checkpoint_b: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    mode: AnalyzeMode,
    #[arg(long, default_value_t = 2000)]
    max_rows: usize,
    #[arg(long, default_value_t = brst::analysis::DEFAULT_LINEARITY_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long, value_parser = parse_preset, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    preset: Option<ExperimentPreset>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// CSV destination; printed table only when unset.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 100)]
    num_utterances: usize,
    #[arg(long, default_value_t = 30)]
    vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WarmStartArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = parse_preset)]
    preset: ExperimentPreset,
    /// Seed for the parameters that are not copied.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn init_threads() {
    let Ok(raw) = std::env::var("BRST_THREADS") else {
        return;
    };
    match raw.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("BRST_THREADS ignored: {e}");
            }
        }
        _ => log::warn!("BRST_THREADS={raw:?} is not a positive integer; ignored"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Decode(a) => commands::decode(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::CountParams(a) => commands::count_params(a),
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::WarmStart(a) => commands::warm_start(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

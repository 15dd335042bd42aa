//! `thmseq` command-line interface.
//!
//! Exit codes: 0 success, 1 invalid flags or input data, 2 runtime failure.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use thmseq::corpus::{GeomMode, Modality};
use thmseq::font_encoder::CellKind;

#[derive(Parser, Debug)]
#[command(name = "thmseq", version, about = "Theorem/proof paragraph classification")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Flags every command accepts.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Input corpus, one paragraph record per JSONL line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// JSON object of flag values keyed by long flag name; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with Markov labels.
    Synth(SynthArgs),
    /// Validate a corpus and print a summary.
    IngestCheck(IngestArgs),
    /// Train the font-sequence encoder.
    TrainFont(TrainFontArgs),
    /// Train a late-fusion classifier over frozen features.
    TrainFusion(TrainFusionArgs),
    /// Train a paragraph-sequence model over frozen features.
    TrainSeq(TrainSeqArgs),
    /// Score a checkpoint or baseline against a labelled corpus.
    Eval(EvalArgs),
    /// Write one predicted label per paragraph, in input order.
    Predict(PredictArgs),
    /// Render collected run results as a modality × approach grid.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of documents.
    #[arg(long)]
    pub docs: Option<usize>,
    /// Mean paragraphs per document.
    #[arg(long)]
    pub mean_len: Option<usize>,
    /// Modalities that receive class-conditional embeddings.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<Modality>>,
    /// Distance between class prototypes.
    #[arg(long)]
    pub separation: Option<f64>,
    /// Gaussian noise on embeddings.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Chance that a paragraph's first word comes from another class.
    #[arg(long)]
    pub word_noise: Option<f64>,
    /// Exact basic,theorem,proof,overlap totals instead of a Markov chain.
    #[arg(long, value_delimiter = ',')]
    pub class_counts: Option<Vec<usize>>,
    /// 4×4 row-stochastic matrix as JSON.
    #[arg(long)]
    pub transition: Option<String>,
    /// Initial label distribution, four comma-separated values.
    #[arg(long, value_delimiter = ',')]
    pub initial: Option<Vec<f64>>,
    /// Share of documents written to val.jsonl.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct IngestArgs {
    #[command(flatten)]
    pub common: Common,
}

/// Optimisation and data-split flags shared by the training commands.
#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Validation corpus; without it `--val-fraction` of the documents are held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Documents per optimizer step.
    #[arg(long, default_value_t = 8)]
    pub batch_docs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs without a validation mean-F1 gain before stopping.
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainFontArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value = "lstm", value_parser = parse_cell)]
    pub cell: CellKind,
    /// Largest font vocabulary, PAD and UNK included.
    #[arg(long, default_value_t = 4033)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 364)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1000)]
    pub maxlen: usize,
    /// Also write the corpus with font embeddings replaced by encoder features.
    #[arg(long)]
    pub emit_corpus: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainFusionArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Fusion configuration: concat, dock_concat, fusion768, fusion1280,
    /// fusion2304, bilinear, bilinear_gated, gmu, xattn, multihead, embrace,
    /// embrace_weighted, fusion2304_768, xattn_fusion768, gmu_fusion768.
    #[arg(long, default_value = "gmu")]
    pub mechanism: String,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqKind {
    Sw,
    Crf,
    Hat,
    Para,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeoArg {
    Four,
    Six,
}

impl From<GeoArg> for GeomMode {
    fn from(g: GeoArg) -> Self {
        match g {
            GeoArg::Four => GeomMode::Four,
            GeoArg::Six => GeomMode::Six,
        }
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainSeqArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum, default_value = "sw")]
    pub model: SeqKind,
    /// Feature modality fed to the model.
    #[arg(long, default_value = "font")]
    pub features: Modality,
    /// Window size (SW) or segment size (HAT).
    #[arg(long, default_value_t = 16)]
    pub window: usize,
    /// Longer documents are split into chunks of this many paragraphs.
    #[arg(long, default_value_t = 1024)]
    pub maxlen: usize,
    /// Drop the geometry columns.
    #[arg(long)]
    pub no_geo: bool,
    #[arg(long, value_enum, default_value = "four")]
    pub geo: GeoArg,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    /// Encoder blocks (SW).
    #[arg(long, default_value_t = 1)]
    pub blocks: usize,
    /// SWE+CWE repetitions (HAT).
    #[arg(long, default_value_t = 2)]
    pub reps: usize,
    #[arg(long, default_value_t = 1.5)]
    pub ff_mult: f64,
    /// Hidden width of the per-paragraph model.
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Dummy,
    Topk,
}

/// Where predictions come from.
#[derive(Args, Debug, Clone)]
pub struct Source {
    #[arg(long, conflicts_with = "baseline")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Training corpus for the top-k baseline.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Lexicon size per class for the top-k baseline.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: Source,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: Source,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory searched recursively for run records; defaults to `--out`.
    #[arg(long)]
    pub runs: Option<PathBuf>,
}

fn parse_cell(s: &str) -> Result<CellKind, String> {
    s.parse().map_err(|e: thmseq::Error| e.to_string())
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Invalid(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<thmseq::Error> for Failure {
    fn from(e: thmseq::Error) -> Self {
        use thmseq::Error as E;
        match e {
            E::Io(_) | E::Checkpoint(_) | E::Divergence { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

/// Turns the `--config` object into flags placed right after the subcommand
/// name, so flags given on the command line override them.
fn expand_config(argv: &[String]) -> Result<Vec<String>, Failure> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv.to_vec());
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::Invalid(format!("config {path}: {e}")))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("config {path}: {e}")))?;
    let Value::Object(map) = value else {
        return Err(Failure::Invalid(format!("config {path}: expected a JSON object")));
    };
    let mut flags = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => flags.push(flag),
            Value::String(s) => flags.extend([flag, s]),
            Value::Number(n) => flags.extend([flag, n.to_string()]),
            Value::Array(items) if items.iter().all(|x| x.is_number() || x.is_string()) => {
                let joined: Vec<String> = items
                    .iter()
                    .map(|x| x.as_str().map_or_else(|| x.to_string(), str::to_string))
                    .collect();
                flags.extend([flag, joined.join(",")]);
            }
            other => flags.extend([flag, other.to_string()]),
        }
    }
    // the first non-flag token after the program name is the subcommand
    let at = argv
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-'))
        .map_or(argv.len(), |p| p + 2);
    let mut out = argv[..at].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Runs one invocation and returns its exit code.
pub fn run(argv: Vec<String>) -> u8 {
    let argv = match expand_config(&argv) {
        Ok(a) => a,
        Err(f) => {
            eprintln!("error: {f}");
            return f.code();
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::IngestCheck(a) => commands::ingest_check(&a),
        Command::TrainFont(a) => commands::train_font(&a),
        Command::TrainFusion(a) => commands::train_fusion(&a),
        Command::TrainSeq(a) => commands::train_seq(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Report(a) => report::report(&a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args().collect()))
}

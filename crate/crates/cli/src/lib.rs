//! The `clue` command-line tool.
//!
//! [`run`] is the whole program; the binary only forwards the process
//! arguments and standard streams to it.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use manifest::render_manifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "clue",
    version,
    about = "Referential-ambiguity toolkit: attention maps, probe, dialog loop"
)]
pub struct Cli {
    /// Directory for the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Print diagnostics to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(untagged)]
pub enum Command {
    /// Generate synthetic maps, scenes or dialogs.
    GenData(GenDataArgs),
    /// Run the toy decoder on a prompt and write its attention as CAT1.
    GenAttn(GenAttnArgs),
    /// Turn a CAT1 tensor into an ambiguity map.
    Aggregate(AggregateArgs),
    /// Train the CNN probe on a labelled map file.
    TrainProbe(TrainProbeArgs),
    /// Score one map with a trained probe.
    Detect(DetectArgs),
    /// Run the ask-or-ground loop for one request.
    Dialog(DialogArgs),
    /// Turn a dialog corpus into prefix/target training pairs.
    Linearize(LinearizeArgs),
    /// Acc@0.5 of a generator on a dialog corpus.
    EvalGuesser(EvalGuesserArgs),
    /// Probe quality per toy-decoder layer.
    SweepLayers(SweepLayersArgs),
    /// Check a CAT1 file.
    Validate(ValidateArgs),
    /// Summarise any file this tool writes.
    Inspect(InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GenData(_) => "gen-data",
            Self::GenAttn(_) => "gen-attn",
            Self::Aggregate(_) => "aggregate",
            Self::TrainProbe(_) => "train-probe",
            Self::Detect(_) => "detect",
            Self::Dialog(_) => "dialog",
            Self::Linearize(_) => "linearize",
            Self::EvalGuesser(_) => "eval-guesser",
            Self::SweepLayers(_) => "sweep-layers",
            Self::Validate(_) => "validate",
            Self::Inspect(_) => "inspect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Maps,
    Scenes,
    Dialogs,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: DataKind,
    /// Number of maps, or of scenes for scenes and dialogs.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub grid: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Additive noise amplitude for maps.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Output file. Maps also get a `<out>.labels` sidecar.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct DecoderArgs {
    #[arg(long, default_value_t = 4)]
    pub num_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    /// Image grid side; the image block has grid² tokens.
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct GenAttnArgs {
    /// Prefix text, e.g. `<image>clarify Get the apple`.
    #[arg(long)]
    pub text: String,
    #[arg(long, default_value = "")]
    pub suffix: String,
    /// Block to read; defaults to half depth.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub decoder: DecoderArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AggregateArgs {
    #[arg(long)]
    pub attn: PathBuf,
    /// Grid side; inferred from the image token count when omitted.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long, default_value_t = clue_core::aggregate::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also print the map as text art on stderr.
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainProbeArgs {
    #[arg(long)]
    pub maps: PathBuf,
    /// Label file; defaults to `<maps>.labels`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, default_value_t = clue_core::probe::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Minimum Chebyshev distance between reported peaks.
    #[arg(long, default_value_t = 4)]
    pub min_separation: usize,
    #[arg(long, default_value_t = 0.1)]
    pub min_height: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct DialogArgs {
    /// The initial user request.
    #[arg(long)]
    pub request: String,
    /// Read replies line by line from standard input.
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    pub interactive: bool,
    /// Replay replies from a file, one per line.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Replay generations from a file, one per line, instead of the toy decoder.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long, default_value_t = clue_core::dialog::DEFAULT_K_MAX)]
    pub k_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub max_new_tokens: usize,
    #[command(flatten)]
    pub decoder: DecoderArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct LinearizeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GuesserKind {
    /// Echo the gold box (sanity check).
    Gold,
    /// Greedy toy decoder.
    Toy,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalGuesserArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// One generation per corpus record, one per line.
    #[arg(long, conflicts_with = "generator")]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GuesserKind::Toy)]
    pub generator: GuesserKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub max_new_tokens: usize,
    #[command(flatten)]
    pub decoder: DecoderArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepLayersArgs {
    /// Comma-separated, strictly increasing block indices.
    #[arg(long, value_delimiter = ',', required = true)]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Scenes to generate; each yields one or two instructions.
    #[arg(long, default_value_t = 200)]
    pub scenes: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[command(flatten)]
    pub decoder: DecoderArgs,
    /// Also write the rows as JSON lines.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub attn: PathBuf,
    /// Also require every row to sum to one.
    #[arg(long)]
    pub softmax_rows: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    pub file: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{rendered}");
            } else {
                let _ = write!(stdout, "{rendered}");
            }
            return code;
        }
    };
    match commands::dispatch(&cli, stdin, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            EXIT_DOMAIN
        }
    }
}

//! Argument definitions and command dispatch for the `protomatch` binary.

pub mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use protomatch_core::{Error, GridSpec, Pathway, Preset, Result, RunConfig};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_INVARIANT: u8 = 4;

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InstanceTooSmall { .. } => EXIT_INFEASIBLE,
        Error::Invariant(_) | Error::FrozenParameters => EXIT_INVARIANT,
        _ => EXIT_INPUT,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "protomatch",
    version,
    about = "Question-driven prototype matching for visual QA"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Match question prototypes against image patches.
    Match(MatchArgs),
    /// Generate a planted-evidence synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Report answer accuracy over a manifest.
    Eval(EvalArgs),
    /// Score explanation alignment against evidence boxes.
    Vlas(VlasArgs),
    /// Draw the ground truth and top matched patches as SVG.
    Explain(ExplainArgs),
    /// Compare the greedy matcher against brute-force references.
    Bench(BenchArgs),
}

/// Hyperparameters shared by every command. Precedence, lowest first:
/// preset, `--config`, individual flags.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Base configuration.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    /// JSON object of overrides, inline or as a file path.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub vlas_k: Option<usize>,
    #[arg(long, env = "PROTOMATCH_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Image and patch size as HxWxP.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<GridSpec>,
}

fn parse_preset(s: &str) -> Result<Preset> {
    s.parse()
}

fn parse_grid(s: &str) -> Result<GridSpec> {
    s.parse()
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::preset(self.preset.unwrap_or_default());
        if let Some(src) = &self.config {
            let text = if src.trim_start().starts_with('{') {
                src.clone()
            } else {
                std::fs::read_to_string(src).map_err(|e| Error::Io {
                    path: src.into(),
                    source: e,
                })?
            };
            cfg = cfg.with_overrides(&text)?;
        }
        macro_rules! flag {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { cfg.$f = v; })*};
        }
        flag!(m, k, r, theta, vlas_k, seed, epochs, lr, batch_size, grid);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PathwayArg {
    Text,
    Coord,
}

impl From<PathwayArg> for Pathway {
    fn from(p: PathwayArg) -> Self {
        match p {
            PathwayArg::Text => Pathway::Text,
            PathwayArg::Coord => Pathway::Coord,
        }
    }
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// PVF1 feature file (single-example mode).
    #[arg(long, requires = "question", conflicts_with = "manifest")]
    pub features: Option<PathBuf>,
    /// PVT1 question file (single-example mode).
    #[arg(long, requires = "features")]
    pub question: Option<PathBuf>,
    /// Dataset manifest; one output file per example.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Trained checkpoint directory; seeded initial weights otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output JSON file (single mode) or directory (manifest mode).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Number of training examples.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Number of test examples.
    #[arg(long, default_value_t = 50)]
    pub n_test: usize,
    #[arg(long, value_enum, default_value_t = PathwayArg::Text)]
    pub pathway: PathwayArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint directory; the metric log is written inside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write the result as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VlasArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of `<qa_id>.json` match files written by `match`.
    #[arg(long, conflicts_with = "checkpoint")]
    pub matches: Option<PathBuf>,
    /// Compute matches with this checkpoint instead.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Count a hit only when IoU strictly exceeds theta.
    #[arg(long)]
    pub strict: bool,
    /// Rank whole prototypes instead of individual patches.
    #[arg(long)]
    pub per_prototype: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Position of the example in the manifest.
    #[arg(long, default_value_t = 0, conflicts_with = "qa_id")]
    pub index: usize,
    #[arg(long)]
    pub qa_id: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of matched patches to draw.
    #[arg(long, default_value_t = 3)]
    pub top: usize,
    /// SVG path; the JSON sidecar goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 1000)]
    pub instances: usize,
    /// Largest grid, in patches.
    #[arg(long, default_value_t = 16)]
    pub max_patches: usize,
    #[arg(long, default_value_t = 3)]
    pub max_k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs one command and returns the text to print on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Match(a) => commands::cmd_match(&a),
        Command::Synth(a) => commands::cmd_synth(&a),
        Command::Train(a) => commands::cmd_train(&a),
        Command::Eval(a) => commands::cmd_eval(&a),
        Command::Vlas(a) => commands::cmd_vlas(&a),
        Command::Explain(a) => commands::cmd_explain(&a),
        Command::Bench(a) => commands::cmd_bench(&a),
    }
}

/// Parses `args` (without the program name) and runs the command.
pub fn run_args<I, S>(args: I) -> Result<String>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("protomatch"))
        .chain(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::Argument(e.to_string()))?;
    run(cli)
}

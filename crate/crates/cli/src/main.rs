//! Single executable exposing the stream-detection pipeline end to end:
//! synthetic trace generation, annotation, slicing, tokenization, patch
//! embedding, model training and prediction, evaluation, cost accounting,
//! and ablation sweeps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/processing error.

mod ops;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use settings::{PatchArgs, SliceArgs, TokenArgs};

#[derive(Debug, Parser)]
#[command(name = "nvguard", version, about = "NVMe-stream ransomware detection pipeline")]
pub struct Cli {
    /// Master seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Plain-text key=value file whose entries override the flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic traces (one stream, or the fixed bench suite).
    Synth(SynthCmd),
    /// Annotate a trace with overlap and timing attributes.
    Annotate(AnnotateCmd),
    /// Cut a trace into slices and print the slice table.
    Slice(SliceCmd),
    /// Emit command tokens, one frame per line.
    Tokenize(TokenizeCmd),
    /// Emit patch embeddings, one patch per line.
    Embed(EmbedCmd),
    /// Train a detector on a directory of traces.
    Train(TrainCmd),
    /// Score traces with a trained model, one probability per slice.
    Predict(PredictCmd),
    /// Cross-validate slice predictions into a metrics report, or emit
    /// family-held-out fold assignments.
    Eval(EvalCmd),
    /// Analytic parameter/multiplication/throughput accounting.
    Hwcost(HwcostCmd),
    /// Train/evaluate a sweep of feature-ablated or context-varied models.
    Ablate(AblateCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Clt,
    Plt,
    Rf,
    Deftpunk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    /// Reduced bench-scale architecture.
    Desk,
    /// Full-size production architecture.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HwFormatArg {
    Text,
    Csv,
}

#[derive(Debug, Args)]
pub struct SynthCmd {
    /// Workload spec file (key=value); defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output trace file, or suite directory with --suite.
    #[arg(long)]
    pub out: PathBuf,
    /// Generate the full bench suite into OUT/train and OUT/eval.
    #[arg(long)]
    pub suite: bool,
    #[arg(long, default_value_t = 36)]
    pub benign: usize,
    #[arg(long, default_value_t = 30)]
    pub ransomware: usize,
    #[arg(long, default_value_t = 3200)]
    pub commands: usize,
    /// Use the suite's pinned seed instead of --seed.
    #[arg(long)]
    pub default_seed: bool,
    /// Generate an infected stream instead of a benign one.
    #[arg(long = "infected")]
    pub ransomware_kind: bool,
    /// Family tag for an infected stream.
    #[arg(long)]
    pub family: Option<String>,
}

#[derive(Debug, Args)]
pub struct AnnotateCmd {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SliceCmd {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub slice: SliceArgs,
}

#[derive(Debug, Args)]
pub struct TokenizeCmd {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub slice: SliceArgs,
    #[command(flatten)]
    pub token: TokenArgs,
}

#[derive(Debug, Args)]
pub struct EmbedCmd {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the fractional label columns (leave them zero).
    #[arg(long)]
    pub unlabeled: bool,
    #[command(flatten)]
    pub slice: SliceArgs,
    #[command(flatten)]
    pub patch: PatchArgs,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    /// Trace file or directory of traces to train on.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: PresetArg,
    #[command(flatten)]
    pub slice: SliceArgs,
    #[command(flatten)]
    pub token: TokenArgs,
    #[command(flatten)]
    pub patch: PatchArgs,
}

#[derive(Debug, Args)]
pub struct PredictCmd {
    /// Trained model file (sequence checkpoint or tree model).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub slice: SliceArgs,
    #[command(flatten)]
    pub token: TokenArgs,
    #[command(flatten)]
    pub patch: PatchArgs,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    /// Slice predictions CSV from `predict`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Metrics report destination (stdout when omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    /// Also write the detection-volume CDF table here.
    #[arg(long)]
    pub mbd_cdf: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub repeats: usize,
    /// Quantile reported for the detection-volume statistic.
    #[arg(long, default_value_t = 0.75)]
    pub quantile: f64,
    /// Calibration budget: one false alarm per this many GB of benign
    /// traffic.
    #[arg(long, default_value_t = 50.0)]
    pub gb_per_alarm: f64,
    /// Let trailing partial slices participate in calibration.
    #[arg(long)]
    pub include_partial: bool,
    /// Emit family-held-out folds instead of cross-validating.
    #[arg(long)]
    pub group_folds: Option<usize>,
    /// Directory of `.meta` sidecars supplying the family tags.
    #[arg(long)]
    pub meta_dir: Option<PathBuf>,
    #[arg(long)]
    pub folds_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HwcostCmd {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    #[arg(long, default_value_t = nvguard::hwcost::DEFAULT_MULTIPLIERS)]
    pub multipliers: u64,
    #[arg(long, default_value_t = nvguard::hwcost::DEFAULT_CLOCK_HZ)]
    pub clock: u64,
    #[arg(long, value_enum, default_value = "text")]
    pub format: HwFormatArg,
}

#[derive(Debug, Args)]
pub struct AblateCmd {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    /// Training traces.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out traces for scoring.
    #[arg(long)]
    pub eval_data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    /// Feature subsets to drop, one variant each (default: full sweep).
    #[arg(long, value_delimiter = ',')]
    pub drops: Vec<String>,
    /// Frame sizes to sweep instead of feature drops.
    #[arg(long, value_delimiter = ',')]
    pub contexts: Vec<usize>,
    #[command(flatten)]
    pub slice: SliceArgs,
    #[command(flatten)]
    pub token: TokenArgs,
    #[command(flatten)]
    pub patch: PatchArgs,
}

/// Append `--key=value` arguments parsed from the `--config` file, so its
/// entries take precedence over flags given on the command line.
fn expand_config(mut args: Vec<String>) -> Result<Vec<String>, String> {
    let path = args
        .iter()
        .position(|a| a == "--config")
        .and_then(|i| args.get(i + 1).cloned())
        .or_else(|| {
            args.iter()
                .find_map(|a| a.strip_prefix("--config=").map(str::to_string))
        });
    if let Some(path) = path {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| format!("cannot read config {path}: {e}"))?;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format!("config {path} line {}: expected key=value", idx + 1));
            };
            let flag = key.trim().replace('_', "-");
            if value.is_empty() {
                args.push(format!("--{flag}"));
            } else {
                args.push(format!("--{flag}={}", value.trim()));
            }
        }
    }
    Ok(args)
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(cmd) => ops::run_synth(cmd, cli.seed),
        Command::Annotate(cmd) => ops::run_annotate(cmd),
        Command::Slice(cmd) => ops::run_slice(cmd),
        Command::Tokenize(cmd) => ops::run_tokenize(cmd),
        Command::Embed(cmd) => ops::run_embed(cmd),
        Command::Train(cmd) => ops::run_train(cmd, cli.seed),
        Command::Predict(cmd) => ops::run_predict(cmd),
        Command::Eval(cmd) => ops::run_eval(cmd, cli.seed),
        Command::Hwcost(cmd) => ops::run_hwcost(cmd),
        Command::Ablate(cmd) => ops::run_ablate(cmd, cli.seed),
    }
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let args = match expand_config(raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    // Full resolved configuration, for reproducibility.
    eprintln!("run: {cli:?}");
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

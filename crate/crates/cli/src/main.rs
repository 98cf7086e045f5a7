mod commands;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use headshare_core::{HeadRef, MatchFunction};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "headshare", version, about = "Head-wise attention weight sharing for transformer checkpoints")]
struct Cli {
    /// Seed for every random draw (toy generation, batch sampling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "HEADSHARE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded toy checkpoint and token corpus.
    GenToy(GenToyArgs),
    /// Pairwise weight-similarity scores for every pair of heads.
    Analyze(AnalyzeArgs),
    /// Select head pairs with DirectShare (or load a plan) and tie them.
    Share(ShareArgs),
    /// Train with the weight-similarity regularizer before tying.
    Postshare(PostshareArgs),
    /// Dump per-head attention maps for a set of inputs.
    Trace(TraceArgs),
    /// Agreement between weight-based and attention-based head matching.
    Degree(DegreeArgs),
    /// Layer-wise and head-wise attention-map similarity matrices.
    Heatmap(HeatmapArgs),
    /// Parameter accounting for a share plan.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenToy(_) => "gen-toy",
            Command::Analyze(_) => "analyze",
            Command::Share(_) => "share",
            Command::Postshare(_) => "postshare",
            Command::Trace(_) => "trace",
            Command::Degree(_) => "degree",
            Command::Heatmap(_) => "heatmap",
            Command::Report(_) => "report",
        }
    }
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("{e}"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("AlphaOutOfRange: ratio {v} is outside [0, 1]"));
    }
    Ok(v)
}

fn parse_match(s: &str) -> Result<MatchFunction, String> {
    s.parse().map_err(|e: headshare_core::Error| e.to_string())
}

/// `KEEP:REPLACE` with heads written `layer.head`, e.g. `0.1:2.0`.
fn parse_plant(s: &str) -> Result<(HeadRef, HeadRef), String> {
    let head = |t: &str| -> Result<HeadRef, String> {
        let (l, h) = t.split_once('.').ok_or_else(|| format!("expected layer.head, got `{t}`"))?;
        Ok(HeadRef::new(
            l.parse().map_err(|e| format!("{e}"))?,
            h.parse().map_err(|e| format!("{e}"))?,
        ))
    };
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected KEEP:REPLACE, got `{s}`"))?;
    Ok((head(a)?, head(b)?))
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum NormArg {
    Frobenius,
    Squared,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum Preset {
    #[value(name = "llama2-7b")]
    #[serde(rename = "llama2-7b")]
    Llama2_7b,
    #[value(name = "llama2-13b")]
    #[serde(rename = "llama2-13b")]
    Llama2_13b,
}

#[derive(Debug, Args, Serialize)]
struct GenToyArgs {
    /// Checkpoint path; the corpus goes next to it as `<stem>.corpus.txt`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    head_dim: usize,
    #[arg(long, default_value_t = 16)]
    ffn_dim: usize,
    #[arg(long, default_value_t = 12)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    max_seq_len: usize,
    /// Number of corpus sequences.
    #[arg(long, default_value_t = 64)]
    sequences: usize,
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    dtype: DtypeArg,
    /// Plant an exact copy of a head, `KEEP:REPLACE` as `layer.head:layer.head`.
    /// Planting also silences the residual writes of all but the last layer.
    #[arg(long, value_parser = parse_plant)]
    plant: Vec<(HeadRef, HeadRef)>,
}

#[derive(Debug, Args, Serialize)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "match", default_value = "qk", value_parser = parse_match)]
    match_function: MatchFunction,
    /// CSV with columns `layer_i,head_i,layer_j,head_j,score`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    allow_extra: bool,
}

#[derive(Debug, Args, Serialize)]
struct ShareArgs {
    #[arg(long)]
    model: PathBuf,
    /// Fraction of all heads to tie.
    #[arg(long, value_parser = parse_ratio, required_unless_present = "plan", conflicts_with = "plan")]
    ratio: Option<f64>,
    #[arg(long = "match", default_value = "qk", value_parser = parse_match)]
    match_function: MatchFunction,
    /// Also tie whole FFN layers, this fraction of the layer count.
    #[arg(long, value_parser = parse_ratio, conflicts_with = "plan")]
    ffn_ratio: Option<f64>,
    /// Apply an existing plan instead of selecting one.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Tied checkpoint; the plan is written as `<stem>.plan.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    allow_extra: bool,
}

#[derive(Debug, Args, Serialize)]
struct PostshareArgs {
    #[arg(long)]
    model: PathBuf,
    /// Newline-delimited token-id sequences.
    #[arg(long)]
    corpus: PathBuf,
    /// Pairs to pull together; selected with DirectShare from `--ratio` if absent.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, value_parser = parse_ratio, required_unless_present = "plan", conflicts_with = "plan")]
    ratio: Option<f64>,
    #[arg(long = "match", default_value = "qk", value_parser = parse_match)]
    match_function: MatchFunction,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Write `<stem>.step<N>.hws` every N steps (0 = never).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long, value_enum, default_value_t = NormArg::Frobenius)]
    reg_norm: NormArg,
    /// Add the output-projection blocks to the regularizer (ablation).
    #[arg(long)]
    reg_include_output: bool,
    /// Trained checkpoint; losses go to `<stem>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TraceArgs {
    #[arg(long)]
    model: PathBuf,
    /// Newline-delimited token-id sequences.
    #[arg(long)]
    inputs: PathBuf,
    /// Only trace these sequence indices (default: all).
    #[arg(long)]
    index: Vec<usize>,
    /// CSV with columns `sequence,layer,head,row,col,weight`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct DegreeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    /// k = round(ratio * total heads).
    #[arg(long, value_parser = parse_ratio)]
    ratio: f64,
    #[arg(long = "match", default_value = "qk", value_parser = parse_match)]
    match_function: MatchFunction,
    /// CSV of both top-k sets; the full report goes to `<stem>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct HeatmapArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    /// Output prefix: writes `<prefix>.layers.csv` and `<prefix>.heads.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    /// Published model shape to account for.
    #[arg(long, value_enum, conflicts_with = "model", required_unless_present = "model")]
    preset: Option<Preset>,
    /// Read the config (and default base total) from a checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, conflicts_with = "ratio")]
    plan: Option<PathBuf>,
    #[arg(long, value_parser = parse_ratio, required_unless_present = "plan")]
    ratio: Option<f64>,
    #[arg(long, value_parser = parse_ratio, conflicts_with = "plan")]
    ffn_ratio: Option<f64>,
    /// Parameter count the ratio is taken against.
    #[arg(long)]
    base_total: Option<u64>,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
}

/// Clap failures become one `error: <Code>: message` line and exit code 2.
fn usage_error(err: clap::Error) -> ExitCode {
    match err.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = err.print();
            return if err.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
        _ => {}
    }
    let rendered = err.render().to_string();
    let first = rendered
        .lines()
        .next()
        .unwrap_or("invalid arguments")
        .trim_start_matches("error: ")
        .to_string();
    let source = std::error::Error::source(&err).map(|s| s.to_string());
    match source.as_deref().and_then(|s| s.split_once(": ")) {
        Some((code, msg)) if !code.is_empty() && code.chars().all(|c| c.is_ascii_alphanumeric()) => {
            eprintln!("error: {code}: {msg}");
        }
        _ => eprintln!("error: UsageError: {first}"),
    }
    ExitCode::from(2)
}

/// Name of the failing core error if there is one, else a generic code.
fn error_code(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<headshare_core::Error>() {
            return e.code();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "Io";
        }
        if cause.downcast_ref::<csv::Error>().is_some() {
            return "Io";
        }
    }
    "Error"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => return usage_error(err),
    };
    let result = match cli.threads {
        Some(0) => Err(anyhow::Error::from(headshare_core::Error::InvalidArgument(
            "--threads must be at least 1".into(),
        ))),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(anyhow::Error::from)
            .and_then(|pool| pool.install(|| commands::run(&cli.command, cli.seed))),
        None => commands::run(&cli.command, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error: {}: {msg}", error_code(&err));
            ExitCode::from(1)
        }
    }
}

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod error;
mod inputs;

use config::FileConfig;
use error::{CliResult, Failure};

/// MOS aggregation, saliency maps, benchmark evaluation and the annotation
/// server for generated 3D face media.
#[derive(Debug, Parser)]
#[command(name = "g3dhf", version, propagate_version = true)]
pub struct Cli {
    /// TOML file with defaults; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for item-level work (default: logical cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Screen subjects and aggregate ratings into a MOS table.
    Mos(MosArgs),
    /// Blur fixation annotations into saliency map files.
    Saliency(SaliencyArgs),
    /// SRCC/PLCC/KRCC of predicted scores against a MOS table.
    EvalScores(EvalScoresArgs),
    /// AUC/NSS/CC/SIM/KLD of predicted maps against fixation ground truth.
    EvalSaliency(EvalSaliencyArgs),
    /// Accuracy of predicted distortion categories.
    EvalQa(EvalQaArgs),
    /// Stratified k-fold split of a manifest.
    Split(SplitArgs),
    /// Cross-validated benchmark report over one or more predictors.
    Report(ReportArgs),
    /// Run the annotation HTTP service, or export its store.
    Serve(ServeArgs),
    /// Print the fixed question templates for language-model predictors.
    Prompts(PromptsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScreenArg {
    /// No outlier screening (constant raters are still dropped).
    None,
    /// Reject subjects with too many ratings beyond k standard deviations.
    Stddev,
    /// Kurtosis-aware two-sided screening (BT.500 Annex 2 style).
    Itu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Raw,
    MaxOne,
    SumOne,
    Z,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MapFormat {
    /// 8-bit binary PGM (max-normalized for display).
    Pgm,
    /// Lossless little-endian f32 `.g3ds` file.
    Raw,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NssStdArg {
    Population,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KldDirArg {
    /// KL(ground truth || prediction).
    GtPred,
    /// KL(prediction || ground truth).
    PredGt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum QaModeArg {
    /// Predicted set must equal the true set.
    Exact,
    /// Intersection over union of the sets.
    Jaccard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormatArg {
    Md,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DurabilityArg {
    Fsync,
    Buffered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PromptKindArg {
    Quality,
    Authenticity,
    Distortion,
}

#[derive(Debug, Args)]
pub struct MosArgs {
    /// Ratings JSONL file(s).
    #[arg(long = "in", required = true, value_name = "FILE")]
    pub input: Vec<PathBuf>,
    /// MOS CSV to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Rejection report JSON (default: next to --out with .rejections.json).
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Subject screening policy [default: itu].
    #[arg(long, value_enum)]
    pub screen: Option<ScreenArg>,
    /// Outlier distance in standard deviations for --screen stddev [default: 2].
    #[arg(long = "outlier-k")]
    pub outlier_k: Option<f64>,
    /// Largest tolerated outlier fraction for --screen stddev [default: 0.05].
    #[arg(long)]
    pub max_outlier_fraction: Option<f64>,
    /// (P+Q)/N rejection threshold for --screen itu [default: 0.05].
    #[arg(long)]
    pub reject_fraction: Option<f64>,
    /// |P-Q|/(P+Q) balance threshold for --screen itu [default: 0.3].
    #[arg(long)]
    pub balance: Option<f64>,
    /// Manifest used to flag ratings of unknown items.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    /// Fixation annotations JSON (a list). Required.
    #[arg(long, value_name = "FILE")]
    pub fixations: Option<PathBuf>,
    /// Directory for the map files, one per item. Required.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Gaussian standard deviation in pixels of the annotated image [default: 5].
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Normalization of the written maps.
    #[arg(long, value_enum, default_value = "max-one")]
    pub norm: NormArg,
    /// Which files to write per item.
    #[arg(long, value_enum, default_value = "both")]
    pub format: MapFormat,
}

#[derive(Debug, Args)]
pub struct EvalScoresArgs {
    /// MOS CSV written by `g3dhf mos`.
    #[arg(long, value_name = "FILE")]
    pub mos: PathBuf,
    /// Predictions CSV `item_id,quality_score,authenticity_score`.
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    /// Split JSON; without it all items are scored together.
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    /// Full JSON report with per-fold values.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Predictor name recorded in the JSON report.
    #[arg(long, default_value = "predictor")]
    pub name: String,
}

#[derive(Debug, Args, Clone)]
pub struct MetricFlags {
    /// Standard deviation used by NSS [default: population].
    #[arg(long, value_enum)]
    pub nss_std: Option<NssStdArg>,
    /// KLD direction [default: gt-pred].
    #[arg(long, value_enum)]
    pub kld_direction: Option<KldDirArg>,
    /// Epsilon added to the KLD denominator [default: 1e-7].
    #[arg(long)]
    pub kld_eps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalSaliencyArgs {
    /// Ground-truth fixation annotations JSON.
    #[arg(long, value_name = "FILE")]
    pub fixations: PathBuf,
    /// Directory of predicted `<item_id>.g3ds` maps.
    #[arg(long, value_name = "DIR")]
    pub pred_dir: PathBuf,
    /// Blur for the ground-truth maps, in pixels [default: 5].
    #[arg(long)]
    pub sigma: Option<f64>,
    #[command(flatten)]
    pub metrics: MetricFlags,
    /// Per-item metric CSV (default: stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Also write per-item loss components and their weighted sum.
    #[arg(long, value_name = "FILE")]
    pub loss_out: Option<PathBuf>,
    #[command(flatten)]
    pub loss: LossFlags,
}

#[derive(Debug, Args, Clone)]
pub struct LossFlags {
    /// Weight of the L1 term [default: 1].
    #[arg(long)]
    pub w1: Option<f64>,
    /// Weight of the 1-CC term [default: 1].
    #[arg(long)]
    pub w2: Option<f64>,
    /// Weight of the KL term [default: 1].
    #[arg(long)]
    pub w3: Option<f64>,
    /// Weight of the BCE term [default: 1].
    #[arg(long)]
    pub w4: Option<f64>,
    /// Clipping epsilon of the KL and BCE terms [default: 1e-7].
    #[arg(long)]
    pub loss_eps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalQaArgs {
    /// Ground-truth distortion labels JSON (a list; several annotators allowed).
    #[arg(long, value_name = "FILE")]
    pub labels: PathBuf,
    /// Predicted categories JSON `[{"item_id", "categories"}]`.
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    /// Scoring rule [default: exact].
    #[arg(long, value_enum)]
    pub mode: Option<QaModeArg>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset manifest whose model tags stratify the folds.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Number of folds [default: 5].
    #[arg(long)]
    pub k: Option<usize>,
    /// Shuffle seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Split JSON to write (default: stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// MOS CSV written by `g3dhf mos`.
    #[arg(long, value_name = "FILE")]
    pub mos: PathBuf,
    /// Split JSON written by `g3dhf split`.
    #[arg(long, value_name = "FILE")]
    pub split: PathBuf,
    /// Score predictions as NAME=FILE; repeat for several predictors.
    #[arg(long = "pred", required = true, value_name = "NAME=FILE")]
    pub preds: Vec<String>,
    /// Ground-truth fixations, enabling the saliency columns.
    #[arg(long, value_name = "FILE")]
    pub fixations: Option<PathBuf>,
    /// Predicted map directory as NAME=DIR.
    #[arg(long = "pred-maps", value_name = "NAME=DIR")]
    pub pred_maps: Vec<String>,
    /// Ground-truth labels, enabling the QA column.
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// Predicted categories as NAME=FILE.
    #[arg(long = "pred-labels", value_name = "NAME=FILE")]
    pub pred_labels: Vec<String>,
    /// Blur for the ground-truth maps [default: 5].
    #[arg(long)]
    pub sigma: Option<f64>,
    #[command(flatten)]
    pub metrics: MetricFlags,
    /// QA scoring rule [default: exact].
    #[arg(long, value_enum)]
    pub qa_mode: Option<QaModeArg>,
    /// Output table format.
    #[arg(long, value_enum, default_value = "md")]
    pub format: ReportFormatArg,
    /// Report file (default: stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Dataset manifest listing the items to annotate.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Directory holding the event log and snapshot [default: ./annotations].
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Listen address [default: 127.0.0.1].
    #[arg(long)]
    pub host: Option<String>,
    /// Listen port [default: 8080].
    #[arg(long)]
    pub port: Option<u16>,
    /// Shared bearer token required by every route but /healthz.
    #[arg(long)]
    pub token: Option<String>,
    /// Directory served under /media/ (default: the manifest's directory).
    #[arg(long, value_name = "DIR")]
    pub media_root: Option<PathBuf>,
    /// Export ratings from sessions that have not reached the end.
    #[arg(long)]
    pub include_incomplete: bool,
    /// fsync every appended record, or leave flushing to the OS.
    #[arg(long, value_enum, default_value = "fsync")]
    pub durability: DurabilityArg,
    /// Snapshot and trim the log after this many records.
    #[arg(long, value_name = "N")]
    pub compact_every: Option<u64>,
    /// Write ratings.jsonl, fixations.json and labels.json here and exit.
    #[arg(long, value_name = "DIR")]
    pub export_to: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    /// Print only this template.
    #[arg(long, value_enum)]
    pub kind: Option<PromptKindArg>,
    /// Emit a JSON object keyed by template name.
    #[arg(long)]
    pub json: bool,
}

fn init_pool(jobs: Option<usize>) -> CliResult {
    if let Some(n) = jobs {
        if n == 0 {
            return error::invalid("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    init_pool(cli.jobs.or(cfg.jobs))?;
    match cli.command {
        Command::Mos(a) => commands::mos(a, &cfg),
        Command::Saliency(a) => commands::saliency(a, &cfg),
        Command::EvalScores(a) => commands::eval_scores(a),
        Command::EvalSaliency(a) => commands::eval_saliency(a, &cfg),
        Command::EvalQa(a) => commands::eval_qa(a, &cfg),
        Command::Split(a) => commands::split(a, &cfg),
        Command::Report(a) => commands::report(a, &cfg),
        Command::Serve(a) => commands::serve(a, &cfg),
        Command::Prompts(a) => commands::prompts(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("G3DHF_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}

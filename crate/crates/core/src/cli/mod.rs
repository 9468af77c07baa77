//! The `mcfuse` command line.
//!
//! Every flag can also be set through an environment variable prefixed
//! `MCFUSE_`. Each run writes `run_manifest.<subcommand>.json` into the
//! output directory; `mcfuse replay <manifest>` reruns it from that file
//! alone. Errors go to stderr as one JSON line; exit codes are 0 on
//! success, 1 on runtime errors and 2 on usage errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backends::store::write_atomic;
use crate::backends::{
    parse_selection, BackendKind, ImageStore, ScoringMode, StubCaptioner, StubGenerator, StubJointEmbedder,
    StubTextScorer, StubVisualEncoder, TextScorer, ToyConfig, ToyModel, VisualEncoder, Vocabulary,
};
use crate::backends::stub::{DEFAULT_EVAL_RESOLUTION, DEFAULT_STEPS, DEFAULT_TRAIN_RESOLUTION};
use crate::dataset::io::read_vqa_jsonl;
use crate::dataset::{
    build_dataset, BuildConfig, Imaginer, NameNeutralizer, VQAPair, DEFAULT_NAME_LEXICON, GENERATION_RETRIES,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    attention_erasure, batch_accuracy, helpful_harmful, load_benchmark, relevance_report, BenchmarkFormat,
    BenchmarkSpec, HelpfulHarmfulTable, REPORT_SCHEMA_VERSION,
};
use crate::inference::{parse_grid, sweep_lambda, EnsembleConfig, ItemFailure, Predictor, TextChannel};
use crate::scoring::ScoreVector;
use crate::text::digest_hex;
use crate::training::{
    load_checkpoint, prepare_items, save_checkpoint, train, Channel, ChannelWeights, Checkpoint, RankingConfig, TrainConfig,
    DEFAULT_MARGIN,
};

pub mod plot;

/// Seed used when none is given.
pub const DEFAULT_SEED: u64 = 0;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Parser, Serialize, Deserialize)]
#[command(
    name = "mcfuse",
    version,
    about = "Multiple-choice reasoning with language-model and image-text matching scores"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GlobalArgs {
    #[arg(long, global = true, env = "MCFUSE_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Backend selection as `kind=name`; repeatable or comma separated.
    #[arg(long = "backend", global = true, env = "MCFUSE_BACKEND", value_delimiter = ',')]
    pub backends: Vec<String>,
    #[arg(long, global = true, env = "MCFUSE_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(
        long,
        global = true,
        env = "MCFUSE_LOG_LEVEL",
        default_value = "warn",
        value_parser = ["off", "error", "warn", "info", "debug", "trace"]
    )]
    pub log_level: String,
    /// Print the resolved configuration as JSON and exit without running.
    #[arg(long, global = true, env = "MCFUSE_ECHO_CONFIG")]
    #[serde(default)]
    pub echo_config: bool,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Build the synthetic visual QA dataset from triples and VCR records.
    BuildDataset(BuildArgs),
    /// Write per-choice LM, ITM and joint scores.
    Score(ScoreArgs),
    /// Train the adapters with the ranking objective.
    Train(TrainArgs),
    /// Predict with the ensemble and report accuracy.
    Eval(EvalArgs),
    /// Accuracy over a grid of ensemble weights.
    Sweep(SweepArgs),
    /// Helpful/harmful, relevance or attention analysis.
    Analyze(AnalyzeArgs),
    /// Render a sweep curve or analysis report as SVG.
    Visualize(VisualizeArgs),
    /// Rerun a command from its run manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::BuildDataset(_) => "build-dataset",
            Command::Score(_) => "score",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Analyze(_) => "analyze",
            Command::Visualize(_) => "visualize",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BuildArgs {
    /// Knowledge triples, one JSON object per line.
    #[arg(long, env = "MCFUSE_BUILD_KB")]
    pub kb: Option<PathBuf>,
    /// VCR-style records, one JSON object per line.
    #[arg(long, env = "MCFUSE_BUILD_VCR")]
    pub vcr: Option<PathBuf>,
    #[arg(long, env = "MCFUSE_BUILD_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "MCFUSE_BUILD_RESOLUTION", default_value_t = DEFAULT_TRAIN_RESOLUTION)]
    pub resolution: u32,
    #[arg(long, env = "MCFUSE_BUILD_STEPS", default_value_t = DEFAULT_STEPS)]
    pub steps: u32,
    #[arg(long, env = "MCFUSE_BUILD_DEV_FRACTION", default_value_t = 0.1)]
    pub dev_fraction: f64,
    #[arg(long, env = "MCFUSE_BUILD_WORKERS", default_value_t = 4)]
    pub workers: usize,
    /// Relation template table (JSON); the built-in table when omitted.
    #[arg(long, env = "MCFUSE_BUILD_TEMPLATES")]
    pub templates: Option<PathBuf>,
}

/// Where the text scorer's weights come from.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Trained adapter checkpoint; fresh adapters when omitted.
    #[arg(long, env = "MCFUSE_ADAPTERS")]
    pub adapters: Option<PathBuf>,
    /// `masked` or `autoregressive`; defaults to the checkpoint's mode.
    #[arg(long = "scoring-mode", env = "MCFUSE_SCORING_MODE")]
    pub mode: Option<ScoringMode>,
    /// Resolution for images generated on demand.
    #[arg(long, env = "MCFUSE_RESOLUTION", default_value_t = DEFAULT_EVAL_RESOLUTION)]
    pub resolution: u32,
}

/// How to read a data file.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Dataset file, or a directory holding the split file.
    #[arg(long, env = "MCFUSE_DATA")]
    pub data: PathBuf,
    /// Public benchmark format; the dataset's own JSON Lines when omitted.
    #[arg(long, env = "MCFUSE_FORMAT")]
    pub format: Option<BenchmarkFormat>,
    /// Choices per item for benchmark formats.
    #[arg(long, env = "MCFUSE_N_CHOICES")]
    pub n_choices: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScoreArgs {
    /// Dataset file (or directory, using dev.jsonl).
    #[arg(long, env = "MCFUSE_SCORE_INPUT")]
    pub input: PathBuf,
    #[arg(long, env = "MCFUSE_SCORE_OUT")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset directory (train.jsonl) or file.
    #[arg(long, env = "MCFUSE_TRAIN_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "MCFUSE_TRAIN_MARGIN", default_value_t = DEFAULT_MARGIN)]
    pub margin: f64,
    #[arg(long, env = "MCFUSE_TRAIN_BATCH", default_value_t = 32)]
    pub batch: usize,
    #[arg(long, env = "MCFUSE_TRAIN_LR", default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, env = "MCFUSE_TRAIN_EPOCHS", default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, env = "MCFUSE_TRAIN_MAX_STEPS")]
    pub max_steps: Option<usize>,
    #[arg(long, env = "MCFUSE_TRAIN_CHANNELS", value_delimiter = ',', default_value = "lm,itm,joint")]
    pub channels: Vec<Channel>,
    #[arg(long, env = "MCFUSE_TRAIN_WEIGHT_LM", default_value_t = 1.0)]
    pub weight_lm: f64,
    #[arg(long, env = "MCFUSE_TRAIN_WEIGHT_ITM", default_value_t = 1.0)]
    pub weight_itm: f64,
    #[arg(long, env = "MCFUSE_TRAIN_WEIGHT_JOINT", default_value_t = 1.0)]
    pub weight_joint: f64,
    #[arg(long = "scoring-mode", env = "MCFUSE_TRAIN_SCORING_MODE", default_value = "masked")]
    pub mode: ScoringMode,
    #[arg(long, env = "MCFUSE_TRAIN_REDUCTION_FACTOR", default_value_t = 16)]
    pub reduction_factor: usize,
    /// Checkpoint path; `<out-dir>/adapters.ckpt` when omitted.
    #[arg(long, env = "MCFUSE_TRAIN_OUT")]
    pub out: Option<PathBuf>,
    /// Training report path; `<out-dir>/train_report.json` when omitted.
    #[arg(long, env = "MCFUSE_TRAIN_REPORT")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, env = "MCFUSE_EVAL_LAMBDA", default_value_t = 0.35)]
    pub lambda: f64,
    #[arg(long, env = "MCFUSE_EVAL_TEXT_CHANNEL", default_value = "lm")]
    pub text_channel: TextChannel,
    /// Predictions file; `<out-dir>/predictions.jsonl` when omitted.
    #[arg(long, env = "MCFUSE_EVAL_PREDICTIONS")]
    pub predictions: Option<PathBuf>,
    /// Report path; `<out-dir>/eval_report.json` when omitted.
    #[arg(long, env = "MCFUSE_EVAL_REPORT")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// `start:end:step` or a comma-separated list.
    #[arg(long, env = "MCFUSE_SWEEP_GRID", default_value = "0:1:0.05")]
    pub grid: String,
    #[arg(long, env = "MCFUSE_SWEEP_TEXT_CHANNEL", default_value = "lm")]
    pub text_channel: TextChannel,
    /// Curve CSV; `<out-dir>/sweep_curve.csv` when omitted.
    #[arg(long, env = "MCFUSE_SWEEP_OUT")]
    pub out: Option<PathBuf>,
    /// Summary JSON; `<out-dir>/sweep.json` when omitted.
    #[arg(long, env = "MCFUSE_SWEEP_REPORT")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalysisMode {
    HelpfulHarmful,
    Relevance,
    Attention,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    #[arg(long = "mode", env = "MCFUSE_ANALYZE_MODE", value_enum)]
    pub analysis: AnalysisMode,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, env = "MCFUSE_ANALYZE_LAMBDA", default_value_t = 0.35)]
    pub lambda: f64,
    #[arg(long, env = "MCFUSE_ANALYZE_TEXT_CHANNEL", default_value = "lm")]
    pub text_channel: TextChannel,
    /// Patches to erase in attention mode.
    #[arg(long, env = "MCFUSE_ANALYZE_ERASE", default_value_t = 100)]
    pub erase: usize,
    /// Only the first N items in attention mode.
    #[arg(long, env = "MCFUSE_ANALYZE_LIMIT")]
    pub limit: Option<usize>,
    /// Row label; the data file's stem when omitted.
    #[arg(long, env = "MCFUSE_ANALYZE_BENCHMARK")]
    pub benchmark: Option<String>,
    /// Report path; `<out-dir>/analysis_<mode>.json` when omitted.
    #[arg(long, env = "MCFUSE_ANALYZE_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct VisualizeArgs {
    /// Sweep curve CSV or analysis report JSON.
    #[arg(long, env = "MCFUSE_VISUALIZE_INPUT")]
    pub input: PathBuf,
    /// SVG path; `<out-dir>/<input stem>.svg` when omitted.
    #[arg(long, env = "MCFUSE_VISUALIZE_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub subcommand: String,
    pub tool_version: String,
    pub seed: u64,
    /// Fully resolved invocation, every default materialized.
    pub config: serde_json::Value,
    /// SHA-256 of every input file.
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix_ms: u128,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn path_for(out_dir: &Path, subcommand: &str) -> PathBuf {
        out_dir.join(format!("run_manifest.{subcommand}.json"))
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Writes a line to stdout; a closed pipe is not an error.
fn say(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn emit_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": kind, "message": message }));
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    say(e.render().to_string().trim_end());
                    0
                }
                _ => {
                    emit_error("UsageError", e.render().to_string().trim());
                    2
                }
            }
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.global.log_level)
        .target(env_logger::Target::Stderr)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            emit_error("UsageError", &m);
            2
        }
        Err(CliError::Runtime(e)) => {
            emit_error(e.kind(), &e.to_string());
            1
        }
    }
}

/// Runs a parsed invocation and writes its run manifest.
pub fn execute(cli: &Cli) -> CliResult<()> {
    if let Command::Replay(r) = &cli.command {
        let text = std::fs::read_to_string(&r.manifest).map_err(|e| Error::storage(&r.manifest, e))?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::schema(Some(e.line()), e.to_string()))?;
        let original: Cli = serde_json::from_value(manifest.config)
            .map_err(|e| Error::schema(None, format!("manifest config: {e}")))?;
        if matches!(original.command, Command::Replay(_)) {
            return Err(CliError::Usage("a manifest cannot replay another replay".into()));
        }
        return execute(&original);
    }

    let started = Instant::now();
    let started_unix_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let mut cli = resolve_defaults(cli);
    if cli.global.echo_config {
        cli.global.echo_config = false;
        say(&serde_json::to_string_pretty(&cli).map_err(Error::from)?);
        return Ok(());
    }
    let g = &cli.global;
    std::fs::create_dir_all(&g.out_dir).map_err(|e| Error::storage(&g.out_dir, e))?;
    let backends = Backends::parse(&g.backends)?;
    let mut run = Run::default();
    match &cli.command {
        Command::BuildDataset(a) => cmd_build(g, &backends, a, &mut run)?,
        Command::Score(a) => cmd_score(g, &backends, a, &mut run)?,
        Command::Train(a) => cmd_train(g, &backends, a, &mut run)?,
        Command::Eval(a) => cmd_eval(g, &backends, a, &mut run)?,
        Command::Sweep(a) => cmd_sweep(g, &backends, a, &mut run)?,
        Command::Analyze(a) => cmd_analyze(g, &backends, a, &mut run)?,
        Command::Visualize(a) => cmd_visualize(g, a, &mut run)?,
        Command::Replay(_) => unreachable!("handled above"),
    }
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        subcommand: cli.command.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: g.seed,
        config: serde_json::to_value(&cli).map_err(Error::from)?,
        input_digests: run.inputs,
        outputs: run.outputs.iter().map(|p| p.display().to_string()).collect(),
        started_unix_ms,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let path = RunManifest::path_for(&g.out_dir, cli.command.name());
    write_atomic(&path, &serde_json::to_vec_pretty(&manifest).map_err(Error::from)?)?;
    if let Some(summary) = run.summary {
        say(&summary.to_string());
    }
    Ok(())
}

/// Fills every optional output path so the manifest records it.
fn resolve_defaults(cli: &Cli) -> Cli {
    let mut cli = cli.clone();
    let dir = cli.global.out_dir.clone();
    let fill = |p: &mut Option<PathBuf>, name: &str| {
        if p.is_none() {
            *p = Some(dir.join(name));
        }
    };
    match &mut cli.command {
        Command::Score(a) => fill(&mut a.out, "scores.jsonl"),
        Command::Train(a) => {
            fill(&mut a.out, "adapters.ckpt");
            fill(&mut a.report, "train_report.json");
        }
        Command::Eval(a) => {
            fill(&mut a.predictions, "predictions.jsonl");
            fill(&mut a.report, "eval_report.json");
        }
        Command::Sweep(a) => {
            fill(&mut a.out, "sweep_curve.csv");
            fill(&mut a.report, "sweep.json");
        }
        Command::Analyze(a) => {
            let name = match a.analysis {
                AnalysisMode::HelpfulHarmful => "analysis_helpful_harmful.json",
                AnalysisMode::Relevance => "analysis_relevance.json",
                AnalysisMode::Attention => "analysis_attention.json",
            };
            fill(&mut a.out, name);
        }
        Command::Visualize(a) => {
            let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot").to_string();
            fill(&mut a.out, &format!("{stem}.svg"));
        }
        Command::BuildDataset(_) | Command::Replay(_) => {}
    }
    cli
}

#[derive(Default)]
struct Run {
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    summary: Option<serde_json::Value>,
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
        self.inputs.insert(path.display().to_string(), digest_hex(&bytes));
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
struct Backends {
    text_scorer: String,
}

impl Backends {
    fn parse(list: &[String]) -> CliResult<Self> {
        let mut chosen: BTreeMap<BackendKind, String> = BTreeMap::new();
        chosen.insert(BackendKind::TextScorer, "toy".into());
        for kind in [BackendKind::VisualEncoder, BackendKind::T2iGenerator, BackendKind::Captioner] {
            chosen.insert(kind, "stub".into());
        }
        for spec in list.iter().filter(|s| !s.trim().is_empty()) {
            let (kind, name) = parse_selection(spec).map_err(|e| CliError::Usage(e.to_string()))?;
            let available: &[&str] = match kind {
                BackendKind::TextScorer => &["toy", "stub"],
                _ => &["stub"],
            };
            if !available.contains(&name.as_str()) {
                return Err(CliError::Usage(format!(
                    "{kind} backend `{name}` is not available; choose one of {}",
                    available.join(", ")
                )));
            }
            chosen.insert(kind, name);
        }
        Ok(Self {
            text_scorer: chosen[&BackendKind::TextScorer].clone(),
        })
    }
}

struct LoadedModel {
    text: Box<dyn TextScorer>,
    visual: StubVisualEncoder,
    mode: ScoringMode,
}

fn load_model(g: &GlobalArgs, backends: &Backends, m: &ModelArgs, run: &mut Run) -> CliResult<LoadedModel> {
    if backends.text_scorer == "stub" {
        if m.adapters.is_some() {
            return Err(CliError::Usage("--adapters needs the toy text scorer".into()));
        }
        return Ok(LoadedModel {
            text: Box::new(StubTextScorer::default()),
            visual: StubVisualEncoder::default(),
            mode: m.mode.unwrap_or_default(),
        });
    }
    match &m.adapters {
        Some(path) => {
            run.input(path)?;
            let ck = load_checkpoint(path)?;
            let visual = match &ck.header.visual_encoder {
                Some(d) => StubVisualEncoder::from_descriptor(d)?,
                None => StubVisualEncoder::default(),
            };
            Ok(LoadedModel {
                mode: m.mode.unwrap_or(ck.header.mode),
                text: Box::new(ck.into_model()?),
                visual,
            })
        }
        None => {
            let cfg = ToyConfig {
                seed: g.seed,
                ..ToyConfig::default()
            };
            Ok(LoadedModel {
                text: Box::new(ToyModel::new(cfg, Vocabulary::default())?),
                visual: StubVisualEncoder::default(),
                mode: m.mode.unwrap_or_default(),
            })
        }
    }
}

/// Owns what an [`Imaginer`] borrows.
struct ImageSource {
    generator: StubGenerator,
    store: ImageStore,
    neutralizer: NameNeutralizer,
    resolution: u32,
}

impl ImageSource {
    fn new(g: &GlobalArgs, resolution: u32) -> Result<Self> {
        Ok(Self {
            generator: StubGenerator::new(g.seed),
            store: ImageStore::open(g.out_dir.join("images"))?,
            neutralizer: NameNeutralizer::new(DEFAULT_NAME_LEXICON),
            resolution,
        })
    }

    fn imaginer(&self) -> Imaginer<'_> {
        Imaginer {
            generator: &self.generator,
            store: &self.store,
            neutralizer: &self.neutralizer,
            resolution: self.resolution,
            steps: DEFAULT_STEPS,
            retries: GENERATION_RETRIES,
        }
    }
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

fn resolve_data(path: &Path, split_file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(split_file)
    } else {
        path.to_path_buf()
    }
}

fn load_pairs(data: &DataArgs, split_file: &str, run: &mut Run) -> CliResult<(PathBuf, Vec<VQAPair>)> {
    let path = resolve_data(&data.data, split_file);
    run.input(&path)?;
    let pairs = match data.format {
        None => read_vqa_jsonl(&path)?,
        Some(format) => {
            let n_choices = data
                .n_choices
                .ok_or_else(|| CliError::Usage("--format needs --n-choices".into()))?;
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("benchmark");
            let spec = BenchmarkSpec::new(name, format, n_choices, &path);
            load_benchmark(&spec)?.into_iter().map(VQAPair::text_only).collect()
        }
    };
    if pairs.is_empty() {
        return Err(Error::invalid(format!("{} holds no items", path.display())).into());
    }
    Ok((path, pairs))
}

fn failure(id: &str, e: &Error) -> ItemFailure {
    ItemFailure {
        id: id.to_string(),
        kind: e.kind().to_string(),
        message: e.to_string(),
    }
}

/// Attaches generated images to pairs that lack one; pairs whose
/// generation fails are returned as failures.
fn ensure_images(pairs: Vec<VQAPair>, source: &ImageSource) -> (Vec<VQAPair>, Vec<ItemFailure>) {
    let imaginer = source.imaginer();
    let mut ok = Vec::with_capacity(pairs.len());
    let mut failed = Vec::new();
    for mut p in pairs {
        if p.image.is_none() {
            match imaginer.imagine(&p.qa.question) {
                Ok(img) => p.image = Some(img),
                Err(e) => {
                    failed.push(failure(&p.qa.id, &e));
                    continue;
                }
            }
        }
        ok.push(p);
    }
    (ok, failed)
}

fn write_json(path: &Path, value: &impl Serialize, run: &mut Run) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    run.output(path);
    Ok(())
}

fn write_text(path: &Path, text: &str, run: &mut Run) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    write_atomic(path, text.as_bytes())?;
    run.output(path);
    Ok(())
}

fn required(p: &Option<PathBuf>) -> &Path {
    p.as_deref().expect("filled by resolve_defaults")
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_build(g: &GlobalArgs, _backends: &Backends, a: &BuildArgs, run: &mut Run) -> CliResult<()> {
    if a.kb.is_none() && a.vcr.is_none() {
        return Err(CliError::Usage("build-dataset needs --kb, --vcr or both".into()));
    }
    let mut cfg = BuildConfig::new(&a.out);
    cfg.kb = a.kb.clone();
    cfg.vcr = a.vcr.clone();
    cfg.resolution = a.resolution;
    cfg.steps = a.steps;
    cfg.seed = g.seed;
    cfg.dev_fraction = a.dev_fraction;
    cfg.workers = a.workers.max(1);
    if let Some(t) = &a.templates {
        run.input(t)?;
        cfg.templates = crate::dataset::templates::TemplateTable::load(t)?;
    }
    for p in [&a.kb, &a.vcr].into_iter().flatten() {
        run.input(p)?;
    }
    let generator = StubGenerator::new(g.seed);
    let captioner = StubCaptioner::default();
    let out = build_dataset(&cfg, &generator, &captioner)?;
    for f in ["train.jsonl", "dev.jsonl", "manifest.json"] {
        run.output(&a.out.join(f));
    }
    run.summary = Some(json!({
        "train_pairs": out.train.totals.qa_pairs,
        "dev_pairs": out.dev.totals.qa_pairs,
        "skipped": out.skipped,
        "generated_images": out.generated_images,
    }));
    Ok(())
}

/// Seventeen significant digits in exponent form.
fn fmt_scores(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
    format!("[{}]", parts.join(","))
}

pub fn score_line(id: &str, sv: &ScoreVector) -> String {
    let (itm, joint) = if sv.itm_usable {
        (fmt_scores(&sv.itm), fmt_scores(&sv.joint))
    } else {
        ("null".to_string(), "null".to_string())
    };
    format!(
        "{{\"id\":{},\"lm\":{},\"itm\":{itm},\"joint\":{joint}}}",
        serde_json::Value::String(id.to_string()),
        fmt_scores(&sv.lm)
    )
}

fn cmd_score(g: &GlobalArgs, backends: &Backends, a: &ScoreArgs, run: &mut Run) -> CliResult<()> {
    let data = DataArgs {
        data: a.input.clone(),
        format: None,
        n_choices: None,
    };
    let (_, pairs) = load_pairs(&data, "dev.jsonl", run)?;
    let model = load_model(g, backends, &a.model, run)?;
    let source = ImageSource::new(g, a.model.resolution)?;
    let predictor = Predictor {
        text: model.text.as_ref(),
        visual: &model.visual,
        imaginer: Some(source.imaginer()),
        mode: model.mode,
        config: EnsembleConfig::new(0.0)?,
    };
    let mut out = String::new();
    let mut failures = Vec::new();
    for (p, r) in pairs.iter().zip(predictor.score_all(&pairs, true)) {
        match r {
            Ok(sv) => {
                out.push_str(&score_line(&p.qa.id, &sv));
                out.push('\n');
            }
            Err(e) => failures.push(failure(&p.qa.id, &e)),
        }
    }
    write_text(required(&a.out), &out, run)?;
    run.summary = Some(json!({ "scored": pairs.len() - failures.len(), "failures": failures }));
    Ok(())
}

fn cmd_train(g: &GlobalArgs, backends: &Backends, a: &TrainArgs, run: &mut Run) -> CliResult<()> {
    if backends.text_scorer != "toy" {
        return Err(CliError::Usage("train needs the toy text scorer".into()));
    }
    let data = DataArgs {
        data: a.data.clone(),
        format: None,
        n_choices: None,
    };
    let (_, pairs) = load_pairs(&data, "train.jsonl", run)?;
    let source = ImageSource::new(g, DEFAULT_TRAIN_RESOLUTION)?;
    let (pairs, failed) = ensure_images(pairs, &source);
    let visual = StubVisualEncoder::default();
    let items = prepare_items(&pairs, &visual)?;
    let cfg = TrainConfig {
        batch_size: a.batch,
        learning_rate: a.lr,
        epochs: a.epochs,
        seed: g.seed,
        max_steps: a.max_steps,
        mode: a.mode,
    };
    let rcfg = RankingConfig {
        margin: a.margin,
        channels: a.channels.iter().copied().collect(),
        weights: ChannelWeights {
            lm: a.weight_lm,
            itm: a.weight_itm,
            joint: a.weight_joint,
        },
    };
    rcfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let toy = ToyConfig {
        seed: g.seed,
        reduction_factor: a.reduction_factor,
        ..ToyConfig::default()
    };
    let mut model = ToyModel::new(toy, Vocabulary::default())?;
    info!("training on {} items", items.len());
    let report = train(&mut model, &items, &cfg, &rcfg)?;
    let mut ck = Checkpoint::from_model(&model, a.mode);
    ck.header.visual_encoder = Some(visual.descriptor().clone());
    ck.header.train_config = Some(cfg);
    ck.header.ranking = Some(rcfg);
    let out = required(&a.out);
    save_checkpoint(out, &ck)?;
    run.output(out);
    let body = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "items": items.len(),
        "excluded": failed,
        "report": report,
    });
    write_json(required(&a.report), &body, run)?;
    run.summary = Some(json!({
        "steps": report.steps,
        "epochs": report.epochs,
        "checkpoint": out.display().to_string(),
    }));
    Ok(())
}

fn cmd_eval(g: &GlobalArgs, backends: &Backends, a: &EvalArgs, run: &mut Run) -> CliResult<()> {
    let config = EnsembleConfig {
        lambda: a.lambda,
        text_channel: a.text_channel,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (path, pairs) = load_pairs(&a.data, "dev.jsonl", run)?;
    let model = load_model(g, backends, &a.model, run)?;
    let source = ImageSource::new(g, a.model.resolution)?;
    let predictor = Predictor {
        text: model.text.as_ref(),
        visual: &model.visual,
        imaginer: Some(source.imaginer()),
        mode: model.mode,
        config,
    };
    let batch = predictor.predict_all(&pairs);
    let mut lines = String::new();
    for p in &batch.predictions {
        let line = json!({ "id": p.id, "probs": p.probs, "predicted_index": p.predicted_index });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    write_text(required(&a.predictions), &lines, run)?;
    let golds: Vec<_> = pairs.iter().map(|p| p.qa.clone()).collect();
    let accuracy = batch_accuracy(&batch, &golds)?;
    let report = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "data": path.display().to_string(),
        "lambda": a.lambda,
        "text_channel": a.text_channel,
        "mode": model.mode,
        "accuracy": accuracy,
        "evaluated": batch.predictions.len(),
        "excluded_count": batch.failures.len(),
        "excluded": batch.failures,
    });
    write_json(required(&a.report), &report, run)?;
    run.summary = Some(json!({ "accuracy": accuracy, "evaluated": batch.predictions.len(), "excluded": batch.failures.len() }));
    Ok(())
}

/// Scores every pair with both channels; failures are listed separately.
fn score_pairs(
    pairs: &[VQAPair],
    predictor: &Predictor<'_>,
) -> (Vec<(String, ScoreVector, usize)>, Vec<ItemFailure>) {
    let mut scored = Vec::with_capacity(pairs.len());
    let mut failed = Vec::new();
    for (p, r) in pairs.iter().zip(predictor.score_all(pairs, true)) {
        match r {
            Ok(sv) => scored.push((p.qa.id.clone(), sv, p.qa.answer_index)),
            Err(e) => failed.push(failure(&p.qa.id, &e)),
        }
    }
    (scored, failed)
}

fn cmd_sweep(g: &GlobalArgs, backends: &Backends, a: &SweepArgs, run: &mut Run) -> CliResult<()> {
    let grid = parse_grid(&a.grid).map_err(|e| CliError::Usage(e.to_string()))?;
    let (path, pairs) = load_pairs(&a.data, "dev.jsonl", run)?;
    let model = load_model(g, backends, &a.model, run)?;
    let source = ImageSource::new(g, a.model.resolution)?;
    let predictor = Predictor {
        text: model.text.as_ref(),
        visual: &model.visual,
        imaginer: Some(source.imaginer()),
        mode: model.mode,
        config: EnsembleConfig::new(0.0)?,
    };
    let (scored, failed) = score_pairs(&pairs, &predictor);
    let pairs_for_sweep: Vec<(ScoreVector, usize)> = scored.into_iter().map(|(_, sv, y)| (sv, y)).collect();
    let result = sweep_lambda(&pairs_for_sweep, &grid, a.text_channel)?;
    write_text(required(&a.out), &result.to_csv(), run)?;
    let report = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "data": path.display().to_string(),
        "text_channel": a.text_channel,
        "mode": model.mode,
        "grid": grid,
        "best_lambda": result.best_lambda,
        "best_accuracy": result.best_accuracy,
        "curve": result.curve,
        "evaluated": pairs_for_sweep.len(),
        "excluded": failed,
    });
    write_json(required(&a.report), &report, run)?;
    run.summary = Some(json!({ "best_lambda": result.best_lambda, "best_accuracy": result.best_accuracy }));
    Ok(())
}

fn cmd_analyze(g: &GlobalArgs, backends: &Backends, a: &AnalyzeArgs, run: &mut Run) -> CliResult<()> {
    let (path, pairs) = load_pairs(&a.data, "dev.jsonl", run)?;
    let name = a
        .benchmark
        .clone()
        .unwrap_or_else(|| path.file_stem().and_then(|s| s.to_str()).unwrap_or("data").to_string());
    let model = load_model(g, backends, &a.model, run)?;
    let source = ImageSource::new(g, a.model.resolution)?;
    let out = required(&a.out);
    match a.analysis {
        AnalysisMode::HelpfulHarmful => {
            let config = EnsembleConfig {
                lambda: a.lambda,
                text_channel: a.text_channel,
            };
            config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            if a.lambda <= 0.0 {
                return Err(CliError::Usage("helpful-harmful needs --lambda > 0".into()));
            }
            let predictor = Predictor {
                text: model.text.as_ref(),
                visual: &model.visual,
                imaginer: Some(source.imaginer()),
                mode: model.mode,
                config,
            };
            let report = helpful_harmful(&name, &pairs, &predictor)?;
            run.summary = Some(json!({
                "helpful_pct": report.helpful_pct,
                "harmful_pct": report.harmful_pct,
                "evaluated": report.evaluated,
            }));
            let table = HelpfulHarmfulTable::new(&model.text.descriptor().name, vec![report]);
            write_json(out, &table, run)?;
        }
        AnalysisMode::Relevance => {
            let (pairs, mut failed) = ensure_images(pairs, &source);
            let embedder = StubJointEmbedder::new(model.visual.descriptor().seed());
            let mut report = relevance_report(&[(name, pairs)], &embedder)?;
            report.rows[0].excluded.append(&mut failed);
            run.summary = Some(json!({ "mean_relevance": report.rows[0].mean_relevance }));
            write_json(out, &report, run)?;
        }
        AnalysisMode::Attention => {
            let (mut pairs, mut failed) = ensure_images(pairs, &source);
            if let Some(n) = a.limit {
                pairs.truncate(n);
            }
            let dir = out.parent().unwrap_or_else(|| Path::new(".")).join("attention");
            let mut artifacts = Vec::new();
            for p in &pairs {
                match attention_erasure(p, model.text.as_ref(), &model.visual, model.mode, a.erase, &dir) {
                    Ok(art) => {
                        run.output(&art.erased_image);
                        artifacts.push(json!({
                            "pair_id": art.pair_id,
                            "erased_image": art.erased_image.display().to_string(),
                            "surviving": art.surviving.len(),
                        }));
                    }
                    // Erasing too many patches is an argument error, not an item failure.
                    Err(Error::InvalidInput(m)) => return Err(CliError::Usage(m)),
                    Err(e) => failed.push(failure(&p.qa.id, &e)),
                }
            }
            let report = json!({
                "schema_version": REPORT_SCHEMA_VERSION,
                "erase_count": a.erase,
                "artifacts": artifacts,
                "excluded": failed,
            });
            run.summary = Some(json!({ "artifacts": artifacts.len() }));
            write_json(out, &report, run)?;
        }
    }
    Ok(())
}

fn cmd_visualize(_g: &GlobalArgs, a: &VisualizeArgs, run: &mut Run) -> CliResult<()> {
    run.input(&a.input)?;
    let svg = plot::render_input(&a.input)?;
    let out = required(&a.out);
    write_text(out, &svg, run)?;
    run.summary = Some(json!({ "plot": out.display().to_string() }));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_usage_exit_codes() {
        assert_eq!(run(["mcfuse", "--help"]), 0);
        assert_eq!(run(["mcfuse", "train", "--help"]), 0);
        assert_eq!(run(["mcfuse", "--no-such-flag"]), 2);
        assert_eq!(run(["mcfuse", "frobnicate"]), 2);
        assert_eq!(run(["mcfuse", "eval"]), 2);
    }

    #[test]
    fn backend_selection() {
        assert_eq!(Backends::parse(&[]).unwrap().text_scorer, "toy");
        assert_eq!(Backends::parse(&["text_scorer=stub".into()]).unwrap().text_scorer, "stub");
        assert!(matches!(Backends::parse(&["text_scorer=gpt".into()]), Err(CliError::Usage(_))));
        assert!(matches!(Backends::parse(&["nonsense".into()]), Err(CliError::Usage(_))));
    }

    #[test]
    fn score_lines_carry_seventeen_digits() {
        let sv = ScoreVector::new(vec![-1.0 / 3.0, -2.0], vec![0.1, 0.2]).unwrap();
        let line = score_line("a\"b", &sv);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["id"], "a\"b");
        assert_eq!(v["lm"][0].as_f64().unwrap(), -1.0 / 3.0);
        assert!(line.contains("-3.3333333333333331e-1"));
        let text_only = score_line("x", &ScoreVector::text_only(vec![0.0, 1.0]).unwrap());
        assert!(text_only.contains("\"itm\":null"));
    }

    #[test]
    fn defaults_are_materialized() {
        let cli = Cli::try_parse_from(["mcfuse", "--out-dir", "/tmp/x", "train", "--data", "d"]).unwrap();
        let r = resolve_defaults(&cli);
        match r.command {
            Command::Train(t) => {
                assert_eq!(t.out.unwrap(), PathBuf::from("/tmp/x/adapters.ckpt"));
                assert_eq!((t.batch, t.epochs, t.lr, t.margin), (32, 2, 1e-5, 1.0));
            }
            _ => unreachable!(),
        }
        let v = serde_json::to_value(&cli).unwrap();
        let back: Cli = serde_json::from_value(v).unwrap();
        assert_eq!(back.global.seed, DEFAULT_SEED);
    }
}

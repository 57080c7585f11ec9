//! The `hierprompt` command line.
//!
//! Each subcommand is one pipeline stage that reads and writes files. Usage
//! errors exit with 2; data errors exit with 1 and print a JSON record
//! `{"error", "module", "message"}` on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::embed::{EmbedError, EmbeddingFile, ImageEmbeddingSet};
use crate::eval::{self, EvalError, EvalReport};
use crate::hierarchy::{HierarchyError, LabelHierarchy};
use crate::llmgen::{
    self, DiskCache, HttpChatBackend, ImagePromptCorpus, ImagePromptGenerator, LlmError, LlmQueryConfig,
};
use crate::promptgen::{self, PromptError, PromptPlan};
use crate::synth::{self, SynthConfig, SynthError};
use crate::zeroshot::{self, BatchOptions, ClassifierBank, Ensemble, ZeroShotError, DEFAULT_CRM_SCALE};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    ZeroShot(#[from] ZeroShotError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Manifest(String),
}

impl CliError {
    pub fn module(&self) -> &'static str {
        match self {
            Self::Hierarchy(_) => "hierarchy",
            Self::Prompt(_) => "promptgen",
            Self::Llm(_) => "llmgen",
            Self::Embed(_) => "embed",
            Self::ZeroShot(_) => "zeroshot",
            Self::Eval(_) => "eval",
            Self::Synth(_) => "synth",
            Self::Io { .. } | Self::Manifest(_) => "cli",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Hierarchy(e) => e.name(),
            Self::Prompt(e) => e.name(),
            Self::Llm(e) => e.name(),
            Self::Embed(e) => e.name(),
            Self::ZeroShot(e) => e.name(),
            Self::Eval(e) => e.name(),
            Self::Synth(e) => e.name(),
            Self::Io { .. } => "Io",
            Self::Manifest(_) => "BadRunManifest",
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.name(),
            "module": self.module(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hierprompt", version, about = "Hierarchy-aware zero-shot classification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build language prompts from a hierarchy and write a JSONL manifest.
    BuildPrompts(BuildPromptsArgs),
    /// Send a prompt manifest to a chat-completion API and write the image-prompt corpus directory.
    GenImagePrompts(GenArgs),
    /// Aggregate per-prompt text embeddings into one unit vector per class.
    Aggregate(AggregateArgs),
    /// Classify image embeddings and write a JSONL predictions file.
    Classify(ClassifyArgs),
    /// Score a predictions file and write a JSON report.
    Evaluate(EvaluateArgs),
    /// Write a synthetic hierarchy with text and image embeddings.
    Synth(SynthArgs),
    /// Average several reports into a CSV table with an unweighted mean row.
    Average(AverageArgs),
    /// Run build-prompts, classify and evaluate from a JSON run manifest.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct BuildPromptsArgs {
    /// Edge list: `ROOT<TAB>name`, then `child<TAB>parent` per line.
    #[arg(long)]
    pub hierarchy: PathBuf,
    /// Non-empty comma-separated subset of lp, ap, g.
    #[arg(long, default_value = "lp,ap,g", value_parser = parse_plan)]
    pub plan: PromptPlan,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Per-kind settings: comparative prompts stop at '.', path prompts do not.
    Hierarchy,
    Cupl,
    Vcd,
    Hie,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Language-prompt manifest from build-prompts.
    #[arg(long)]
    pub prompts: PathBuf,
    /// When given, fail unless every leaf receives an image prompt.
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "hierarchy")]
    pub preset: Preset,
    #[arg(long, default_value = llmgen::DEFAULT_MODEL)]
    pub model: String,
    /// Overrides the preset temperature for every prompt kind.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Overrides the preset token limit for every prompt kind.
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Overrides the preset stop token; `none` removes it.
    #[arg(long)]
    pub stop: Option<String>,
    #[arg(long, default_value = llmgen::DEFAULT_BASE_URL)]
    pub base_url: String,
    /// Environment variable holding the API credential.
    #[arg(long, default_value = llmgen::DEFAULT_API_KEY_VAR)]
    pub api_key_env: String,
    #[arg(long, default_value = ".hierprompt-cache")]
    pub cache_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
    /// Base backoff delay between retries, in milliseconds.
    #[arg(long, default_value_t = 500)]
    pub retry_delay_ms: u64,
    /// Split bulleted responses into one image prompt per bullet.
    #[arg(long)]
    pub split_bullets: bool,
    /// Output directory, one JSONL file per class.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub hierarchy: PathBuf,
    /// Per-prompt text embeddings labelled by class.
    #[arg(long)]
    pub text: PathBuf,
    /// Class embedding file; `.bin` selects the binary form.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrmArgs {
    /// Re-rank with conditional risk minimization over tree distances.
    #[arg(long, overrides_with = "no_crm")]
    pub crm: bool,
    #[arg(long, overrides_with = "crm")]
    pub no_crm: bool,
    #[arg(long, default_value_t = DEFAULT_CRM_SCALE)]
    pub crm_scale: f64,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub hierarchy: PathBuf,
    /// Text embeddings labelled by class: per prompt, or one per class.
    #[arg(long)]
    pub text: PathBuf,
    /// Image embeddings labelled by ground-truth class.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value = "embedding", value_parser = parse_ensemble)]
    pub strategy: Ensemble,
    #[command(flatten)]
    pub crm: CrmArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub hierarchy: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Dataset tag recorded in the report.
    #[arg(long, default_value = "")]
    pub dataset: String,
    /// Also write the mistake-severity histogram as CSV.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Branching factor per level.
    #[arg(long, default_value = "2,4,4", value_delimiter = ',')]
    pub branching: Vec<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.5)]
    pub branch_noise: f64,
    #[arg(long, default_value_t = 0.3)]
    pub query_noise: f64,
    #[arg(long, default_value_t = 10)]
    pub queries_per_class: usize,
    #[arg(long, default_value_t = 1)]
    pub prompts_per_class: usize,
    #[arg(long, default_value_t = 0.0)]
    pub prompt_noise: f64,
    /// Output directory: hierarchy.tsv, text.jsonl, images.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AverageArgs {
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Write the radar-chart feed (error rate, severity, HD@1) instead of the table.
    #[arg(long)]
    pub radar: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Paths and flags for a full offline run. Relative paths resolve against
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub hierarchy: PathBuf,
    /// Written when `plan` is set.
    #[serde(default)]
    pub prompt_manifest: Option<PathBuf>,
    #[serde(default)]
    pub plan: Option<String>,
    /// Kept for provenance; the text embeddings are what classify reads.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    pub text_embeddings: PathBuf,
    pub images: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default)]
    pub crm: bool,
    #[serde(default = "default_scale")]
    pub crm_scale: f64,
    #[serde(default)]
    pub dataset: String,
}

fn default_strategy() -> String {
    "embedding".into()
}

fn default_scale() -> f64 {
    DEFAULT_CRM_SCALE
}

fn parse_plan(s: &str) -> std::result::Result<PromptPlan, String> {
    s.parse().map_err(|e: PromptError| e.to_string())
}

fn parse_ensemble(s: &str) -> std::result::Result<Ensemble, String> {
    s.parse().map_err(|e: ZeroShotError| e.to_string())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_hierarchy(path: &Path) -> Result<LabelHierarchy> {
    Ok(LabelHierarchy::parse(&read(path)?)?)
}

pub fn build_prompts(args: &BuildPromptsArgs) -> Result<()> {
    let h = load_hierarchy(&args.hierarchy)?;
    let prompts = promptgen::build_all(&h, args.plan)?;
    write(&args.out, promptgen::write_manifest(&prompts).as_bytes())
}

pub fn gen_image_prompts(args: &GenArgs) -> Result<()> {
    let prompts = promptgen::read_manifest(&read(&args.prompts)?)?;
    let mut config = match args.preset {
        Preset::Hierarchy => LlmQueryConfig::hierarchy_aware(&args.model),
        Preset::Cupl => LlmQueryConfig::cupl(&args.model),
        Preset::Vcd => LlmQueryConfig::vcd(&args.model),
        Preset::Hie => LlmQueryConfig::hie(&args.model),
    };
    let stop = args
        .stop
        .as_ref()
        .map(|s| if s.eq_ignore_ascii_case("none") { None } else { Some(s.clone()) });
    config.override_all(args.max_tokens, stop, args.temperature);
    config.validate()?;

    let backend = HttpChatBackend::from_env(&args.base_url, &args.api_key_env, Duration::from_secs(args.timeout_secs))?;
    let cache = DiskCache::new(&args.cache_dir);
    let retry = llmgen::RetryPolicy {
        base_delay: Duration::from_millis(args.retry_delay_ms),
        ..Default::default()
    };
    let generator = ImagePromptGenerator::new(&backend, &cache, config)?
        .with_retry(retry)
        .with_parallelism(args.parallelism)
        .with_bullet_splitting(args.split_bullets);
    let corpus = generator.generate(&prompts)?;
    if let Some(path) = &args.hierarchy {
        corpus.check_covers(&load_hierarchy(path)?)?;
    }
    corpus.write_dir(&args.out)?;
    let stats = generator.stats();
    log::info!(
        "{} image prompts, {} requests, {} cache hits",
        corpus.len(),
        stats.requests.load(std::sync::atomic::Ordering::Relaxed),
        stats.cache_hits.load(std::sync::atomic::Ordering::Relaxed)
    );
    Ok(())
}

/// Reads a corpus directory, for callers that hand it to an encoder.
pub fn load_corpus(dir: &Path) -> Result<ImagePromptCorpus> {
    Ok(ImagePromptCorpus::read_dir(dir)?)
}

pub fn aggregate(args: &AggregateArgs) -> Result<()> {
    let h = load_hierarchy(&args.hierarchy)?;
    let text = EmbeddingFile::load(&args.text)?;
    let bank = ClassifierBank::from_prompt_embeddings(&h, &text, Ensemble::Embedding)?;
    let file = bank.to_embedding_file().expect("embedding bank has class vectors");
    file.store(&args.out)?;
    Ok(())
}

fn classify_files(
    h: &LabelHierarchy,
    text: &Path,
    images: &Path,
    ensemble: Ensemble,
    crm: Option<f64>,
) -> Result<String> {
    let bank = ClassifierBank::from_prompt_embeddings(h, &EmbeddingFile::load(text)?, ensemble)?;
    let images = ImageEmbeddingSet::from_file(EmbeddingFile::load(images)?, h)?;
    let d = h.distance_matrix();
    let options = BatchOptions {
        crm: crm.map(|scale| (&d, scale)),
    };
    let preds = zeroshot::batch_predict(&images, &bank, options)?;
    Ok(zeroshot::write_predictions(&preds, bank.classes()))
}

pub fn classify(args: &ClassifyArgs) -> Result<()> {
    let h = load_hierarchy(&args.hierarchy)?;
    let crm = (args.crm.crm && !args.crm.no_crm).then_some(args.crm.crm_scale);
    let out = classify_files(&h, &args.text, &args.images, args.strategy, crm)?;
    write(&args.out, out.as_bytes())
}

fn evaluate_file(h: &LabelHierarchy, predictions: &Path, dataset: &str) -> Result<EvalReport> {
    let records = zeroshot::read_predictions(&read(predictions)?)?;
    let report = eval::evaluate_records(&records, h)?;
    let strategy = report.strategy.clone();
    Ok(report.with_tags(dataset, &strategy))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let h = load_hierarchy(&args.hierarchy)?;
    let report = evaluate_file(&h, &args.predictions, &args.dataset)?;
    if let Some(path) = &args.histogram {
        write(path, report.histogram.to_csv().as_bytes())?;
    }
    write(&args.out, report.to_json().as_bytes())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let h = synth::balanced_hierarchy(&args.branching)?;
    let cfg = SynthConfig {
        dim: args.dim,
        branch_noise: args.branch_noise,
        query_noise: args.query_noise,
        seed: args.seed,
        queries_per_class: args.queries_per_class,
        prompts_per_class: args.prompts_per_class,
        prompt_noise: args.prompt_noise,
    };
    let data = synth::generate_class_embeddings(&h, &cfg)?;
    write(&args.out.join("hierarchy.tsv"), h.to_edge_list().as_bytes())?;
    write(&args.out.join("text.jsonl"), data.prompt_embeddings.to_text().as_bytes())?;
    write(&args.out.join("images.jsonl"), data.images.to_text().as_bytes())
}

pub fn average(args: &AverageArgs) -> Result<()> {
    let reports = args
        .reports
        .iter()
        .map(|p| {
            EvalReport::from_json(&read(p)?)
                .map_err(|e| CliError::Manifest(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = if args.radar {
        eval::radar_feed_csv(&reports)
    } else {
        let avg = eval::cross_dataset_average(&reports)?;
        let mut s = eval::reports_csv(&reports);
        s.push_str(&format!(
            "average,,{},{},{},,,\n",
            avg.top1, avg.severity, avg.hd_at_1
        ));
        s
    };
    write(&args.out, out.as_bytes())
}

impl RunManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Manifest(e.to_string()))
    }

    fn resolve(&self, base: &Path) -> Self {
        let r = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        Self {
            hierarchy: r(&self.hierarchy),
            prompt_manifest: self.prompt_manifest.as_ref().map(r),
            corpus: self.corpus.as_ref().map(r),
            text_embeddings: r(&self.text_embeddings),
            images: r(&self.images),
            predictions: r(&self.predictions),
            report: r(&self.report),
            ..self.clone()
        }
    }

    fn require(path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::Manifest(format!("input {} does not exist", path.display())))
        }
    }
}

pub fn run_manifest(args: &RunArgs) -> Result<()> {
    let base = args.manifest.parent().unwrap_or(Path::new(""));
    let m = RunManifest::from_json(&read(&args.manifest)?)?.resolve(base);
    let ensemble = parse_ensemble(&m.strategy).map_err(CliError::Manifest)?;
    for p in [&m.hierarchy, &m.text_embeddings, &m.images] {
        RunManifest::require(p)?;
    }
    let h = load_hierarchy(&m.hierarchy)?;

    match (&m.plan, &m.prompt_manifest) {
        (Some(plan), Some(out)) => {
            let plan = parse_plan(plan).map_err(CliError::Manifest)?;
            write(out, promptgen::write_manifest(&promptgen::build_all(&h, plan)?).as_bytes())?;
        }
        (Some(_), None) => return Err(CliError::Manifest("`plan` requires `prompt_manifest`".into())),
        _ => {}
    }

    let preds = classify_files(&h, &m.text_embeddings, &m.images, ensemble, m.crm.then_some(m.crm_scale))?;
    write(&m.predictions, preds.as_bytes())?;
    let report = evaluate_file(&h, &m.predictions, &m.dataset)?;
    write(&m.report, report.to_json().as_bytes())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::BuildPrompts(a) => build_prompts(a),
        Command::GenImagePrompts(a) => gen_image_prompts(a),
        Command::Aggregate(a) => aggregate(a),
        Command::Classify(a) => classify(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(a) => synth(a),
        Command::Average(a) => average(a),
        Command::Run(a) => run_manifest(a),
    }
}

/// Parses arguments, runs the stage and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}

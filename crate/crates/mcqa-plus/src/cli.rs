//! Command-line pipeline: `filter`, `augment`, `eval`, `score`, `report`.
//! Stages communicate only through JSONL/JSON files; every output embeds the
//! digest of the run configuration that produced it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::client::{
    cached_complete, Backend, ClientError, CompletionRequest, DecodeParams, HttpBackend,
    HttpBackendConfig, MockBackend, MockPolicy, ResponseCache,
};
use crate::config::{apply_config_file, BackendKind, ConfigError, RunConfig};
use crate::model::{
    parse_dataset, parse_derived, serialize_dataset, serialize_derived, Dataset, DatasetError,
    DatasetMarker, DerivedQuestion, MCQItem, Setting, SCHEMA_VERSION,
};
use crate::parsing::extract_for_question;
use crate::prompting::{
    build_demos, render_prompt, DemoMode, DemoPolicy, Prompt, PromptError, TemplateSet,
};
use crate::report::{write_csv, write_markdown, ReportError, ReportFormat};
use crate::scoring::{
    compute_metrics, invariability_filter, parse_records, serialize_records, Convention,
    EvalRecord, Estimator, Metrics, ScoringError,
};
use crate::transforms::{build_suite, Profile};

/// Exit codes: 0 success, 1 I/O or configuration error, 2 backend
/// exhaustion, 3 validation failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Backend(ClientError),
    #[error("{0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Backend(_) => 2,
            CliError::Validation(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ScoringError> for CliError {
    fn from(e: ScoringError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn io_err(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{context}: {e}"))
}

#[derive(Parser)]
#[command(name = "mcqa-plus", version, about = "MCQA+ augmentation and evaluation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Filter items to the invariability (diamond) subset.
    Filter(FilterArgs),
    /// Generate the derived-question suite for each item.
    Augment(AugmentArgs),
    /// Render prompts, query the backend, and write evaluation records.
    Eval(EvalArgs),
    /// Compute the metrics document from evaluation records.
    Score(ScoreArgs),
    /// Render metrics documents as markdown or CSV tables.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
pub struct CommonArgs {
    /// TOML file whose values override the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Backend kind.
    #[arg(long, value_parser = ["mock", "http"], default_value = "mock")]
    pub backend: String,
    /// Model name sent to HTTP backends (and stamped on records).
    #[arg(long, default_value = "mock")]
    pub model: String,
    /// Base URL of an OpenAI-compatible endpoint.
    #[arg(long)]
    pub base_url: Option<String>,
    /// Mock policy JSONL file (required for the mock backend).
    #[arg(long)]
    pub mock_policy: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    pub template_dir: Option<PathBuf>,
    /// Response cache directory; omit to disable caching.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Maximum in-flight backend requests.
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Number of few-shot demonstrations (0 = zero-shot).
    #[arg(long, default_value_t = 0)]
    pub few_shot: usize,
    /// Held-out items JSONL used as the demonstration pool.
    #[arg(long)]
    pub demo_pool: Option<PathBuf>,
    /// Run seed for every deterministic draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Permutation budget: all | cyclic | sample:K (default: all for <=4
    /// options, cyclic beyond).
    #[arg(long)]
    pub perm_budget: Option<String>,
    /// Non-semantic token policy: fixed:STR | gibberish:LEN.
    #[arg(long, default_value = "gibberish:6")]
    pub token_policy: String,
    /// Sampling temperature (evaluation default is greedy).
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 16)]
    pub max_tokens: u32,
    /// Request per-token logprobs from the backend.
    #[arg(long, default_value_t = false)]
    pub logprobs: bool,
    #[arg(long, default_value_t = 5)]
    pub top_logprobs: u8,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    /// Token-bucket rate limit for HTTP backends.
    #[arg(long)]
    pub requests_per_second: Option<f64>,
    /// Optional system message for chat backends.
    #[arg(long)]
    pub system_prompt: Option<String>,
}

impl CommonArgs {
    fn to_config(&self, profile: Profile) -> Result<RunConfig, CliError> {
        let mut config = RunConfig {
            backend: match self.backend.as_str() {
                "http" => BackendKind::Http,
                _ => BackendKind::Mock,
            },
            model: self.model.clone(),
            base_url: self.base_url.clone(),
            mock_policy: self.mock_policy.clone(),
            template_dir: self.template_dir.clone(),
            perm_budget: self.perm_budget.clone(),
            token_policy: self.token_policy.clone(),
            profile,
            seed: self.seed,
            cache_dir: self.cache_dir.clone(),
            concurrency: self.concurrency.max(1),
            few_shot: self.few_shot,
            demo_pool: self.demo_pool.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            logprobs: self.logprobs,
            top_logprobs: self.top_logprobs,
            max_retries: self.max_retries,
            requests_per_second: self.requests_per_second,
            system_prompt: self.system_prompt.clone(),
        };
        if let Some(path) = &self.config {
            apply_config_file(&mut config, path)?;
        }
        Ok(config)
    }
}

#[derive(Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Input items JSONL.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output diamond JSONL.
    #[arg(long = "out")]
    pub output: PathBuf,
    /// Optional path for the permutation evaluation records.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Only keep input items carrying this tag (repeatable; all must match).
    #[arg(long = "require-tag")]
    pub require_tag: Vec<String>,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "out")]
    pub output: PathBuf,
    /// Suite profile.
    #[arg(long, value_parser = ["full", "hard", "x1"], default_value = "full")]
    pub profile: String,
    /// Only keep input items carrying this tag (repeatable; all must match).
    #[arg(long = "require-tag")]
    pub require_tag: Vec<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Derived-question JSONL.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output evaluation-record JSONL.
    #[arg(long = "out")]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Evaluation-record JSONL.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output metrics JSON.
    #[arg(long = "out")]
    pub output: PathBuf,
    /// Yes/no probability estimator.
    #[arg(long, value_parser = ["full", "topk", "binary"], default_value = "binary")]
    pub estimator: String,
    /// Reading of the incorrect-confidence definition.
    #[arg(long, value_parser = ["text", "formula"], default_value = "text")]
    pub convention: String,
    /// Profile stamp recorded in the metrics document.
    #[arg(long, value_parser = ["full", "hard", "x1"])]
    pub profile: Option<String>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Metrics JSON files to merge into the report.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, value_parser = ["markdown", "csv"], default_value = "markdown")]
    pub format: String,
    #[arg(long = "out")]
    pub output: PathBuf,
}

fn parse_profile(name: &str) -> Profile {
    match name {
        "hard" => Profile::Hard,
        "x1" => Profile::X1,
        _ => Profile::Full,
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Filter(args) => cmd_filter(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Score(args) => cmd_score(args),
        Command::Report(args) => cmd_report(args),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn open_reader(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| io_err(&path.display().to_string(), e))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| io_err(&parent.display().to_string(), e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(&path.display().to_string(), e))
}

fn read_items(path: &Path) -> Result<Dataset, CliError> {
    Ok(parse_dataset(open_reader(path)?, SCHEMA_VERSION)?)
}

/// Items carrying every required tag; an empty requirement keeps everything.
fn apply_tag_filter(dataset: &mut Dataset, required: &[String]) {
    if required.is_empty() {
        return;
    }
    dataset
        .items
        .retain(|item| required.iter().all(|tag| item.tags.contains(tag)));
}

fn build_backend(config: &RunConfig) -> Result<Box<dyn Backend>, CliError> {
    match config.backend {
        BackendKind::Mock => {
            let path = config.mock_policy.as_ref().ok_or_else(|| {
                CliError::Config("mock backend needs --mock-policy FILE".into())
            })?;
            let policy = MockPolicy::from_jsonl(open_reader(path)?)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            Ok(Box::new(MockBackend::with_model_id(
                policy,
                config.model.clone(),
            )))
        }
        BackendKind::Http => {
            let base_url = config.base_url.clone().ok_or_else(|| {
                CliError::Config("http backend needs --base-url URL".into())
            })?;
            let mut http = HttpBackendConfig::new(base_url, config.model.clone());
            http.max_retries = config.max_retries;
            http.requests_per_second = config.requests_per_second;
            http.system_prompt = config.system_prompt.clone();
            Ok(Box::new(
                HttpBackend::new(http).map_err(CliError::Backend)?,
            ))
        }
    }
}

fn load_templates(config: &RunConfig) -> Result<TemplateSet, CliError> {
    match &config.template_dir {
        Some(dir) => Ok(TemplateSet::load_dir(dir)?),
        None => Ok(TemplateSet::builtin()),
    }
}

fn load_demo_policy(config: &RunConfig) -> Result<DemoPolicy, CliError> {
    if config.few_shot == 0 {
        return Ok(DemoPolicy::zero_shot());
    }
    let path = config.demo_pool.as_ref().ok_or_else(|| {
        CliError::Config("--few-shot K needs --demo-pool FILE".into())
    })?;
    let pool = read_items(path)?.items;
    Ok(DemoPolicy {
        mode: DemoMode::FewShot(config.few_shot),
        pool,
        seed: config.seed,
    })
}

fn decode_params(config: &RunConfig) -> Result<DecodeParams, CliError> {
    let params = DecodeParams {
        temperature: config.temperature,
        max_tokens: config.max_tokens,
        want_logprobs: config.logprobs,
        top_logprobs: if config.logprobs { config.top_logprobs } else { 0 },
    };
    params
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(params)
}

struct EvalContext {
    backend: Box<dyn Backend>,
    cache: Option<ResponseCache>,
    templates: TemplateSet,
    demo_policy: DemoPolicy,
    params: DecodeParams,
    concurrency: usize,
}

impl EvalContext {
    fn from_config(config: &RunConfig) -> Result<Self, CliError> {
        let cache = match &config.cache_dir {
            Some(dir) => Some(ResponseCache::open(dir).map_err(|e| io_err("cache", e))?),
            None => None,
        };
        Ok(EvalContext {
            backend: build_backend(config)?,
            cache,
            templates: load_templates(config)?,
            demo_policy: load_demo_policy(config)?,
            params: decode_params(config)?,
            concurrency: config.concurrency.max(1),
        })
    }

    fn render(&self, question: &DerivedQuestion) -> Result<Prompt, PromptError> {
        let template = self.templates.get(question.setting);
        let demos = build_demos(
            question.setting,
            &self.demo_policy,
            template,
            Some(question.parent_id.as_str()),
        )?;
        render_prompt(question, template, &demos)
    }

    fn evaluate_one(&self, question: &DerivedQuestion) -> EvalRecord {
        let prompt = match self.render(question) {
            Ok(prompt) => prompt,
            Err(e) => {
                return failed_record(question, String::new(), self.backend.model_id(), e)
            }
        };
        let request = CompletionRequest {
            prompt: &prompt,
            params: &self.params,
            question: Some(question),
        };
        let outcome = match &self.cache {
            Some(cache) => cached_complete(self.backend.as_ref(), &request, cache),
            None => self.backend.complete(&request),
        };
        match outcome {
            Ok(response) => {
                let extraction = extract_for_question(question, &response.text);
                EvalRecord::new(question.clone(), prompt.digest(), response, extraction)
            }
            Err(e) => failed_record(question, prompt.digest(), self.backend.model_id(), e),
        }
    }

    /// Evaluate all questions under the in-flight cap; results keep input
    /// order, so output bytes do not depend on the concurrency level.
    fn evaluate_all(&self, questions: &[DerivedQuestion]) -> Vec<EvalRecord> {
        let cap = self.concurrency;
        if cap <= 1 {
            return questions.iter().map(|q| self.evaluate_one(q)).collect();
        }
        let mut records: Vec<Option<EvalRecord>> = Vec::new();
        records.resize_with(questions.len(), || None);
        for (chunk_index, chunk) in questions.chunks(cap).enumerate() {
            let base = chunk_index * cap;
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|q| scope.spawn(move || self.evaluate_one(q)))
                    .collect();
                for (offset, handle) in handles.into_iter().enumerate() {
                    records[base + offset] = Some(handle.join().expect("eval worker panicked"));
                }
            });
        }
        records.into_iter().map(|r| r.expect("all slots filled")).collect()
    }
}

fn failed_record(
    question: &DerivedQuestion,
    prompt_digest: String,
    model_id: &str,
    error: impl std::fmt::Display,
) -> EvalRecord {
    let mut record = EvalRecord::new(
        question.clone(),
        prompt_digest,
        crate::client::ModelResponse {
            text: String::new(),
            logprobs: None,
            model_id: model_id.to_string(),
            cached: false,
        },
        crate::parsing::Extraction {
            verdict: crate::parsing::Verdict::Unparseable,
            evidence: String::new(),
        },
    );
    record.error = Some(error.to_string());
    record
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_filter(args: FilterArgs) -> Result<(), CliError> {
    let config = args.common.to_config(Profile::Full)?;
    let digest = config.digest();
    let mut dataset = read_items(&args.input)?;
    apply_tag_filter(&mut dataset, &args.require_tag);
    let context = EvalContext::from_config(&config)?;

    let mut all_records: Vec<EvalRecord> = Vec::new();
    let mut retained: Vec<MCQItem> = Vec::new();
    for item in &dataset.items {
        let budget = config.budget_for(item.n_options())?;
        let questions = crate::transforms::enumerate_permutations(item, &budget)
            .map_err(|e| CliError::Validation(format!("item {:?}: {e}", item.id)))?;
        let records = context.evaluate_all(&questions);
        let single = Dataset::raw(vec![item.clone()]);
        let diamond = invariability_filter(&single, &records, &budget)?;
        retained.extend(diamond.items);
        all_records.extend(records);
    }

    let kept = retained.len();
    let dropped = dataset.items.len() - kept;
    let budget_note = config
        .perm_budget
        .clone()
        .unwrap_or_else(|| "default (all for <=4 options, cyclic beyond)".to_string());
    let diamond = Dataset {
        items: retained,
        marker: DatasetMarker::Diamond,
        provenance: format!(
            "invariability filter over {} item(s), budget {budget_note}",
            dataset.items.len()
        ),
    };
    let mut writer = create_writer(&args.output)?;
    serialize_dataset(&diamond, &mut writer, Some(&digest))
        .map_err(|e| io_err("write diamond", e))?;
    writer.flush().map_err(|e| io_err("write diamond", e))?;

    if let Some(path) = &args.records {
        let mut writer = create_writer(path)?;
        serialize_records(&all_records, &mut writer, Some(&digest))
            .map_err(|e| io_err("write records", e))?;
        writer.flush().map_err(|e| io_err("write records", e))?;
    }
    eprintln!("filter: retained {kept}, dropped {dropped}");
    Ok(())
}

fn cmd_augment(args: AugmentArgs) -> Result<(), CliError> {
    let profile = parse_profile(&args.profile);
    let config = args.common.to_config(profile)?;
    let digest = config.digest();
    let mut dataset = read_items(&args.input)?;
    apply_tag_filter(&mut dataset, &args.require_tag);
    if dataset.marker != DatasetMarker::Diamond {
        warn!(
            "augmenting a {:?} dataset; the protocol expects the diamond subset",
            dataset.marker
        );
    }
    let policy = config.token_policy()?;
    let mut questions: Vec<DerivedQuestion> = Vec::new();
    let mut omissions = Vec::new();
    let mut skipped_items = 0usize;
    for item in &dataset.items {
        let budget = config.budget_for(item.n_options())?;
        match build_suite(item, config.profile, &budget, &policy, config.seed) {
            Ok(mut suite) => {
                questions.append(&mut suite.questions);
                omissions.append(&mut suite.omissions);
            }
            Err(e) => {
                warn!("item {:?} skipped: {e}", item.id);
                skipped_items += 1;
            }
        }
    }
    let mut writer = create_writer(&args.output)?;
    serialize_derived(&questions, &mut writer, Some(&digest))
        .map_err(|e| io_err("write derived", e))?;
    writer.flush().map_err(|e| io_err("write derived", e))?;

    if !omissions.is_empty() {
        let sidecar = args.output.with_extension("omissions.jsonl");
        let mut writer = create_writer(&sidecar)?;
        for omission in &omissions {
            writeln!(
                writer,
                "{}",
                serde_json::to_string(omission).expect("omission serializes")
            )
            .map_err(|e| io_err("write omissions", e))?;
        }
        writer.flush().map_err(|e| io_err("write omissions", e))?;
        for omission in &omissions {
            warn!(
                "item {:?}: setting {} omitted: {}",
                omission.parent_id, omission.setting, omission.reason
            );
        }
    }
    eprintln!(
        "augment: {} question(s) from {} item(s) ({} omission(s), {} item(s) skipped)",
        questions.len(),
        dataset.items.len(),
        omissions.len(),
        skipped_items
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let config = args.common.to_config(Profile::Full)?;
    let digest = config.digest();
    let questions = parse_derived(open_reader(&args.input)?, SCHEMA_VERSION)?;
    let context = EvalContext::from_config(&config)?;
    let records = context.evaluate_all(&questions);

    let errored = records.iter().filter(|r| r.error.is_some()).count();
    let cached = records.iter().filter(|r| r.response.cached).count();
    let mut writer = create_writer(&args.output)?;
    serialize_records(&records, &mut writer, Some(&digest))
        .map_err(|e| io_err("write records", e))?;
    writer.flush().map_err(|e| io_err("write records", e))?;
    eprintln!(
        "eval: {} record(s), {cached} cached, {errored} backend failure(s)",
        records.len()
    );
    if errored == records.len() && !records.is_empty() {
        return Err(CliError::Backend(ClientError::BackendUnavailable(
            "every request failed".into(),
        )));
    }
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<(), CliError> {
    let estimator = match args.estimator.as_str() {
        "full" => Estimator::FullVocab,
        "topk" => Estimator::TopK,
        _ => Estimator::Binary,
    };
    let convention = match args.convention.as_str() {
        "formula" => Convention::Formula,
        _ => Convention::Text,
    };
    let profile = args.profile.as_deref().map(parse_profile);

    // the provenance digest travels from the records header into the metrics
    let mut first_line = String::new();
    let mut reader = open_reader(&args.input)?;
    reader
        .read_line(&mut first_line)
        .map_err(|e| io_err("read records", e))?;
    let upstream_digest = serde_json::from_str::<serde_json::Value>(&first_line)
        .ok()
        .filter(|v| v.get("schema").is_some())
        .and_then(|v| {
            v.get("run_config_digest")
                .and_then(|d| d.as_str().map(str::to_string))
        });

    let records = parse_records(open_reader(&args.input)?)?;
    let metrics = compute_metrics(&records, estimator, convention, profile, upstream_digest);
    let mut writer = create_writer(&args.output)?;
    serde_json::to_writer_pretty(&mut writer, &metrics)
        .map_err(|e| io_err("write metrics", e))?;
    writeln!(writer).map_err(|e| io_err("write metrics", e))?;
    writer.flush().map_err(|e| io_err("write metrics", e))?;
    info!(
        "score: {} record(s), {} unparseable",
        metrics.counts.records, metrics.counts.unparseable
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let format = match args.format.as_str() {
        "csv" => ReportFormat::Csv,
        _ => ReportFormat::Markdown,
    };
    let mut all: Vec<Metrics> = Vec::new();
    for path in &args.metrics {
        let metrics: Metrics = serde_json::from_reader(open_reader(path)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        all.push(metrics);
    }
    let mut writer = create_writer(&args.output)?;
    match format {
        ReportFormat::Markdown => write_markdown(&all, &mut writer)?,
        ReportFormat::Csv => write_csv(&all, &mut writer)?,
    }
    writer.flush().map_err(|e| io_err("write report", e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Library-facing helpers used by integration tests
// ---------------------------------------------------------------------------

/// Evaluate a derived-question list against a backend with builtin
/// templates, zero-shot, no cache. Used for in-process pipelines and tests.
pub fn evaluate_questions(
    questions: &[DerivedQuestion],
    backend: &dyn Backend,
    params: &DecodeParams,
) -> Vec<EvalRecord> {
    let templates = TemplateSet::builtin();
    let demo_policy = DemoPolicy::zero_shot();
    questions
        .iter()
        .map(|question| {
            let template = templates.get(question.setting);
            let demos = build_demos(
                question.setting,
                &demo_policy,
                template,
                Some(question.parent_id.as_str()),
            )
            .expect("zero-shot demos never fail");
            let prompt =
                render_prompt(question, template, &demos).expect("builtin templates render");
            let request = CompletionRequest {
                prompt: &prompt,
                params,
                question: Some(question),
            };
            match backend.complete(&request) {
                Ok(response) => {
                    let extraction = extract_for_question(question, &response.text);
                    EvalRecord::new(question.clone(), prompt.digest(), response, extraction)
                }
                Err(e) => failed_record(question, prompt.digest(), backend.model_id(), e),
            }
        })
        .collect()
}

/// Per-setting accuracies of a record stream, skipping absent settings.
pub fn accuracy_by_setting(records: &[EvalRecord]) -> BTreeMap<Setting, f64> {
    Setting::ALL
        .into_iter()
        .filter_map(|s| crate::scoring::setting_accuracy(records, s).ok().map(|a| (s, a)))
        .collect()
}

//! Command-line entry point for the refinement training pipeline.
//!
//! One JSON run config drives four subcommands: `train-toy` optimizes the
//! toy policy, `rollout` collects and scores a training epoch, `eval`
//! measures accuracy and token usage under refine-enabled and
//! refine-disabled prompts, and `analyze` classifies the refine segments
//! of a rollout log. Flags override config values; every subcommand is
//! deterministic for a fixed config, seed, and deterministic backend.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pasr_core::analysis::{analyze_traces, AnalysisConfig, AnalysisError, AnalysisInput};
use pasr_core::backend::{GenerationBackend, RetryPolicy, SamplingParams, ScriptedBackend};
use pasr_core::eval::{
    evaluate, load_dataset, render_report_csv, render_report_markdown, DatasetRecord, EvalConfig,
    EvalError, EvalReport,
};
use pasr_core::grpo::GrpoConfig;
use pasr_core::judge::{AccuracyJudge, ExactMatchJudge, JudgeClient, JudgeError};
use pasr_core::reward::RewardConfig;
use pasr_core::rollout::{
    run_rollout_epoch, BaselinePoolCache, PromptMode, PromptTemplate, QuarantineRecord,
    RolloutEpochConfig, RolloutError, RolloutLogRecord,
};
use pasr_core::toy::{train_toy, ToyBackend, ToyError, ToyPolicy, ToyTrainConfig, FEATURE_COUNT};
use pasr_http::{HttpBackendConfig, HttpChatBackend};

const EXIT_CONFIG: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_DATA: u8 = 4;

/// An error tagged with the process exit code it should produce:
/// 2 config, 3 backend, 4 data.
#[derive(Debug)]
struct CliError {
    code: u8,
    source: anyhow::Error,
}

impl CliError {
    fn config(source: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_CONFIG,
            source: source.into(),
        }
    }

    fn backend(source: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_BACKEND,
            source: source.into(),
        }
    }

    fn data(source: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_DATA,
            source: source.into(),
        }
    }
}

impl From<RolloutError> for CliError {
    fn from(err: RolloutError) -> Self {
        match &err {
            RolloutError::InvalidConfig(_) | RolloutError::InvalidTemplate(_) => {
                CliError::config(err)
            }
            RolloutError::EmptyDataset | RolloutError::Io { .. } => CliError::data(err),
            RolloutError::Reward(pasr_core::reward::RewardError::InvalidConfig(_)) => {
                CliError::config(err)
            }
            _ => CliError::backend(err),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(err: EvalError) -> Self {
        match &err {
            EvalError::InvalidConfig(_) => CliError::config(err),
            _ => CliError::data(err),
        }
    }
}

impl From<ToyError> for CliError {
    fn from(err: ToyError) -> Self {
        match &err {
            ToyError::InvalidConfig(_) => CliError::config(err),
            _ => CliError::backend(err),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(err: AnalysisError) -> Self {
        CliError::config(err)
    }
}

impl From<JudgeError> for CliError {
    fn from(err: JudgeError) -> Self {
        match &err {
            JudgeError::CacheIo { .. } => CliError::data(err),
            _ => CliError::backend(err),
        }
    }
}

fn io_data(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::data(anyhow!(source).context(format!("writing {}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GrpoSection {
    epsilon: f64,
    beta: f64,
    xi: f64,
    group_size: usize,
    batch_size: usize,
    steps: u64,
    /// Documented default for full-scale runs; the toy trainer uses
    /// `toy.learning_rate` instead.
    learning_rate: f64,
}

impl Default for GrpoSection {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta: 0.04,
            xi: 1e-8,
            group_size: 8,
            batch_size: 2,
            steps: 2000,
            learning_rate: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RewardSection {
    zeta: f64,
    baseline_samples: u32,
    judge_votes: u32,
    no_refine_reward: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        let defaults = RewardConfig::default();
        Self {
            zeta: defaults.zeta,
            baseline_samples: defaults.baseline_samples,
            judge_votes: defaults.judge_votes,
            no_refine_reward: defaults.no_refine_reward,
        }
    }
}

impl RewardSection {
    fn to_config(&self) -> RewardConfig {
        RewardConfig {
            zeta: self.zeta,
            baseline_samples: self.baseline_samples,
            judge_votes: self.judge_votes,
            no_refine_reward: self.no_refine_reward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ToySection {
    n_easy: usize,
    n_hard: usize,
    learning_rate: f64,
    temperature: f64,
    rate_probe_samples: usize,
    refinement_reward_enabled: bool,
}

impl Default for ToySection {
    fn default() -> Self {
        let defaults = ToyTrainConfig::default();
        Self {
            n_easy: defaults.n_easy,
            n_hard: defaults.n_hard,
            learning_rate: defaults.learning_rate,
            temperature: defaults.temperature,
            rate_probe_samples: defaults.rate_probe_samples,
            refinement_reward_enabled: defaults.refinement_reward_enabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum GenerationChoice {
    /// Remote chat-completions endpoint.
    Http { endpoint: String, model: String },
    /// The in-process toy policy; omit `weights` for the untrained policy
    /// or paste `final_weights` from a training report.
    Toy {
        #[serde(default)]
        weights: Option<Vec<f64>>,
        #[serde(default = "default_toy_temperature")]
        temperature: f64,
    },
    /// Canned responses, cycled per call seed.
    Scripted { responses: Vec<String> },
}

fn default_toy_temperature() -> f64 {
    1.0
}

impl Default for GenerationChoice {
    fn default() -> Self {
        GenerationChoice::Toy {
            weights: None,
            temperature: default_toy_temperature(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum JudgeChoice {
    /// Trimmed string equality against the oracle answer.
    #[default]
    ExactMatch,
    /// Remote judge model behind the same chat wire format.
    Http { endpoint: String, model: String },
    /// Canned judge replies (full reply text, e.g. "Score: 0.8"), cycled
    /// per vote.
    Scripted { replies: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BackendsSection {
    generation: GenerationChoice,
    judge: JudgeChoice,
    max_concurrency: usize,
}

impl Default for BackendsSection {
    fn default() -> Self {
        Self {
            generation: GenerationChoice::default(),
            judge: JudgeChoice::default(),
            max_concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PathsSection {
    dataset: PathBuf,
    logs: PathBuf,
    /// Directory for judge and baseline-pool caches; no caching when
    /// absent.
    cache: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset.jsonl"),
            logs: PathBuf::from("logs"),
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    grpo: GrpoSection,
    reward: RewardSection,
    toy: ToySection,
    backends: BackendsSection,
    paths: PathsSection,
    seed: u64,
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|err| {
            CliError::config(anyhow!(err).context(format!("reading config {}", path.display())))
        })?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|err| {
            CliError::config(anyhow!(err).context(format!("parsing config {}", path.display())))
        })?;
        Ok(config)
    }

    fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            epsilon: self.grpo.epsilon,
            beta: self.grpo.beta,
            xi: self.grpo.xi,
            ..GrpoConfig::default()
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        self.grpo_config()
            .validate()
            .map_err(|err| CliError::config(anyhow!(err).context("grpo")))?;
        if self.grpo.group_size < 2 {
            return Err(CliError::config(anyhow!(
                "grpo.group_size must be at least 2, got {}",
                self.grpo.group_size
            )));
        }
        if self.grpo.batch_size == 0 {
            return Err(CliError::config(anyhow!("grpo.batch_size must be positive")));
        }
        if !(self.grpo.learning_rate > 0.0 && self.grpo.learning_rate.is_finite()) {
            return Err(CliError::config(anyhow!(
                "grpo.learning_rate must be positive and finite, got {}",
                self.grpo.learning_rate
            )));
        }
        self.reward
            .to_config()
            .validate()
            .map_err(|err| CliError::config(anyhow!(err).context("reward")))?;
        if self.backends.max_concurrency == 0 {
            return Err(CliError::config(anyhow!(
                "backends.max_concurrency must be positive"
            )));
        }
        match &self.backends.generation {
            GenerationChoice::Http { endpoint, model } => {
                if endpoint.is_empty() {
                    return Err(CliError::config(anyhow!(
                        "backends.generation.endpoint must not be empty"
                    )));
                }
                if model.is_empty() {
                    return Err(CliError::config(anyhow!(
                        "backends.generation.model must not be empty"
                    )));
                }
            }
            GenerationChoice::Toy { weights, temperature } => {
                let policy = ToyPolicy {
                    weights: weights.clone().unwrap_or_else(|| vec![0.0; FEATURE_COUNT]),
                    temperature: *temperature,
                };
                policy.validate().map_err(|err| {
                    CliError::config(anyhow!(err).context("backends.generation"))
                })?;
            }
            GenerationChoice::Scripted { responses } => {
                if responses.is_empty() {
                    return Err(CliError::config(anyhow!(
                        "backends.generation.responses must not be empty"
                    )));
                }
            }
        }
        match &self.backends.judge {
            JudgeChoice::Http { endpoint, model } => {
                if endpoint.is_empty() {
                    return Err(CliError::config(anyhow!(
                        "backends.judge.endpoint must not be empty"
                    )));
                }
                if model.is_empty() {
                    return Err(CliError::config(anyhow!(
                        "backends.judge.model must not be empty"
                    )));
                }
            }
            JudgeChoice::Scripted { replies } => {
                if replies.is_empty() {
                    return Err(CliError::config(anyhow!(
                        "backends.judge.replies must not be empty"
                    )));
                }
            }
            JudgeChoice::ExactMatch => {}
        }
        self.toy_train_config()
            .validate()
            .map_err(|err| CliError::config(anyhow!(err).context("toy")))?;
        Ok(())
    }

    fn toy_train_config(&self) -> ToyTrainConfig {
        ToyTrainConfig {
            seed: self.seed,
            n_easy: self.toy.n_easy,
            n_hard: self.toy.n_hard,
            steps: self.grpo.steps,
            batch_size: self.grpo.batch_size,
            group_size: self.grpo.group_size,
            learning_rate: self.toy.learning_rate,
            temperature: self.toy.temperature,
            refinement_reward_enabled: self.toy.refinement_reward_enabled,
            zeta: self.reward.zeta,
            baseline_samples: self.reward.baseline_samples as usize,
            grpo: self.grpo_config(),
            rate_probe_samples: self.toy.rate_probe_samples,
        }
    }

    fn sampling(&self) -> SamplingParams {
        SamplingParams::default().with_seed(self.seed)
    }

    fn cache_dir(&self) -> Result<Option<&Path>, CliError> {
        if let Some(dir) = &self.paths.cache {
            fs::create_dir_all(dir).map_err(io_data(dir))?;
            return Ok(Some(dir.as_path()));
        }
        Ok(None)
    }
}

fn build_generation_backend(config: &RunConfig) -> Result<Box<dyn GenerationBackend>, CliError> {
    match &config.backends.generation {
        GenerationChoice::Http { endpoint, model } => {
            let mut http = HttpBackendConfig::new(endpoint, model);
            http.max_concurrency = config.backends.max_concurrency;
            Ok(Box::new(HttpChatBackend::new(http).map_err(CliError::backend)?))
        }
        GenerationChoice::Toy { weights, temperature } => {
            let policy = ToyPolicy {
                weights: weights.clone().unwrap_or_else(|| vec![0.0; FEATURE_COUNT]),
                temperature: *temperature,
            };
            Ok(Box::new(ToyBackend::new(policy)))
        }
        GenerationChoice::Scripted { responses } => {
            Ok(Box::new(ScriptedBackend::new(responses.clone())))
        }
    }
}

/// A judge client for commands that need scoring beyond accuracy
/// (coherence, alignment, classification). Exact match cannot do that.
fn build_judge_client(config: &RunConfig) -> Result<JudgeClient, CliError> {
    let backend: Box<dyn GenerationBackend> = match &config.backends.judge {
        JudgeChoice::Http { endpoint, model } => {
            let mut http = HttpBackendConfig::new(endpoint, model);
            http.max_concurrency = config.backends.max_concurrency;
            Box::new(HttpChatBackend::new(http).map_err(CliError::backend)?)
        }
        JudgeChoice::Scripted { replies } => Box::new(ScriptedBackend::new(replies.clone())),
        JudgeChoice::ExactMatch => {
            return Err(CliError::config(anyhow!(
                "backends.judge.kind exact_match cannot classify or grade refinements; \
                 use an http or scripted judge"
            )));
        }
    };
    let mut client = JudgeClient::new(backend);
    if let Some(dir) = config.cache_dir()? {
        client = client.with_cache_file(&dir.join("judge_cache.jsonl"))?;
    }
    Ok(client)
}

fn build_accuracy_judge(config: &RunConfig) -> Result<Box<dyn AccuracyJudge>, CliError> {
    match &config.backends.judge {
        JudgeChoice::ExactMatch => Ok(Box::new(ExactMatchJudge)),
        _ => Ok(Box::new(build_judge_client(config)?)),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|err| CliError::data(anyhow!(err).context("serializing output")))?;
    body.push('\n');
    fs::write(path, body).map_err(io_data(path))
}

#[derive(Parser)]
#[command(
    name = "pasr",
    version,
    about = "Train, roll out, evaluate, and analyze proactive-refinement policies"
)]
struct Cli {
    /// JSON run config; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log filter: off, error, warn, info, debug, or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the toy policy and write a training report.
    TrainToy,
    /// Collect and score one epoch of rollouts into a JSONL log.
    Rollout {
        /// Continue an existing log, skipping queries already recorded.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the dataset and report accuracy, tokens, and refine rates.
    Eval {
        #[arg(long, value_enum, default_value_t = EvalModeArg::Paired)]
        mode: EvalModeArg,
        /// Emit the report table as markdown instead of CSV.
        #[arg(long)]
        markdown: bool,
    },
    /// Classify and grade the refine segments of a rollout log.
    Analyze {
        /// Rollout log to analyze.
        #[arg(long)]
        log: PathBuf,
        /// Histogram bin edges, e.g. --bins 0.45 0.85.
        #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"])]
        bins: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalModeArg {
    #[value(name = "refine_enabled")]
    RefineEnabled,
    #[value(name = "refine_disabled")]
    RefineDisabled,
    /// Both modes, with the token-delta column comparing them.
    #[value(name = "paired")]
    Paired,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {:#}", err.source);
            ExitCode::from(err.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let level = cli.log_level.to_ascii_lowercase();
    if !["off", "error", "warn", "info", "debug", "trace"].contains(&level.as_str()) {
        return Err(CliError::config(anyhow!(
            "log-level must be one of off, error, warn, info, debug, trace; got {:?}",
            cli.log_level
        )));
    }
    let _ = env_logger::Builder::new().parse_filters(&level).try_init();

    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    fs::create_dir_all(&config.paths.logs).map_err(io_data(&config.paths.logs))?;

    match cli.command {
        Command::TrainToy => cmd_train_toy(&config),
        Command::Rollout { resume } => cmd_rollout(&config, resume),
        Command::Eval { mode, markdown } => cmd_eval(&config, mode, markdown),
        Command::Analyze { log, bins } => {
            let bins = bins.map(|edges| (edges[0], edges[1]));
            cmd_analyze(&config, &log, bins)
        }
    }
}

fn cmd_train_toy(config: &RunConfig) -> Result<(), CliError> {
    let train_config = config.toy_train_config();
    let outcome = train_toy(&train_config)?;

    let report_path = config.paths.logs.join("training_report.json");
    write_json(&report_path, &outcome.report)?;

    let steps_path = config.paths.logs.join("training_steps.jsonl");
    let mut lines = String::new();
    for record in &outcome.step_records {
        lines.push_str(
            &serde_json::to_string(record)
                .map_err(|err| CliError::data(anyhow!(err).context("serializing step record")))?,
        );
        lines.push('\n');
    }
    fs::write(&steps_path, lines).map_err(io_data(&steps_path))?;

    let report = &outcome.report;
    println!(
        "trained {} steps; refine rate easy {:.3} hard {:.3} (untrained {:.3} / {:.3})",
        report.steps,
        report.refine_rate_easy,
        report.refine_rate_hard,
        report.initial_refine_rate_easy,
        report.initial_refine_rate_hard,
    );
    println!(
        "report {} (weights digest {})",
        report_path.display(),
        report.final_weights_digest
    );
    Ok(())
}

fn first_quarantine_error(errors_path: &Path) -> String {
    fs::read_to_string(errors_path)
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|line| !line.trim().is_empty())
                .and_then(|line| serde_json::from_str::<QuarantineRecord>(line).ok())
        })
        .map(|record| record.error)
        .unwrap_or_else(|| "no error detail recorded".to_string())
}

fn cmd_rollout(config: &RunConfig, resume: bool) -> Result<(), CliError> {
    let dataset = load_dataset(&config.paths.dataset)?;
    let log_path = config.paths.logs.join("rollout_log.jsonl");
    let errors_path = config.paths.logs.join("rollout_errors.jsonl");
    if !resume {
        let existing = fs::metadata(&log_path).map(|m| m.len()).unwrap_or(0);
        if existing > 0 {
            return Err(CliError::data(anyhow!(
                "rollout log {} already has content; pass --resume to continue it \
                 or point paths.logs at a fresh directory",
                log_path.display()
            )));
        }
    }

    let backend = build_generation_backend(config)?;
    let judge = build_accuracy_judge(config)?;
    let cache = match config.cache_dir()? {
        Some(dir) => Some(BaselinePoolCache::with_file(&dir.join("baseline_pools.jsonl"))?),
        None => None,
    };
    let epoch_config = RolloutEpochConfig {
        group_size: config.grpo.group_size,
        reward: config.reward.to_config(),
        sampling: config.sampling(),
        retry: RetryPolicy::default(),
        max_concurrency: config.backends.max_concurrency,
        policy_version: "0".to_string(),
    };

    let report = run_rollout_epoch(
        &dataset,
        backend.as_ref(),
        judge.as_ref(),
        &epoch_config,
        &log_path,
        &errors_path,
        cache.as_ref(),
    )?;

    if report.processed == 0 && report.quarantined > 0 {
        return Err(CliError::backend(anyhow!(
            "all {} queries failed; first error: {}",
            report.quarantined,
            first_quarantine_error(&errors_path)
        )));
    }
    println!(
        "rollout: processed {}, resumed {}, quarantined {}, wrote {} records to {}",
        report.processed,
        report.resumed,
        report.quarantined,
        report.records_written,
        log_path.display()
    );
    Ok(())
}

fn cmd_eval(config: &RunConfig, mode: EvalModeArg, markdown: bool) -> Result<(), CliError> {
    let dataset = load_dataset(&config.paths.dataset)?;
    let dataset_name = config
        .paths
        .dataset
        .file_stem()
        .map(|stem| stem.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());

    let backend = build_generation_backend(config)?;
    let judge = build_accuracy_judge(config)?;
    let eval_config = EvalConfig {
        judge_votes: config.reward.judge_votes,
        sampling: config.sampling(),
        retry: RetryPolicy::default(),
        max_concurrency: config.backends.max_concurrency,
    };

    let templates: Vec<PromptTemplate> = match mode {
        EvalModeArg::RefineEnabled => vec![PromptTemplate::refine_enabled()],
        EvalModeArg::RefineDisabled => vec![PromptTemplate::refine_disabled()],
        EvalModeArg::Paired => {
            vec![PromptTemplate::refine_disabled(), PromptTemplate::refine_enabled()]
        }
    };

    let mut reports: Vec<EvalReport> = Vec::new();
    for template in &templates {
        let report = evaluate(
            backend.as_ref(),
            judge.as_ref(),
            &dataset,
            template,
            &eval_config,
            &dataset_name,
        )?;
        if report.n == 0 && report.quarantined > 0 {
            let detail = report
                .quarantine
                .first()
                .map(|q| q.error.clone())
                .unwrap_or_default();
            return Err(CliError::backend(anyhow!(
                "all {} records failed under {}; first error: {detail}",
                report.quarantined,
                report.mode
            )));
        }
        let report_path = config
            .paths
            .logs
            .join(format!("eval_report_{}.json", report.mode));
        write_json(&report_path, &report)?;
        reports.push(report);
    }

    let (table, table_path) = if markdown {
        (render_report_markdown(&reports), config.paths.logs.join("eval_report.md"))
    } else {
        (render_report_csv(&reports), config.paths.logs.join("eval_report.csv"))
    };
    fs::write(&table_path, &table).map_err(io_data(&table_path))?;
    print!("{table}");
    println!("table written to {}", table_path.display());
    Ok(())
}

fn cmd_analyze(config: &RunConfig, log: &Path, bins: Option<(f64, f64)>) -> Result<(), CliError> {
    let dataset = load_dataset(&config.paths.dataset)?;
    let questions: HashMap<&str, &DatasetRecord> =
        dataset.iter().map(|record| (record.id.as_str(), record)).collect();

    let text = fs::read_to_string(log).map_err(|err| {
        CliError::data(anyhow!(err).context(format!("reading rollout log {}", log.display())))
    })?;
    let mut inputs = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RolloutLogRecord = serde_json::from_str(line).map_err(|err| {
            CliError::data(anyhow!(err).context(format!(
                "malformed rollout record at {}:{}",
                log.display(),
                index + 1
            )))
        })?;
        if record.prompt_mode != PromptMode::RefineEnabled {
            continue;
        }
        let Some(dataset_record) = questions.get(record.query_id.as_str()) else {
            return Err(CliError::data(anyhow!(
                "query id {:?} from the log is not in dataset {}",
                record.query_id,
                config.paths.dataset.display()
            )));
        };
        inputs.push(AnalysisInput {
            question: dataset_record.question.clone(),
            text: record.text,
        });
    }

    let client = build_judge_client(config)?;
    let mut analysis_config = AnalysisConfig::default();
    if let Some(edges) = bins {
        analysis_config.bin_edges = edges;
    }
    let summary = analyze_traces(&client, &inputs, &analysis_config)?;

    let summary_path = config.paths.logs.join("analysis_summary.json");
    write_json(&summary_path, &summary)?;
    println!(
        "analyzed {} traces ({} with refines, {} segments, {} failed calls); summary {}",
        summary.traces,
        summary.traces_with_refines,
        summary.refine_segments,
        summary.failed,
        summary_path.display()
    );
    for (kind, count) in &summary.type_counts {
        println!("  {}: {count}", kind.label());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
        assert_eq!(config.grpo.epsilon, 0.2);
        assert_eq!(config.grpo.beta, 0.04);
        assert_eq!(config.grpo.group_size, 8);
        assert_eq!(config.grpo.batch_size, 2);
        assert_eq!(config.grpo.learning_rate, 1e-6);
    }

    #[test]
    fn out_of_range_fields_are_named_in_the_error() {
        let mut config = RunConfig::default();
        config.grpo.epsilon = 7.0;
        let err = config.validate().unwrap_err();
        assert_eq!(err.code, EXIT_CONFIG);
        assert!(format!("{:#}", err.source).contains("epsilon"));

        let mut config = RunConfig::default();
        config.backends.max_concurrency = 0;
        let err = config.validate().unwrap_err();
        assert!(format!("{:#}", err.source).contains("max_concurrency"));

        let mut config = RunConfig::default();
        config.toy.learning_rate = -1.0;
        let err = config.validate().unwrap_err();
        assert!(format!("{:#}", err.source).contains("learning_rate"));
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>("{\"grpo\": {\"epsilno\": 0.2}}").unwrap_err();
        assert!(err.to_string().contains("epsilno"));
    }

    #[test]
    fn partial_configs_inherit_defaults() {
        let config: RunConfig =
            serde_json::from_str("{\"seed\": 9, \"grpo\": {\"steps\": 5}}").unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.grpo.steps, 5);
        assert_eq!(config.grpo.group_size, 8);
        assert_eq!(config.reward.zeta, 0.1);
    }

    #[test]
    fn backend_choices_parse_by_kind() {
        let config: RunConfig = serde_json::from_str(
            "{\"backends\": {\"generation\": {\"kind\": \"http\", \"endpoint\": \"http://h/v1\", \
             \"model\": \"m\"}, \"judge\": {\"kind\": \"scripted\", \"replies\": [\"Score: 1\"]}}}",
        )
        .unwrap();
        assert!(matches!(
            config.backends.generation,
            GenerationChoice::Http { .. }
        ));
        assert!(matches!(config.backends.judge, JudgeChoice::Scripted { .. }));
        config.validate().unwrap();

        let mut empty = config.clone();
        empty.backends.generation = GenerationChoice::Http {
            endpoint: String::new(),
            model: "m".to_string(),
        };
        let err = empty.validate().unwrap_err();
        assert!(format!("{:#}", err.source).contains("backends.generation.endpoint"));
    }

    #[test]
    fn error_codes_map_by_class() {
        assert_eq!(CliError::from(RolloutError::EmptyDataset).code, EXIT_DATA);
        assert_eq!(
            CliError::from(RolloutError::InvalidConfig("x".to_string())).code,
            EXIT_CONFIG
        );
        assert_eq!(CliError::from(EvalError::EmptyDataset).code, EXIT_DATA);
        assert_eq!(
            CliError::from(ToyError::InvalidConfig("x".to_string())).code,
            EXIT_CONFIG
        );
    }
}

//! Group sampling, baseline pools, and the durable rollout loop.
//!
//! A rollout epoch walks a dataset once. For each query it samples a
//! refine-disabled baseline pool (cached per query and policy version),
//! samples a refine-enabled group, scores the group with
//! [`crate::reward::score_group`], and appends every sample as one JSONL
//! line. All lines for a query are appended in a single write so a crash
//! never leaves a query half-logged; restarting with the same log path
//! skips queries that already have lines. Queries whose backend or judge
//! calls fail after retries are quarantined to a side file instead of
//! aborting the epoch.
//!
//! Determinism: each sample's seed derives from (base seed, query id,
//! prompt mode, sample index), so results are independent of concurrency
//! interleaving and of which queries were resumed.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    bounded_map, derive_seed, BackendError, GenerationBackend, RetryPolicy, SamplingParams,
};
use crate::judge::{AccuracyJudge, JudgeError};
use crate::reward::{
    accuracy_reward, judged_answer, score_group, BaselinePool, QueryContext, RewardBreakdown,
    RewardConfig, RewardError,
};

pub const THINK_ANSWER_RULES: &str = "You are a careful problem solver. Structure every reply \
with tagged blocks.\n\nWrite your reasoning between <think> and </think>.";

const REFINE_RULES: &str = " While reasoning, you may revise what you have written so far by \
opening <refine>, writing the correction, and closing </refine>. Refine blocks belong inside \
the think block. Use one whenever you notice a mistake to fix, missing information to add, a \
stronger approach to switch to, or a drift away from the task; if nothing needs revision, do \
not open one.";

const ANSWER_RULES: &str = "\n\nAfter the think block, give the final answer between <answer> \
and </answer>. Output nothing outside the tags.";

/// Whether the system prompt permits refine blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    RefineEnabled,
    RefineDisabled,
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PromptMode::RefineEnabled => f.write_str("refine_enabled"),
            PromptMode::RefineDisabled => f.write_str("refine_disabled"),
        }
    }
}

/// System prompt for one mode. The texts embed the exact tag literals the
/// parser recognizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub mode: PromptMode,
    pub system_text: String,
}

impl PromptTemplate {
    pub fn refine_enabled() -> Self {
        Self {
            mode: PromptMode::RefineEnabled,
            system_text: format!("{THINK_ANSWER_RULES}{REFINE_RULES}{ANSWER_RULES}"),
        }
    }

    pub fn refine_disabled() -> Self {
        Self {
            mode: PromptMode::RefineDisabled,
            system_text: format!("{THINK_ANSWER_RULES}{ANSWER_RULES}"),
        }
    }

    /// Check that the text actually teaches the tags its mode promises.
    pub fn validate(&self) -> Result<(), RolloutError> {
        use crate::tag_grammar as tg;
        let required: &[&str] = match self.mode {
            PromptMode::RefineEnabled => &[
                tg::THINK_OPEN,
                tg::THINK_CLOSE,
                tg::REFINE_OPEN,
                tg::REFINE_CLOSE,
                tg::ANSWER_OPEN,
                tg::ANSWER_CLOSE,
            ],
            PromptMode::RefineDisabled => {
                &[tg::THINK_OPEN, tg::THINK_CLOSE, tg::ANSWER_OPEN, tg::ANSWER_CLOSE]
            }
        };
        for literal in required {
            if !self.system_text.contains(literal) {
                return Err(RolloutError::InvalidTemplate(format!(
                    "{} template does not mention {literal}",
                    self.mode
                )));
            }
        }
        if self.mode == PromptMode::RefineDisabled
            && (self.system_text.contains(tg::REFINE_OPEN)
                || self.system_text.contains(tg::REFINE_CLOSE))
        {
            return Err(RolloutError::InvalidTemplate(
                "refine_disabled template mentions refine tags".to_string(),
            ));
        }
        Ok(())
    }

    pub fn inputs(&self, question: &str) -> crate::backend::PromptInputs {
        crate::backend::PromptInputs {
            system: self.system_text.clone(),
            user: question.to_string(),
        }
    }
}

/// Where a sample's token count came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCountSource {
    Reported,
    WhitespaceFallback,
}

/// One sampled completion.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSample {
    pub text: String,
    pub token_count: u32,
    pub token_count_source: TokenCountSource,
    pub logprob_old: Option<f64>,
}

/// All completions sampled for one query under one prompt mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub query_id: String,
    pub prompt_mode: PromptMode,
    pub samples: Vec<RolloutSample>,
    pub sampling_params: SamplingParams,
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid rollout config: {0}")]
    InvalidConfig(String),
    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {sample_index} for query {query_id:?} failed: {source}")]
    SampleFailed {
        query_id: String,
        sample_index: usize,
        #[source]
        source: BackendError,
    },
    #[error("judging baseline sample {sample_index} for query {query_id:?} failed: {source}")]
    BaselineJudgeFailed {
        query_id: String,
        sample_index: usize,
        #[source]
        source: JudgeError,
    },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("rollout i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RolloutError + '_ {
    move |source| RolloutError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sample `n` completions for one query, seeding each sample independently
/// of completion order.
pub fn sample_group(
    backend: &dyn GenerationBackend,
    query_id: &str,
    question: &str,
    n: usize,
    template: &PromptTemplate,
    params: &SamplingParams,
    retry: &RetryPolicy,
    max_concurrency: usize,
) -> Result<RolloutGroup, RolloutError> {
    if n == 0 {
        return Err(RolloutError::InvalidConfig(
            "group size must be at least 1".to_string(),
        ));
    }
    template.validate()?;
    let base_seed = params.seed.unwrap_or(0);
    let inputs = template.inputs(question);
    let results = bounded_map(n, max_concurrency, |i| {
        let seed = derive_seed(base_seed, &format!("{query_id}/{}/{i}", template.mode));
        let sample_params = params.with_seed(seed);
        retry.run(|| backend.generate(&inputs, &sample_params))
    });
    let mut samples = Vec::with_capacity(n);
    for (sample_index, result) in results.into_iter().enumerate() {
        let generation = result.map_err(|source| RolloutError::SampleFailed {
            query_id: query_id.to_string(),
            sample_index,
            source,
        })?;
        let (token_count, token_count_source) = match generation.completion_tokens {
            Some(count) => (count, TokenCountSource::Reported),
            None => (
                generation.text.split_whitespace().count() as u32,
                TokenCountSource::WhitespaceFallback,
            ),
        };
        samples.push(RolloutSample {
            text: generation.text,
            token_count,
            token_count_source,
            logprob_old: generation.logprob,
        });
    }
    Ok(RolloutGroup {
        query_id: query_id.to_string(),
        prompt_mode: template.mode,
        samples,
        sampling_params: params.clone(),
    })
}

/// A baseline sample that was actually generated (cache misses only), kept
/// so the epoch log can record it.
#[derive(Debug, Clone, PartialEq)]
pub struct FreshBaselineSample {
    pub text: String,
    pub token_count: u32,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct PoolOutcome {
    pub pool: BaselinePool,
    /// `None` when the pool came from the cache.
    pub fresh_samples: Option<Vec<FreshBaselineSample>>,
}

/// In-memory pool cache keyed by (query id, policy version), optionally
/// persisted as checksummed JSONL.
pub struct BaselinePoolCache {
    entries: Mutex<HashMap<(String, String), BaselinePool>>,
    persist_path: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct PoolCacheLine {
    query_id: String,
    policy_version: String,
    pool: BaselinePool,
    checksum: String,
}

fn pool_checksum(query_id: &str, policy_version: &str, pool: &BaselinePool) -> String {
    let body = serde_json::to_string(pool).expect("pool serializes");
    let mut hasher = Sha256::new();
    hasher.update(query_id.as_bytes());
    hasher.update([0x1f]);
    hasher.update(policy_version.as_bytes());
    hasher.update([0x1f]);
    hasher.update(body.as_bytes());
    hex::encode(hasher.finalize())
}

impl BaselinePoolCache {
    pub fn new() -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            persist_path: None,
        }
    }

    /// Load any intact entries from `path` and persist new ones there.
    /// Entries whose checksum does not match are skipped.
    pub fn with_file(path: &Path) -> Result<Self, RolloutError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(io_err(path))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<PoolCacheLine>(&line) {
                    Ok(entry)
                        if entry.checksum
                            == pool_checksum(
                                &entry.query_id,
                                &entry.policy_version,
                                &entry.pool,
                            ) =>
                    {
                        entries.insert((entry.query_id, entry.policy_version), entry.pool);
                    }
                    _ => log::warn!("skipping corrupt baseline cache line in {}", path.display()),
                }
            }
        }
        Ok(Self {
            entries: Mutex::new(entries),
            persist_path: Some(path.to_path_buf()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, query_id: &str, policy_version: &str) -> Option<BaselinePool> {
        self.entries
            .lock()
            .expect("cache lock")
            .get(&(query_id.to_string(), policy_version.to_string()))
            .cloned()
    }

    pub fn insert(&self, policy_version: &str, pool: &BaselinePool) -> Result<(), RolloutError> {
        self.entries.lock().expect("cache lock").insert(
            (pool.query_id.clone(), policy_version.to_string()),
            pool.clone(),
        );
        if let Some(path) = &self.persist_path {
            let line = PoolCacheLine {
                query_id: pool.query_id.clone(),
                policy_version: policy_version.to_string(),
                pool: pool.clone(),
                checksum: pool_checksum(&pool.query_id, policy_version, pool),
            };
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(io_err(path))?;
            let mut body = serde_json::to_string(&line).expect("cache line serializes");
            body.push('\n');
            file.write_all(body.as_bytes()).map_err(io_err(path))?;
            file.flush().map_err(io_err(path))?;
        }
        Ok(())
    }
}

impl Default for BaselinePoolCache {
    fn default() -> Self {
        Self::new()
    }
}

/// Sample and judge a refine-disabled pool for one query, or fetch it from
/// the cache.
#[allow(clippy::too_many_arguments)]
pub fn build_baseline_pool(
    backend: &dyn GenerationBackend,
    query_id: &str,
    query: QueryContext<'_>,
    pool_size: u32,
    judge: &dyn AccuracyJudge,
    judge_votes: u32,
    template: &PromptTemplate,
    params: &SamplingParams,
    retry: &RetryPolicy,
    max_concurrency: usize,
    cache: Option<&BaselinePoolCache>,
    policy_version: &str,
) -> Result<PoolOutcome, RolloutError> {
    if template.mode != PromptMode::RefineDisabled {
        return Err(RolloutError::InvalidTemplate(
            "baseline pools must use the refine_disabled template".to_string(),
        ));
    }
    if let Some(cache) = cache {
        if let Some(pool) = cache.get(query_id, policy_version) {
            return Ok(PoolOutcome {
                pool,
                fresh_samples: None,
            });
        }
    }
    let group = sample_group(
        backend,
        query_id,
        query.question,
        pool_size.max(1) as usize,
        template,
        params,
        retry,
        max_concurrency,
    )?;
    let mut scores = Vec::with_capacity(group.samples.len());
    let mut fresh = Vec::with_capacity(group.samples.len());
    for (sample_index, sample) in group.samples.iter().enumerate() {
        let (answer, _, _) = judged_answer(&sample.text);
        let score = accuracy_reward(judge, query, &answer, judge_votes).map_err(|source| {
            RolloutError::BaselineJudgeFailed {
                query_id: query_id.to_string(),
                sample_index,
                source,
            }
        })?;
        scores.push(score);
        fresh.push(FreshBaselineSample {
            text: sample.text.clone(),
            token_count: sample.token_count,
            score,
        });
    }
    let pool = BaselinePool::new(query_id, scores)?;
    if let Some(cache) = cache {
        cache.insert(policy_version, &pool)?;
    }
    Ok(PoolOutcome {
        pool,
        fresh_samples: Some(fresh),
    })
}

/// One JSONL line of the rollout log. Baseline samples carry
/// `baseline_score`, refine-enabled samples carry the full breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLogRecord {
    pub query_id: String,
    pub prompt_mode: PromptMode,
    pub sample_index: u32,
    pub text: String,
    pub token_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<RewardBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_score: Option<f64>,
}

/// One JSONL line of the quarantine file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub query_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutEpochConfig {
    /// Refine-enabled samples per query.
    pub group_size: usize,
    pub reward: RewardConfig,
    pub sampling: SamplingParams,
    pub retry: RetryPolicy,
    pub max_concurrency: usize,
    /// Tag for baseline cache entries; bump it when the sampling policy
    /// changes so stale pools are not reused.
    pub policy_version: String,
}

impl Default for RolloutEpochConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            reward: RewardConfig::default(),
            sampling: SamplingParams::default(),
            retry: RetryPolicy::default(),
            max_concurrency: 4,
            policy_version: "0".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutEpochReport {
    pub processed: usize,
    pub resumed: usize,
    pub quarantined: usize,
    pub records_written: usize,
}

/// Query ids that already have log lines; trims a partial trailing line
/// left by a crash so subsequent appends start on a line boundary.
fn completed_queries(path: &Path) -> Result<HashSet<String>, RolloutError> {
    let mut completed = HashSet::new();
    if !path.exists() {
        return Ok(completed);
    }
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if !bytes.is_empty() && bytes.last() != Some(&b'\n') {
        let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
        log::warn!(
            "trimming {} bytes of partial trailing line from {}",
            bytes.len() - keep,
            path.display()
        );
        bytes.truncate(keep);
        let mut file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        file.set_len(keep as u64).map_err(io_err(path))?;
        file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
    }
    for line in bytes.split(|b| *b == b'\n') {
        if line.is_empty() {
            continue;
        }
        match serde_json::from_slice::<RolloutLogRecord>(line) {
            Ok(record) => {
                completed.insert(record.query_id);
            }
            Err(_) => log::warn!("ignoring unparseable log line in {}", path.display()),
        }
    }
    Ok(completed)
}

/// The fields run_rollout_epoch needs from a dataset record.
pub trait RolloutQuery {
    fn query_id(&self) -> &str;
    fn context(&self) -> QueryContext<'_>;
}

/// Walk the dataset once, scoring each query's group and appending the
/// results to `log_path`. Already-logged queries are skipped; failing
/// queries are quarantined to `errors_path` and do not stop the epoch.
pub fn run_rollout_epoch<Q: RolloutQuery>(
    dataset: &[Q],
    backend: &dyn GenerationBackend,
    judge: &dyn AccuracyJudge,
    config: &RolloutEpochConfig,
    log_path: &Path,
    errors_path: &Path,
    cache: Option<&BaselinePoolCache>,
) -> Result<RolloutEpochReport, RolloutError> {
    if dataset.is_empty() {
        return Err(RolloutError::EmptyDataset);
    }
    if config.group_size == 0 {
        return Err(RolloutError::InvalidConfig(
            "group_size must be at least 1".to_string(),
        ));
    }
    config.reward.validate()?;

    let enabled = PromptTemplate::refine_enabled();
    let disabled = PromptTemplate::refine_disabled();
    let completed = completed_queries(log_path)?;

    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(log_path)
        .map_err(io_err(log_path))?;
    let mut report = RolloutEpochReport {
        processed: 0,
        resumed: 0,
        quarantined: 0,
        records_written: 0,
    };

    for record in dataset {
        let query_id = record.query_id();
        if completed.contains(query_id) {
            report.resumed += 1;
            continue;
        }
        match process_query(record, backend, judge, config, &enabled, &disabled, cache) {
            Ok(lines) => {
                let mut buffer = String::new();
                for line in &lines {
                    buffer.push_str(&serde_json::to_string(line).expect("record serializes"));
                    buffer.push('\n');
                }
                log_file
                    .write_all(buffer.as_bytes())
                    .map_err(io_err(log_path))?;
                log_file.flush().map_err(io_err(log_path))?;
                report.records_written += lines.len();
                report.processed += 1;
            }
            Err(err) => {
                log::warn!("quarantining query {query_id:?}: {err}");
                let entry = QuarantineRecord {
                    query_id: query_id.to_string(),
                    error: err.to_string(),
                };
                let mut line = serde_json::to_string(&entry).expect("quarantine serializes");
                line.push('\n');
                let mut errors_file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(errors_path)
                    .map_err(io_err(errors_path))?;
                errors_file
                    .write_all(line.as_bytes())
                    .map_err(io_err(errors_path))?;
                errors_file.flush().map_err(io_err(errors_path))?;
                report.quarantined += 1;
            }
        }
    }
    Ok(report)
}

fn process_query<Q: RolloutQuery>(
    record: &Q,
    backend: &dyn GenerationBackend,
    judge: &dyn AccuracyJudge,
    config: &RolloutEpochConfig,
    enabled: &PromptTemplate,
    disabled: &PromptTemplate,
    cache: Option<&BaselinePoolCache>,
) -> Result<Vec<RolloutLogRecord>, RolloutError> {
    let query_id = record.query_id();
    let query = record.context();
    let outcome = build_baseline_pool(
        backend,
        query_id,
        query,
        config.reward.baseline_samples,
        judge,
        config.reward.judge_votes,
        disabled,
        &config.sampling,
        &config.retry,
        config.max_concurrency,
        cache,
        &config.policy_version,
    )?;
    let group = sample_group(
        backend,
        query_id,
        query.question,
        config.group_size,
        enabled,
        &config.sampling,
        &config.retry,
        config.max_concurrency,
    )?;
    let breakdowns = score_group(query, &group, &outcome.pool, judge, &config.reward)?;

    let mut lines = Vec::new();
    if let Some(fresh) = outcome.fresh_samples {
        for (i, sample) in fresh.into_iter().enumerate() {
            lines.push(RolloutLogRecord {
                query_id: query_id.to_string(),
                prompt_mode: PromptMode::RefineDisabled,
                sample_index: i as u32,
                text: sample.text,
                token_count: sample.token_count,
                rewards: None,
                baseline_score: Some(sample.score),
            });
        }
    }
    for (i, (sample, rewards)) in group.samples.iter().zip(breakdowns).enumerate() {
        lines.push(RolloutLogRecord {
            query_id: query_id.to_string(),
            prompt_mode: PromptMode::RefineEnabled,
            sample_index: i as u32,
            text: sample.text.clone(),
            token_count: sample.token_count,
            rewards: Some(rewards),
            baseline_score: None,
        });
    }
    Ok(lines)
}

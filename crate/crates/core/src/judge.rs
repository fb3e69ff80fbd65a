//! Judge prompts, reply parsing, and the cached voting client.
//!
//! Four prompt kinds share one shape: instructions, the material under
//! judgment, and a fixed final-line convention the parser keys on. Accuracy
//! prompts grade a candidate answer against a ground truth (with a
//! task-kind-specific grading instruction); coherence and alignment prompts
//! score refinement behavior on a trace; the refinement-type prompt
//! classifies one segment into four behaviors.
//!
//! Score extraction is deliberately rigid: the last standalone decimal in
//! [0, 1] on the final non-empty line of the reply. Verdicts aggregate a
//! configurable number of votes and are cached by content digest so repeated
//! analysis passes do not re-bill the judge.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    BackendError, GenerationBackend, PromptInputs, RetryPolicy, SamplingParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    Accuracy,
    Coherence,
    Alignment,
    RefinementType,
}

/// Dataset task families; they select the grading instruction used by
/// accuracy prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Open,
    MultipleChoice,
    Summarization,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TaskKind::Open => "open",
            TaskKind::MultipleChoice => "multiple_choice",
            TaskKind::Summarization => "summarization",
        };
        f.write_str(name)
    }
}

/// The four refinement behaviors a segment can be classified into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementType {
    ErrorCorrection,
    InformationComplement,
    SolutionImprovement,
    TaskAlignment,
}

impl RefinementType {
    pub const ALL: [RefinementType; 4] = [
        RefinementType::ErrorCorrection,
        RefinementType::InformationComplement,
        RefinementType::SolutionImprovement,
        RefinementType::TaskAlignment,
    ];

    /// Human-readable label, as the judge is asked to produce it.
    pub fn label(&self) -> &'static str {
        match self {
            RefinementType::ErrorCorrection => "error correction",
            RefinementType::InformationComplement => "information complement",
            RefinementType::SolutionImprovement => "solution improvement",
            RefinementType::TaskAlignment => "task alignment",
        }
    }
}

/// One judging request. Field use varies by kind:
///
/// - `Accuracy`: `question` + `oracle_answer` + `candidate` (the answer).
/// - `Coherence`: `extra_context` (reasoning before the refinement) +
///   `candidate` (reasoning from the refinement onward).
/// - `Alignment`: `extra_context` (the full trace) + `candidate` (the final
///   answer).
/// - `RefinementType`: `question` + `extra_context` (preceding reasoning) +
///   `candidate` (the segment).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub kind: JudgeKind,
    pub task_kind: TaskKind,
    pub question: String,
    pub oracle_answer: Option<String>,
    pub candidate: String,
    pub extra_context: Option<String>,
}

impl JudgeRequest {
    pub fn accuracy(task_kind: TaskKind, question: &str, oracle: &str, candidate: &str) -> Self {
        Self {
            kind: JudgeKind::Accuracy,
            task_kind,
            question: question.to_string(),
            oracle_answer: Some(oracle.to_string()),
            candidate: candidate.to_string(),
            extra_context: None,
        }
    }

    pub fn coherence(pre_text: &str, refined_text: &str) -> Self {
        Self {
            kind: JudgeKind::Coherence,
            task_kind: TaskKind::Open,
            question: String::new(),
            oracle_answer: None,
            candidate: refined_text.to_string(),
            extra_context: Some(pre_text.to_string()),
        }
    }

    pub fn alignment(full_trace: &str, final_answer: &str) -> Self {
        Self {
            kind: JudgeKind::Alignment,
            task_kind: TaskKind::Open,
            question: String::new(),
            oracle_answer: None,
            candidate: final_answer.to_string(),
            extra_context: Some(full_trace.to_string()),
        }
    }

    pub fn refinement_type(question: &str, preceding_context: &str, segment: &str) -> Self {
        Self {
            kind: JudgeKind::RefinementType,
            task_kind: TaskKind::Open,
            question: question.to_string(),
            oracle_answer: None,
            candidate: segment.to_string(),
            extra_context: Some(preceding_context.to_string()),
        }
    }

    fn validate(&self) -> Result<(), JudgeError> {
        match self.kind {
            JudgeKind::Accuracy => {
                if self.oracle_answer.is_none() {
                    return Err(JudgeError::MissingField {
                        field: "oracle_answer",
                        kind: self.kind,
                    });
                }
            }
            JudgeKind::Coherence | JudgeKind::Alignment | JudgeKind::RefinementType => {
                if self.extra_context.is_none() {
                    return Err(JudgeError::MissingField {
                        field: "extra_context",
                        kind: self.kind,
                    });
                }
            }
        }
        Ok(())
    }

    /// Content digest identifying this request for caching.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for part in [
            format!("{:?}", self.kind),
            format!("{:?}", self.task_kind),
            self.question.clone(),
            self.oracle_answer.clone().unwrap_or_default(),
            self.candidate.clone(),
            self.extra_context.clone().unwrap_or_default(),
        ] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no score found in judge reply: {reply:?}")]
    Unparseable { reply: String },
    #[error("unrecognized refinement label in judge reply: {reply:?}")]
    UnknownLabel { reply: String },
    #[error("only {parsed} of {votes} judge votes parsed (need {needed})")]
    InsufficientVotes { parsed: u32, votes: u32, needed: u32 },
    #[error("judge request missing {field} for kind {kind:?}")]
    MissingField {
        field: &'static str,
        kind: JudgeKind,
    },
    #[error("judge cache i/o at {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

const SCORE_INSTRUCTION: &str =
    "Give brief reasoning, then end with a final line of exactly:\nScore: <decimal between 0 and 1>";

/// Render the prompt text for a request. Deterministic: equal requests yield
/// byte-identical prompts.
pub fn build_judge_prompt(request: &JudgeRequest) -> Result<String, JudgeError> {
    request.validate()?;
    let prompt = match request.kind {
        JudgeKind::Accuracy => {
            let grading_line = match request.task_kind {
                TaskKind::Open => {
                    "Grade semantic correctness: full credit for an answer equivalent to the \
                     ground truth, partial credit for a partially correct answer."
                }
                TaskKind::MultipleChoice => {
                    "Grade the selected option: full credit only when the candidate selects the \
                     same option as the ground truth, no partial credit."
                }
                TaskKind::Summarization => {
                    "Grade how faithfully the candidate summary preserves the key content of the \
                     reference summary."
                }
            };
            format!(
                "You are an impartial grader. Judge the candidate answer against the ground \
                 truth. Ground your judgment in the ground truth, not in your own solution to \
                 the question.\n\n{grading_line}\n\nQuestion:\n{question}\n\nGround truth:\n\
                 {oracle}\n\nCandidate answer:\n{candidate}\n\n{SCORE_INSTRUCTION}",
                question = request.question,
                oracle = request.oracle_answer.as_deref().unwrap_or_default(),
                candidate = request.candidate,
            )
        }
        JudgeKind::Coherence => format!(
            "You are judging whether a refinement builds coherently on the reasoning that \
             precedes it. Score the semantic consistency of the two excerpts: high when the \
             refined continuation follows from and improves the earlier reasoning, low when it \
             abandons or contradicts it.\n\nReasoning before the refinement:\n{pre}\n\n\
             Reasoning from the refinement onward:\n{post}\n\n{SCORE_INSTRUCTION}",
            pre = request.extra_context.as_deref().unwrap_or_default(),
            post = request.candidate,
        ),
        JudgeKind::Alignment => format!(
            "You are judging whether a reasoning trace supports the final answer drawn from it. \
             Score the consistency between the trace's refinements and the final answer: high \
             when the answer follows directly from the refined reasoning, low when it ignores \
             or contradicts it.\n\nReasoning trace:\n{trace}\n\nFinal answer:\n{answer}\n\n\
             {SCORE_INSTRUCTION}",
            trace = request.extra_context.as_deref().unwrap_or_default(),
            answer = request.candidate,
        ),
        JudgeKind::RefinementType => format!(
            "You are classifying one refinement segment from a reasoning trace into exactly one \
             behavior:\n\
             - error correction: fixes a factual, logical, or computational mistake in the \
             earlier reasoning.\n\
             - information complement: adds missing details the task needs for a complete, \
             correct result.\n\
             - solution improvement: replaces the current approach or its presentation with a \
             better one.\n\
             - task alignment: brings the content back in line with what the task asked for.\n\n\
             Question:\n{question}\n\nReasoning before the refinement:\n{context}\n\n\
             Refinement segment:\n{segment}\n\n\
             Give brief reasoning, then end with a final line of exactly:\n\
             Type: <one of: error correction | information complement | solution improvement | \
             task alignment>",
            question = request.question,
            context = request.extra_context.as_deref().unwrap_or_default(),
            segment = request.candidate,
        ),
    };
    Ok(prompt)
}

/// Extract the judge's score: the last standalone decimal in [0, 1] on the
/// final non-empty line of the reply. `1`, `1.0`, and `1.00` all parse to
/// the same value; out-of-range numbers never match.
pub fn parse_judge_score(reply: &str) -> Result<f64, JudgeError> {
    let line = reply
        .lines()
        .rev()
        .find(|line| !line.trim().is_empty())
        .unwrap_or("");
    let mut found = None;
    for token in line.split_whitespace() {
        let trimmed = token
            .trim_start_matches(|c: char| !c.is_ascii_digit() && c != '-' && c != '.')
            .trim_end_matches(|c: char| !c.is_ascii_digit());
        if trimmed.is_empty() {
            continue;
        }
        if let Ok(value) = trimmed.parse::<f64>() {
            if (0.0..=1.0).contains(&value) {
                found = Some(value);
            }
        }
    }
    found.ok_or_else(|| JudgeError::Unparseable {
        reply: reply.to_string(),
    })
}

/// Extract the classification label from the final non-empty line. Accepts
/// the four labels case-insensitively, in space or underscore form, with an
/// optional `Type:` prefix.
pub fn parse_refinement_label(reply: &str) -> Result<RefinementType, JudgeError> {
    let line = reply
        .lines()
        .rev()
        .find(|line| !line.trim().is_empty())
        .unwrap_or("")
        .trim();
    let mut candidate = line.to_ascii_lowercase();
    if let Some(rest) = candidate.strip_prefix("type:") {
        candidate = rest.to_string();
    }
    let normalized: String = candidate
        .replace('_', " ")
        .trim()
        .trim_end_matches('.')
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    for kind in RefinementType::ALL {
        if normalized == kind.label() {
            return Ok(kind);
        }
    }
    Err(JudgeError::UnknownLabel {
        reply: reply.to_string(),
    })
}

/// Aggregated outcome of one judging request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    /// Mean of the parsed votes.
    pub score: f64,
    /// Individual parsed votes, in call order.
    pub votes: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    verdict: JudgeVerdict,
    /// Digest over `key` + verdict bytes; detects corrupted lines on load.
    checksum: String,
}

impl CacheEntry {
    fn new(key: String, verdict: JudgeVerdict) -> Self {
        let checksum = Self::checksum_of(&key, &verdict);
        Self {
            key,
            verdict,
            checksum,
        }
    }

    fn checksum_of(key: &str, verdict: &JudgeVerdict) -> String {
        let mut hasher = Sha256::new();
        hasher.update(key.as_bytes());
        hasher.update(serde_json::to_vec(verdict).expect("verdict serializes"));
        hex::encode(hasher.finalize())
    }

    fn is_intact(&self) -> bool {
        self.checksum == Self::checksum_of(&self.key, &self.verdict)
    }
}

/// Judge over a generation backend, with vote aggregation, retries, and a
/// content-addressed verdict cache (optionally persisted as JSONL).
pub struct JudgeClient {
    backend: Box<dyn GenerationBackend>,
    retry: RetryPolicy,
    sampling: SamplingParams,
    cache: Mutex<HashMap<String, JudgeVerdict>>,
    persist_path: Option<PathBuf>,
}

impl JudgeClient {
    /// Judge calls sample at temperature 0 so verdicts are as repeatable as
    /// the endpoint allows.
    pub fn new(backend: Box<dyn GenerationBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            sampling: SamplingParams {
                temperature: 0.0,
                top_p: 1.0,
                max_tokens: 512,
                seed: None,
            },
            cache: Mutex::new(HashMap::new()),
            persist_path: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Attach a JSONL cache file, loading any intact entries already in it.
    /// Corrupted lines are skipped with a warning rather than failing the
    /// load.
    pub fn with_cache_file(mut self, path: &Path) -> Result<Self, JudgeError> {
        if path.exists() {
            let contents = fs::read_to_string(path).map_err(|source| JudgeError::CacheIo {
                path: path.to_path_buf(),
                source,
            })?;
            let mut cache = self.cache.lock().expect("judge cache poisoned");
            let mut skipped = 0usize;
            for line in contents.lines().filter(|l| !l.trim().is_empty()) {
                match serde_json::from_str::<CacheEntry>(line) {
                    Ok(entry) if entry.is_intact() => {
                        cache.insert(entry.key, entry.verdict);
                    }
                    _ => skipped += 1,
                }
            }
            if skipped > 0 {
                log::warn!(
                    "judge cache {}: skipped {skipped} corrupt entries",
                    path.display()
                );
            }
        }
        self.persist_path = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().expect("judge cache poisoned").len()
    }

    fn call_judge(&self, prompt_text: &str, seed: u64) -> Result<String, JudgeError> {
        let prompt = PromptInputs {
            system: "You are a strict, consistent evaluator.".to_string(),
            user: prompt_text.to_string(),
        };
        let params = self.sampling.with_seed(seed);
        let generation = self.retry.run(|| self.backend.generate(&prompt, &params))?;
        Ok(generation.text)
    }

    fn persist(&self, entry: &CacheEntry) -> Result<(), JudgeError> {
        if let Some(path) = &self.persist_path {
            let mut line = serde_json::to_string(entry).expect("cache entry serializes");
            line.push('\n');
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut file| file.write_all(line.as_bytes()))
                .map_err(|source| JudgeError::CacheIo {
                    path: path.clone(),
                    source,
                })?;
        }
        Ok(())
    }

    /// Score a request with `votes` judge calls. At least half the votes
    /// (rounded up) must parse; the verdict is the mean of the parsed votes.
    /// Verdicts are cached by request digest and vote count.
    pub fn judge_score(&self, request: &JudgeRequest, votes: u32) -> Result<JudgeVerdict, JudgeError> {
        request.validate()?;
        let votes = votes.max(1);
        let key = format!("{}:{votes}", request.digest());
        if let Some(hit) = self
            .cache
            .lock()
            .expect("judge cache poisoned")
            .get(&key)
            .cloned()
        {
            return Ok(hit);
        }

        let prompt_text = build_judge_prompt(request)?;
        let mut parsed = Vec::new();
        let mut last_error = None;
        for vote in 0..votes {
            let reply = self.call_judge(&prompt_text, vote as u64)?;
            match parse_judge_score(&reply) {
                Ok(score) => parsed.push(score),
                Err(err) => last_error = Some(err),
            }
        }
        let needed = votes.div_ceil(2);
        if (parsed.len() as u32) < needed {
            return Err(match last_error {
                Some(err) if parsed.is_empty() => err,
                _ => JudgeError::InsufficientVotes {
                    parsed: parsed.len() as u32,
                    votes,
                    needed,
                },
            });
        }
        let score = parsed.iter().sum::<f64>() / parsed.len() as f64;
        let verdict = JudgeVerdict {
            score: score.clamp(0.0, 1.0),
            votes: parsed,
        };
        let entry = CacheEntry::new(key.clone(), verdict.clone());
        self.persist(&entry)?;
        self.cache
            .lock()
            .expect("judge cache poisoned")
            .insert(key, verdict.clone());
        Ok(verdict)
    }

    /// Classify a refinement segment with a single judge call.
    pub fn classify(&self, request: &JudgeRequest) -> Result<RefinementType, JudgeError> {
        request.validate()?;
        let prompt_text = build_judge_prompt(request)?;
        let reply = self.call_judge(&prompt_text, 0)?;
        parse_refinement_label(&reply)
    }
}

/// Single-vote accuracy judge used by reward scoring and baseline pools.
pub trait AccuracyJudge: Send + Sync {
    fn vote(
        &self,
        task_kind: TaskKind,
        question: &str,
        oracle_answer: &str,
        candidate: &str,
    ) -> Result<f64, JudgeError>;
}

impl AccuracyJudge for JudgeClient {
    fn vote(
        &self,
        task_kind: TaskKind,
        question: &str,
        oracle_answer: &str,
        candidate: &str,
    ) -> Result<f64, JudgeError> {
        let request = JudgeRequest::accuracy(task_kind, question, oracle_answer, candidate);
        let prompt_text = build_judge_prompt(&request)?;
        let reply = self.call_judge(&prompt_text, 0)?;
        parse_judge_score(&reply)
    }
}

/// Deterministic judge: full credit iff the candidate equals the oracle
/// after trimming surrounding whitespace.
pub struct ExactMatchJudge;

impl AccuracyJudge for ExactMatchJudge {
    fn vote(
        &self,
        _task_kind: TaskKind,
        _question: &str,
        oracle_answer: &str,
        candidate: &str,
    ) -> Result<f64, JudgeError> {
        Ok(if candidate.trim() == oracle_answer.trim() {
            1.0
        } else {
            0.0
        })
    }
}

/// Test judge that cycles through a fixed list of scores.
pub struct ScriptedJudge {
    scores: Vec<f64>,
    cursor: Mutex<usize>,
}

impl ScriptedJudge {
    pub fn new(scores: Vec<f64>) -> Self {
        assert!(!scores.is_empty(), "scripted judge needs scores");
        Self {
            scores,
            cursor: Mutex::new(0),
        }
    }
}

impl AccuracyJudge for ScriptedJudge {
    fn vote(
        &self,
        _task_kind: TaskKind,
        _question: &str,
        _oracle_answer: &str,
        _candidate: &str,
    ) -> Result<f64, JudgeError> {
        let mut cursor = self.cursor.lock().expect("cursor poisoned");
        let score = self.scores[*cursor % self.scores.len()];
        *cursor += 1;
        Ok(score)
    }
}

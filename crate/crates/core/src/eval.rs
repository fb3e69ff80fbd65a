//! Dataset loading, paired-mode evaluation, and report rendering.
//!
//! Datasets are JSONL: one `{id, question, oracle_answer, task_kind}`
//! object per line. `evaluate` runs every record once under a prompt
//! template, judges the answers, and aggregates accuracy, token usage, and
//! refine-block frequency. Reports render to CSV or a markdown table with
//! a fixed column set; when a refine-enabled and a refine-disabled report
//! share a dataset name, the enabled row also carries the percentage token
//! delta against its disabled partner.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{bounded_map, derive_seed, GenerationBackend, RetryPolicy, SamplingParams};
use crate::judge::{AccuracyJudge, TaskKind};
use crate::reward::{accuracy_reward, judged_answer, QueryContext};
use crate::rollout::{PromptMode, PromptTemplate, QuarantineRecord, RolloutQuery};

/// Judge scores at or above this count as correct when classifying answer
/// changes.
pub const CORRECT_THRESHOLD: f64 = 0.5;

/// One evaluation query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    pub oracle_answer: String,
    pub task_kind: TaskKind,
}

impl RolloutQuery for DatasetRecord {
    fn query_id(&self) -> &str {
        &self.id
    }

    fn context(&self) -> QueryContext<'_> {
        QueryContext {
            question: &self.question,
            oracle_answer: &self.oracle_answer,
            task_kind: self.task_kind,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset record at {path}:{line}: {source}")]
    Malformed {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate dataset id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
}

/// Load a JSONL dataset, rejecting duplicate ids and empty files. Blank
/// lines are permitted.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>, EvalError> {
    let file = File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line_number = index + 1;
        let line = line.map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|source| EvalError::Malformed {
                path: path.to_path_buf(),
                line: line_number,
                source,
            })?;
        if !seen.insert(record.id.clone()) {
            return Err(EvalError::DuplicateId {
                id: record.id,
                line: line_number,
            });
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub judge_votes: u32,
    pub sampling: SamplingParams,
    pub retry: RetryPolicy,
    pub max_concurrency: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            judge_votes: 1,
            sampling: SamplingParams::default(),
            retry: RetryPolicy::default(),
            max_concurrency: 4,
        }
    }
}

/// Per-record evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecordResult {
    pub id: String,
    pub answer: String,
    pub score: f64,
    pub token_count: u32,
    pub token_fallback: bool,
    pub refine_count: u32,
    pub format_ok: bool,
}

/// Aggregated evaluation of one dataset under one prompt mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub mode: PromptMode,
    /// Records that were actually scored (quarantined ones excluded).
    pub n: usize,
    /// Mean judge score over scored records, in [0, 1].
    pub accuracy: f64,
    pub mean_tokens: f64,
    /// Fraction of scored records with at least one refine block.
    pub refine_rate: f64,
    pub quarantined: usize,
    /// True when any token count fell back to whitespace splitting.
    pub token_fallback: bool,
    pub records: Vec<EvalRecordResult>,
    pub quarantine: Vec<QuarantineRecord>,
}

/// Evaluate every dataset record once under `template`.
///
/// Records whose generation or judging fails after retries are quarantined
/// and excluded from the aggregates; they never abort the run.
pub fn evaluate(
    backend: &dyn GenerationBackend,
    judge: &dyn AccuracyJudge,
    dataset: &[DatasetRecord],
    template: &PromptTemplate,
    config: &EvalConfig,
    dataset_name: &str,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if config.judge_votes == 0 {
        return Err(EvalError::InvalidConfig(
            "judge_votes must be at least 1".to_string(),
        ));
    }
    template
        .validate()
        .map_err(|err| EvalError::InvalidConfig(err.to_string()))?;

    let base_seed = config.sampling.seed.unwrap_or(0);
    let outcomes = bounded_map(dataset.len(), config.max_concurrency, |i| {
        let record = &dataset[i];
        let seed = derive_seed(base_seed, &format!("{}/{}/eval", record.id, template.mode));
        let params = config.sampling.with_seed(seed);
        let inputs = template.inputs(&record.question);
        let generation = match config.retry.run(|| backend.generate(&inputs, &params)) {
            Ok(generation) => generation,
            Err(err) => {
                return Err(QuarantineRecord {
                    query_id: record.id.clone(),
                    error: err.to_string(),
                })
            }
        };
        let (answer, format, refine_count) = judged_answer(&generation.text);
        let score = match accuracy_reward(judge, record.context(), &answer, config.judge_votes) {
            Ok(score) => score,
            Err(err) => {
                return Err(QuarantineRecord {
                    query_id: record.id.clone(),
                    error: err.to_string(),
                })
            }
        };
        let (token_count, token_fallback) = match generation.completion_tokens {
            Some(count) => (count, false),
            None => (generation.text.split_whitespace().count() as u32, true),
        };
        Ok(EvalRecordResult {
            id: record.id.clone(),
            answer,
            score,
            token_count,
            token_fallback,
            refine_count,
            format_ok: format > 0.0,
        })
    });

    let mut records = Vec::new();
    let mut quarantine = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(result) => records.push(result),
            Err(entry) => quarantine.push(entry),
        }
    }
    let n = records.len();
    let denom = n.max(1) as f64;
    let accuracy = records.iter().map(|r| r.score).sum::<f64>() / denom;
    let mean_tokens = records.iter().map(|r| r.token_count as f64).sum::<f64>() / denom;
    let refine_rate = records.iter().filter(|r| r.refine_count > 0).count() as f64 / denom;
    Ok(EvalReport {
        dataset: dataset_name.to_string(),
        mode: template.mode,
        n,
        accuracy,
        mean_tokens,
        refine_rate,
        quarantined: quarantine.len(),
        token_fallback: records.iter().any(|r| r.token_fallback),
        records,
        quarantine,
    })
}

/// Percentage token delta of a refine-enabled report against the
/// refine-disabled report for the same dataset, when both exist.
fn token_delta_pct(report: &EvalReport, all: &[EvalReport]) -> Option<f64> {
    if report.mode != PromptMode::RefineEnabled {
        return None;
    }
    let partner = all
        .iter()
        .find(|other| other.mode == PromptMode::RefineDisabled && other.dataset == report.dataset)?;
    if partner.mean_tokens <= 0.0 {
        return None;
    }
    Some((report.mean_tokens - partner.mean_tokens) / partner.mean_tokens * 100.0)
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "dataset",
    "mode",
    "n",
    "accuracy_pct",
    "mean_tokens",
    "refine_rate",
    "quarantined",
    "token_delta_pct",
];

fn report_cells(report: &EvalReport, all: &[EvalReport]) -> [String; 8] {
    [
        report.dataset.clone(),
        report.mode.to_string(),
        report.n.to_string(),
        format!("{:.1}", report.accuracy * 100.0),
        format!("{:.1}", report.mean_tokens),
        format!("{:.3}", report.refine_rate),
        report.quarantined.to_string(),
        token_delta_pct(report, all)
            .map(|delta| format!("{delta:+.1}"))
            .unwrap_or_default(),
    ]
}

pub fn render_report_csv(reports: &[EvalReport]) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for report in reports {
        out.push_str(&report_cells(report, reports).join(","));
        out.push('\n');
    }
    out
}

pub fn render_report_markdown(reports: &[EvalReport]) -> String {
    let mut out = format!("| {} |\n", REPORT_COLUMNS.join(" | "));
    out.push_str(&format!(
        "|{}\n",
        " --- |".repeat(REPORT_COLUMNS.len())
    ));
    for report in reports {
        out.push_str(&format!(
            "| {} |\n",
            report_cells(report, reports).join(" | ")
        ));
    }
    out
}

/// Transition counts between two evaluations of the same dataset, joined
/// on record id. `before` is conventionally the refine-disabled run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeStats {
    pub paired: usize,
    pub wrong_to_right: usize,
    pub right_to_wrong: usize,
    pub unchanged_right: usize,
    pub unchanged_wrong: usize,
}

pub fn answer_change_stats(before: &EvalReport, after: &EvalReport) -> ChangeStats {
    let before_scores: HashMap<&str, f64> = before
        .records
        .iter()
        .map(|r| (r.id.as_str(), r.score))
        .collect();
    let mut stats = ChangeStats {
        paired: 0,
        wrong_to_right: 0,
        right_to_wrong: 0,
        unchanged_right: 0,
        unchanged_wrong: 0,
    };
    for record in &after.records {
        let Some(&before_score) = before_scores.get(record.id.as_str()) else {
            continue;
        };
        stats.paired += 1;
        let was_right = before_score >= CORRECT_THRESHOLD;
        let is_right = record.score >= CORRECT_THRESHOLD;
        match (was_right, is_right) {
            (false, true) => stats.wrong_to_right += 1,
            (true, false) => stats.right_to_wrong += 1,
            (true, true) => stats.unchanged_right += 1,
            (false, false) => stats.unchanged_wrong += 1,
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::judge::ExactMatchJudge;
    use std::io::Write;

    fn write_dataset(lines: &[&str]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut file = File::create(&path).unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        (dir, path)
    }

    #[test]
    fn dataset_loads_and_validates() {
        let (_dir, path) = write_dataset(&[
            r#"{"id":"a","question":"1+1","oracle_answer":"2","task_kind":"open"}"#,
            "",
            r#"{"id":"b","question":"2+2","oracle_answer":"4","task_kind":"multiple_choice"}"#,
        ]);
        let records = load_dataset(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[1].task_kind, TaskKind::MultipleChoice);
    }

    #[test]
    fn dataset_errors_carry_line_numbers() {
        let (_dir, path) = write_dataset(&[
            r#"{"id":"a","question":"1+1","oracle_answer":"2","task_kind":"open"}"#,
            r#"{"id":"a","question":"#,
        ]);
        match load_dataset(&path).unwrap_err() {
            EvalError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn dataset_rejects_duplicate_ids_and_empty_files() {
        let (_dir, path) = write_dataset(&[
            r#"{"id":"a","question":"1","oracle_answer":"1","task_kind":"open"}"#,
            r#"{"id":"a","question":"2","oracle_answer":"2","task_kind":"open"}"#,
        ]);
        assert!(matches!(
            load_dataset(&path).unwrap_err(),
            EvalError::DuplicateId { line: 2, .. }
        ));
        let (_dir2, empty) = write_dataset(&[""]);
        assert!(matches!(
            load_dataset(&empty).unwrap_err(),
            EvalError::EmptyDataset
        ));
    }

    fn record(id: &str, question: &str) -> DatasetRecord {
        DatasetRecord {
            id: id.to_string(),
            question: question.to_string(),
            oracle_answer: "42".to_string(),
            task_kind: TaskKind::Open,
        }
    }

    fn quick_config() -> EvalConfig {
        let mut config = EvalConfig::default();
        config.retry = RetryPolicy::immediate(1);
        config.max_concurrency = 2;
        config
    }

    #[test]
    fn evaluate_aggregates_scores_and_tokens() {
        let backend = ScriptedBackend::new(vec![
            "<think>sum</think><answer>42</answer>".to_string(),
        ]);
        let dataset = vec![record("a", "q1"), record("b", "q2")];
        let report = evaluate(
            &backend,
            &ExactMatchJudge,
            &dataset,
            &PromptTemplate::refine_enabled(),
            &quick_config(),
            "toy",
        )
        .unwrap();
        assert_eq!(report.n, 2);
        assert!((report.accuracy - 1.0).abs() < 1e-12);
        assert_eq!(report.refine_rate, 0.0);
        assert_eq!(report.quarantined, 0);
        assert!(report.records.iter().all(|r| r.format_ok));
    }

    #[test]
    fn evaluate_quarantines_backend_failures() {
        let backend = crate::backend::KeyedBackend::new(vec![(
            "q1".to_string(),
            "<think>x</think><answer>42</answer>".to_string(),
        )]);
        let dataset = vec![record("a", "q1"), record("b", "other question")];
        let report = evaluate(
            &backend,
            &ExactMatchJudge,
            &dataset,
            &PromptTemplate::refine_enabled(),
            &quick_config(),
            "toy",
        )
        .unwrap();
        assert_eq!(report.n, 1);
        assert_eq!(report.quarantined, 1);
        assert_eq!(report.quarantine[0].query_id, "b");
        assert!((report.accuracy - 1.0).abs() < 1e-12);
    }

    fn synthetic_report(mode: PromptMode, mean_tokens: f64) -> EvalReport {
        EvalReport {
            dataset: "toy".to_string(),
            mode,
            n: 3,
            accuracy: 0.5,
            mean_tokens,
            refine_rate: 0.25,
            quarantined: 0,
            token_fallback: false,
            records: Vec::new(),
            quarantine: Vec::new(),
        }
    }

    #[test]
    fn csv_report_pairs_token_deltas() {
        let reports = vec![
            synthetic_report(PromptMode::RefineDisabled, 20.0),
            synthetic_report(PromptMode::RefineEnabled, 24.0),
        ];
        let csv = render_report_csv(&reports);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "dataset,mode,n,accuracy_pct,mean_tokens,refine_rate,quarantined,token_delta_pct"
        );
        assert_eq!(
            lines.next().unwrap(),
            "toy,refine_disabled,3,50.0,20.0,0.250,0,"
        );
        assert_eq!(
            lines.next().unwrap(),
            "toy,refine_enabled,3,50.0,24.0,0.250,0,+20.0"
        );
    }

    #[test]
    fn mean_tokens_is_exact_for_known_counts() {
        let mut report = synthetic_report(PromptMode::RefineEnabled, 0.0);
        report.mean_tokens = (10.0 + 20.0 + 30.0) / 3.0;
        let csv = render_report_csv(&[report]);
        assert!(csv.lines().nth(1).unwrap().contains(",20.0,"));
    }

    #[test]
    fn markdown_report_renders_a_table() {
        let reports = vec![synthetic_report(PromptMode::RefineDisabled, 20.0)];
        let markdown = render_report_markdown(&reports);
        assert!(markdown.starts_with("| dataset | mode |"));
        assert!(markdown.contains("| toy | refine_disabled | 3 | 50.0 | 20.0 | 0.250 | 0 |  |"));
    }

    fn result(id: &str, score: f64) -> EvalRecordResult {
        EvalRecordResult {
            id: id.to_string(),
            answer: String::new(),
            score,
            token_count: 0,
            token_fallback: false,
            refine_count: 0,
            format_ok: true,
        }
    }

    #[test]
    fn change_stats_count_all_transitions() {
        let mut before = synthetic_report(PromptMode::RefineDisabled, 0.0);
        let mut after = synthetic_report(PromptMode::RefineEnabled, 0.0);
        before.records = vec![
            result("a", 0.0),
            result("b", 1.0),
            result("c", 1.0),
            result("d", 0.2),
            result("unpaired", 1.0),
        ];
        after.records = vec![
            result("a", 1.0),
            result("b", 0.0),
            result("c", 0.9),
            result("d", 0.3),
        ];
        let stats = answer_change_stats(&before, &after);
        assert_eq!(stats.paired, 4);
        assert_eq!(stats.wrong_to_right, 1);
        assert_eq!(stats.right_to_wrong, 1);
        assert_eq!(stats.unchanged_right, 1);
        assert_eq!(stats.unchanged_wrong, 1);
    }

    #[test]
    fn boundary_score_counts_as_correct() {
        let mut before = synthetic_report(PromptMode::RefineDisabled, 0.0);
        let mut after = synthetic_report(PromptMode::RefineEnabled, 0.0);
        before.records = vec![result("a", 0.5)];
        after.records = vec![result("a", 0.5)];
        let stats = answer_change_stats(&before, &after);
        assert_eq!(stats.unchanged_right, 1);
    }
}

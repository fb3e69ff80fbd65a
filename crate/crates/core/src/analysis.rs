//! Post-hoc analysis of refinement behavior in generated traces.
//!
//! Three questions are asked of each trace that contains refine blocks:
//! what kind of revision each block performs (classified into four
//! behaviors), whether the reasoning after the first refinement stays
//! coherent with the reasoning before it, and whether the final answer is
//! consistent with the refined reasoning. Scores are bucketed into three
//! bins (low / medium / high) with configurable edges.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{JudgeClient, JudgeError, JudgeRequest, RefinementType};
use crate::tag_grammar::{extract_refinements, parse_trace, ParsedTrace, RefineSegment, REFINE_OPEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Votes per coherence or alignment score.
    pub judge_votes: u32,
    /// Bin edges splitting [0, 1] into low / medium / high.
    pub bin_edges: (f64, f64),
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            judge_votes: 3,
            bin_edges: (0.45, 0.85),
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let (low, high) = self.bin_edges;
        if !(0.0 < low && low < high && high <= 1.0) {
            return Err(AnalysisError::InvalidConfig(format!(
                "bin edges must satisfy 0 < low < high <= 1, got ({low}, {high})"
            )));
        }
        if self.judge_votes == 0 {
            return Err(AnalysisError::InvalidConfig(
                "judge_votes must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid analysis config: {0}")]
    InvalidConfig(String),
}

/// One trace to analyze, with the question that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisInput {
    pub question: String,
    pub text: String,
}

/// Classify one refine segment into a behavior via a single judge call.
pub fn classify_refinement(
    client: &JudgeClient,
    question: &str,
    segment: &RefineSegment,
) -> Result<RefinementType, JudgeError> {
    client.classify(&JudgeRequest::refinement_type(
        question,
        &segment.preceding_context,
        &segment.content,
    ))
}

/// Judge how coherently the reasoning from the first refinement onward
/// follows the reasoning before it.
pub fn coherence_score(
    client: &JudgeClient,
    pre_text: &str,
    refined_text: &str,
    votes: u32,
) -> Result<f64, JudgeError> {
    client
        .judge_score(&JudgeRequest::coherence(pre_text, refined_text), votes)
        .map(|verdict| verdict.score)
}

/// Judge how consistent the final answer is with the full reasoning trace.
pub fn alignment_score(
    client: &JudgeClient,
    think_text: &str,
    final_answer: &str,
    votes: u32,
) -> Result<f64, JudgeError> {
    client
        .judge_score(&JudgeRequest::alignment(think_text, final_answer), votes)
        .map(|verdict| verdict.score)
}

/// Split the think block at the first refine tag: everything before the
/// tag, and everything from the tag onward (tags included). `None` when
/// the trace has no think block or no refine blocks.
pub fn split_think_at_first_refine(trace: &ParsedTrace) -> Option<(String, String)> {
    let think = trace.think_span.clone()?;
    let first = trace.refine_spans.first()?;
    let tag_start = first.start - REFINE_OPEN.len();
    Some((
        trace.raw_text[think.start..tag_start].to_string(),
        trace.raw_text[tag_start..think.end].to_string(),
    ))
}

/// Bucket scores into three bins: `[0, low)`, `[low, high)`, `[high, 1]`.
pub fn histogram(scores: &[f64], bin_edges: (f64, f64)) -> [usize; 3] {
    let (low, high) = bin_edges;
    let mut bins = [0usize; 3];
    for &score in scores {
        if score < low {
            bins[0] += 1;
        } else if score < high {
            bins[1] += 1;
        } else {
            bins[2] += 1;
        }
    }
    bins
}

/// Aggregated refinement-behavior statistics over a set of traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub traces: usize,
    pub traces_with_refines: usize,
    pub refine_segments: usize,
    pub type_counts: BTreeMap<RefinementType, usize>,
    pub coherence_histogram: [usize; 3],
    pub alignment_histogram: [usize; 3],
    pub mean_coherence: Option<f64>,
    pub mean_alignment: Option<f64>,
    /// Judge calls that failed; the affected trace or segment is skipped.
    pub failed: usize,
}

/// Run the full behavior analysis over `inputs`. Traces without refine
/// blocks only count toward `traces`; judge failures skip the affected
/// item rather than aborting.
pub fn analyze_traces(
    client: &JudgeClient,
    inputs: &[AnalysisInput],
    config: &AnalysisConfig,
) -> Result<AnalysisSummary, AnalysisError> {
    config.validate()?;
    let mut summary = AnalysisSummary {
        traces: 0,
        traces_with_refines: 0,
        refine_segments: 0,
        type_counts: BTreeMap::new(),
        coherence_histogram: [0; 3],
        alignment_histogram: [0; 3],
        mean_coherence: None,
        mean_alignment: None,
        failed: 0,
    };
    let mut coherence_scores = Vec::new();
    let mut alignment_scores = Vec::new();

    for input in inputs {
        summary.traces += 1;
        let trace = parse_trace(&input.text);
        let segments = extract_refinements(&trace);
        if segments.is_empty() {
            continue;
        }
        summary.traces_with_refines += 1;
        summary.refine_segments += segments.len();

        for segment in &segments {
            match classify_refinement(client, &input.question, segment) {
                Ok(kind) => *summary.type_counts.entry(kind).or_insert(0) += 1,
                Err(err) => {
                    log::warn!("classification failed: {err}");
                    summary.failed += 1;
                }
            }
        }

        if let Some((pre, post)) = split_think_at_first_refine(&trace) {
            match coherence_score(client, &pre, &post, config.judge_votes) {
                Ok(score) => coherence_scores.push(score),
                Err(err) => {
                    log::warn!("coherence scoring failed: {err}");
                    summary.failed += 1;
                }
            }
        }

        if let (Some(think), Some(answer)) = (trace.think_text(), trace.answer_text()) {
            match alignment_score(client, think, answer, config.judge_votes) {
                Ok(score) => alignment_scores.push(score),
                Err(err) => {
                    log::warn!("alignment scoring failed: {err}");
                    summary.failed += 1;
                }
            }
        }
    }

    summary.coherence_histogram = histogram(&coherence_scores, config.bin_edges);
    summary.alignment_histogram = histogram(&alignment_scores, config.bin_edges);
    summary.mean_coherence = mean(&coherence_scores);
    summary.mean_alignment = mean(&alignment_scores);
    Ok(summary)
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::KeyedBackend;

    fn keyed_client(entries: Vec<(&str, &str)>) -> JudgeClient {
        let backend = KeyedBackend::new(
            entries
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        );
        JudgeClient::new(Box::new(backend))
    }

    fn refined_trace() -> String {
        "<think>first try<refine>fix the slip</refine>carry on</think>\
         <answer>final</answer>"
            .to_string()
    }

    #[test]
    fn histogram_bins_cover_the_unit_interval() {
        let bins = histogram(&[0.0, 0.449, 0.45, 0.84, 0.85, 1.0], (0.45, 0.85));
        assert_eq!(bins, [2, 2, 2]);
    }

    #[test]
    fn config_rejects_bad_edges() {
        let mut config = AnalysisConfig::default();
        config.bin_edges = (0.9, 0.5);
        assert!(config.validate().is_err());
        config.bin_edges = (0.0, 0.5);
        assert!(config.validate().is_err());
        config.bin_edges = (0.5, 1.1);
        assert!(config.validate().is_err());
    }

    #[test]
    fn think_splits_at_the_first_refine_tag() {
        let trace = parse_trace(&refined_trace());
        let (pre, post) = split_think_at_first_refine(&trace).unwrap();
        assert_eq!(pre, "first try");
        assert_eq!(post, "<refine>fix the slip</refine>carry on");
    }

    #[test]
    fn unrefined_traces_do_not_split() {
        let trace = parse_trace("<think>plain</think><answer>a</answer>");
        assert!(split_think_at_first_refine(&trace).is_none());
    }

    #[test]
    fn analysis_aggregates_types_and_scores() {
        // Route each judge prompt kind to a canned reply by its distinctive
        // phrasing.
        let client = keyed_client(vec![
            ("classifying one refinement segment", "Type: error correction"),
            ("builds coherently", "Looks consistent.\nScore: 0.9"),
            ("supports the final answer", "Mostly follows.\nScore: 0.5"),
        ]);
        let inputs = vec![
            AnalysisInput {
                question: "q1".to_string(),
                text: refined_trace(),
            },
            AnalysisInput {
                question: "q2".to_string(),
                text: "<think>no revisions</think><answer>a</answer>".to_string(),
            },
        ];
        let summary = analyze_traces(&client, &inputs, &AnalysisConfig::default()).unwrap();
        assert_eq!(summary.traces, 2);
        assert_eq!(summary.traces_with_refines, 1);
        assert_eq!(summary.refine_segments, 1);
        assert_eq!(summary.type_counts[&RefinementType::ErrorCorrection], 1);
        assert_eq!(summary.coherence_histogram, [0, 0, 1]);
        assert_eq!(summary.alignment_histogram, [0, 1, 0]);
        assert_eq!(summary.mean_coherence, Some(0.9));
        assert_eq!(summary.mean_alignment, Some(0.5));
        assert_eq!(summary.failed, 0);
    }

    #[test]
    fn judge_failures_are_counted_not_fatal() {
        // No entry matches the classification prompt, so classification and
        // both scores fail for the refined trace.
        let client = keyed_client(vec![("never matches anything", "Score: 0.5")]);
        let inputs = vec![AnalysisInput {
            question: "q".to_string(),
            text: refined_trace(),
        }];
        let summary = analyze_traces(&client, &inputs, &AnalysisConfig::default()).unwrap();
        assert_eq!(summary.failed, 3);
        assert_eq!(summary.type_counts.len(), 0);
        assert_eq!(summary.mean_coherence, None);
    }

    #[test]
    fn multiple_segments_are_each_classified() {
        let client = keyed_client(vec![
            ("classifying one refinement segment", "Type: solution improvement"),
            ("builds coherently", "Score: 1.0"),
            ("supports the final answer", "Score: 1.0"),
        ]);
        let inputs = vec![AnalysisInput {
            question: "q".to_string(),
            text: "<think>a<refine>b</refine>c<refine>d</refine>e</think><answer>f</answer>"
                .to_string(),
        }];
        let summary = analyze_traces(&client, &inputs, &AnalysisConfig::default()).unwrap();
        assert_eq!(summary.refine_segments, 2);
        assert_eq!(summary.type_counts[&RefinementType::SolutionImprovement], 2);
    }
}

//! Hybrid reward: format + accuracy + comparison-based refinement reward.
//!
//! Each response in a rollout group is scored on three axes and the total is
//! their sum:
//!
//! - format: +1 when the trace satisfies all three structural constraints,
//!   -1 otherwise (see [`crate::tag_grammar`]).
//! - accuracy: a judge score in [0, 1] for the final answer, averaged over a
//!   configurable number of votes.
//! - refinement: a three-way comparison of the response's accuracy against
//!   the mean accuracy of a refine-disabled baseline pool for the same
//!   query. Refining and beating the baseline by more than `zeta` earns +1;
//!   landing below it by more than `zeta` earns -1; staying within the band
//!   earns -0.5 (the refinement spent tokens without moving accuracy).
//!   Responses that never refine default to 0 on this axis.
//!
//! The totals therefore live in [-2, 3]. Scoring is all-or-nothing per
//! group: one failed judge call rejects the whole group so training never
//! sees partially scored groups.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{AccuracyJudge, JudgeError, TaskKind};
use crate::rollout::{PromptMode, RolloutGroup};
use crate::tag_grammar::{check_constraints, format_reward, parse_trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Half-width of the "comparable accuracy" band around the baseline
    /// mean.
    pub zeta: f64,
    /// Baseline pool size per query.
    pub baseline_samples: u32,
    /// Judge votes per accuracy score.
    pub judge_votes: u32,
    /// Refinement-axis reward for responses that never refine.
    pub no_refine_reward: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            zeta: 0.1,
            baseline_samples: 4,
            judge_votes: 1,
            no_refine_reward: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(0.0..0.5).contains(&self.zeta) {
            return Err(RewardError::InvalidConfig(format!(
                "zeta must lie in [0, 0.5), got {}",
                self.zeta
            )));
        }
        if self.baseline_samples == 0 {
            return Err(RewardError::InvalidConfig(
                "baseline_samples must be at least 1".to_string(),
            ));
        }
        if self.judge_votes == 0 {
            return Err(RewardError::InvalidConfig(
                "judge_votes must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Judged accuracies of refine-disabled samples for one query; the mean is
/// the comparison anchor for the refinement reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePool {
    pub query_id: String,
    pub scores: Vec<f64>,
    pub mean_score: f64,
}

impl BaselinePool {
    pub fn new(query_id: &str, scores: Vec<f64>) -> Result<Self, RewardError> {
        if scores.is_empty() {
            return Err(RewardError::EmptyBaselinePool {
                query_id: query_id.to_string(),
            });
        }
        let mean_score = scores.iter().sum::<f64>() / scores.len() as f64;
        Ok(Self {
            query_id: query_id.to_string(),
            scores,
            mean_score,
        })
    }
}

/// Per-response reward decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub accuracy: f64,
    pub refinement: f64,
    pub total: f64,
    pub refine_count: u32,
}

/// One line of the per-sample reward log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLogRecord {
    pub query_id: String,
    pub sample_index: u32,
    pub format: f64,
    pub accuracy: f64,
    pub refinement: f64,
    pub total: f64,
    pub refine_count: u32,
    pub token_count: u32,
}

/// Query fields the judge needs when scoring a group.
#[derive(Debug, Clone, Copy)]
pub struct QueryContext<'a> {
    pub question: &'a str,
    pub oracle_answer: &'a str,
    pub task_kind: TaskKind,
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    #[error("baseline pool for query {query_id:?} is empty")]
    EmptyBaselinePool { query_id: String },
    #[error("group {query_id:?} rejected: judging sample {sample_index} failed: {source}")]
    GroupRejected {
        query_id: String,
        sample_index: usize,
        #[source]
        source: JudgeError,
    },
    #[error("scoring requires a refine-enabled group, got {mode}")]
    WrongPromptMode { mode: PromptMode },
    #[error("baseline pool {pool_id:?} does not belong to group {group_id:?}")]
    PoolMismatch { pool_id: String, group_id: String },
}

/// Judge-scored accuracy of one answer, averaged over `votes` calls. At
/// least half the votes (rounded up) must succeed; the result is clamped to
/// [0, 1].
pub fn accuracy_reward(
    judge: &dyn AccuracyJudge,
    query: QueryContext<'_>,
    answer: &str,
    votes: u32,
) -> Result<f64, JudgeError> {
    let votes = votes.max(1);
    let mut scores = Vec::with_capacity(votes as usize);
    let mut last_error = None;
    for _ in 0..votes {
        match judge.vote(query.task_kind, query.question, query.oracle_answer, answer) {
            Ok(score) => scores.push(score),
            Err(err) => last_error = Some(err),
        }
    }
    let needed = votes.div_ceil(2) as usize;
    if scores.len() < needed {
        return Err(match last_error {
            Some(err) => err,
            None => unreachable!("votes >= 1, so a short score list implies an error"),
        });
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(mean.clamp(0.0, 1.0))
}

/// Comparison-based refinement reward.
///
/// With at least one refine segment: +1 when `accuracy` exceeds the baseline
/// mean by more than `zeta`, -1 when it falls short by more than `zeta`, and
/// -0.5 inside the band (boundary included). With no refine segments the
/// axis is 0.
pub fn refinement_reward(accuracy: f64, baseline_mean: f64, refine_count: u32, zeta: f64) -> f64 {
    if refine_count == 0 {
        return 0.0;
    }
    let delta = accuracy - baseline_mean;
    if delta > zeta {
        1.0
    } else if delta < -zeta {
        -1.0
    } else {
        -0.5
    }
}

pub fn total_reward(format: f64, accuracy: f64, refinement: f64) -> f64 {
    format + accuracy + refinement
}

/// The answer text the judge sees: the answer span when one parsed, the full
/// raw response otherwise (malformed responses are still judged).
pub(crate) fn judged_answer(text: &str) -> (String, f64, u32) {
    let trace = parse_trace(text);
    let report = check_constraints(&trace);
    let answer = trace
        .answer_text()
        .map(str::to_string)
        .unwrap_or_else(|| text.to_string());
    (answer, format_reward(&report), trace.refine_count() as u32)
}

/// Score every response in a refine-enabled group against its baseline
/// pool. Any judge failure rejects the whole group.
pub fn score_group(
    query: QueryContext<'_>,
    group: &RolloutGroup,
    pool: &BaselinePool,
    judge: &dyn AccuracyJudge,
    config: &RewardConfig,
) -> Result<Vec<RewardBreakdown>, RewardError> {
    config.validate()?;
    if group.prompt_mode != PromptMode::RefineEnabled {
        return Err(RewardError::WrongPromptMode {
            mode: group.prompt_mode,
        });
    }
    if pool.query_id != group.query_id {
        return Err(RewardError::PoolMismatch {
            pool_id: pool.query_id.clone(),
            group_id: group.query_id.clone(),
        });
    }

    let mut breakdowns = Vec::with_capacity(group.samples.len());
    for (sample_index, sample) in group.samples.iter().enumerate() {
        let (answer, format, refine_count) = judged_answer(&sample.text);
        let accuracy = accuracy_reward(judge, query, &answer, config.judge_votes).map_err(
            |source| RewardError::GroupRejected {
                query_id: group.query_id.clone(),
                sample_index,
                source,
            },
        )?;
        let refinement = if refine_count == 0 {
            config.no_refine_reward
        } else {
            refinement_reward(accuracy, pool.mean_score, refine_count, config.zeta)
        };
        breakdowns.push(RewardBreakdown {
            format,
            accuracy,
            refinement,
            total: total_reward(format, accuracy, refinement),
            refine_count,
        });
    }
    Ok(breakdowns)
}

//! Group-relative training loop for the toy environment.
//!
//! Each step samples a refinement-free baseline pool and a response group
//! per batch query, scores the group on the three reward axes, and takes
//! one ascent step on the clipped group objective. The reference policy
//! for the divergence penalty stays frozen at the initial weights.

use serde::{Deserialize, Serialize};

use crate::backend::derive_seed;
use crate::grpo::{group_stats, grpo_gradient, Group, GroupResponse, GrpoConfig, StepLogRecord};
use crate::reward::{judged_answer, refinement_reward};
use crate::rollout::PromptMode;
use crate::toy::policy::{
    logprob_and_grad, sample_trajectory, QueryPolicy, ToyError, ToyPolicy, FEATURE_COUNT,
};
use crate::toy::task::{make_task_set, Difficulty, ToyQuery};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub seed: u64,
    pub n_easy: usize,
    pub n_hard: usize,
    pub steps: u64,
    /// Queries per optimization step, taken round-robin from the task set.
    pub batch_size: usize,
    /// Responses sampled per query per step.
    pub group_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    /// When false the refinement reward axis is held at zero, leaving only
    /// format and accuracy.
    pub refinement_reward_enabled: bool,
    /// Band half-width for the refinement reward.
    pub zeta: f64,
    /// Refinement-free baseline responses per query per step.
    pub baseline_samples: usize,
    pub grpo: GrpoConfig,
    /// Trajectories sampled per query when measuring refinement rates.
    pub rate_probe_samples: usize,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_easy: 8,
            n_hard: 8,
            steps: 2000,
            batch_size: 2,
            group_size: 8,
            learning_rate: 0.05,
            temperature: 1.0,
            refinement_reward_enabled: true,
            zeta: 0.1,
            baseline_samples: 4,
            grpo: GrpoConfig::default(),
            rate_probe_samples: 200,
        }
    }
}

impl ToyTrainConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if self.n_easy + self.n_hard == 0 {
            return Err(ToyError::InvalidConfig("task set is empty".to_string()));
        }
        if self.batch_size == 0 {
            return Err(ToyError::InvalidConfig("batch_size must be positive".to_string()));
        }
        if self.group_size < 2 {
            return Err(ToyError::InvalidConfig(format!(
                "group_size must be at least 2, got {}",
                self.group_size
            )));
        }
        if self.baseline_samples == 0 {
            return Err(ToyError::InvalidConfig(
                "baseline_samples must be positive".to_string(),
            ));
        }
        if self.rate_probe_samples == 0 {
            return Err(ToyError::InvalidConfig(
                "rate_probe_samples must be positive".to_string(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ToyError::InvalidConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(ToyError::InvalidConfig(format!(
                "zeta must be non-negative and finite, got {}",
                self.zeta
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ToyError::InvalidConfig(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        self.grpo.validate()?;
        Ok(())
    }
}

/// Summary of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub steps: u64,
    /// Mean total reward per step, averaged over the step's groups.
    pub reward_curve: Vec<f64>,
    pub initial_refine_rate_easy: f64,
    pub initial_refine_rate_hard: f64,
    pub refine_rate_easy: f64,
    pub refine_rate_hard: f64,
    pub final_weights: Vec<f64>,
    pub final_weights_digest: String,
}

#[derive(Debug, Clone)]
pub struct ToyTrainOutcome {
    pub report: TrainingReport,
    pub policy: ToyPolicy,
    pub step_records: Vec<StepLogRecord>,
}

/// Fraction of probe trajectories containing at least one refine block,
/// split by difficulty. Probe seeds depend only on the query and sample
/// index, so rate comparisons across checkpoints share random draws.
pub fn measure_refine_rates(
    policy: &ToyPolicy,
    queries: &[ToyQuery],
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let mut counts = [(0usize, 0usize); 2];
    for query in queries {
        let slot = match query.difficulty {
            Difficulty::Easy => &mut counts[0],
            Difficulty::Hard => &mut counts[1],
        };
        for i in 0..samples {
            let sample_seed = derive_seed(seed, &format!("probe/{}/{i}", query.id));
            let trajectory = sample_trajectory(policy, query, PromptMode::RefineEnabled, sample_seed);
            if trajectory.refine_count() > 0 {
                slot.0 += 1;
            }
            slot.1 += 1;
        }
    }
    let rate = |(hits, total): (usize, usize)| {
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    };
    (rate(counts[0]), rate(counts[1]))
}

fn reward_axes(
    rendered: &str,
    oracle_text: &str,
    baseline_mean: f64,
    config: &ToyTrainConfig,
) -> f64 {
    let (answer, format, refine_count) = judged_answer(rendered);
    let accuracy = if answer.trim() == oracle_text { 1.0 } else { 0.0 };
    let refine_axis = if config.refinement_reward_enabled {
        refinement_reward(accuracy, baseline_mean, refine_count, config.zeta)
    } else {
        0.0
    };
    format + accuracy + refine_axis
}

/// Run the full training loop and report learning curves, refinement
/// rates before and after, and the final weights.
pub fn train_toy(config: &ToyTrainConfig) -> Result<ToyTrainOutcome, ToyError> {
    config.validate()?;
    let queries = make_task_set(derive_seed(config.seed, "tasks"), config.n_easy, config.n_hard);
    let mut policy = ToyPolicy::uniform(config.temperature);
    let reference = policy.clone();

    let (initial_easy, initial_hard) =
        measure_refine_rates(&policy, &queries, config.rate_probe_samples, config.seed);

    let mut reward_curve = Vec::with_capacity(config.steps as usize);
    let mut step_records = Vec::with_capacity(config.steps as usize);

    for step in 0..config.steps {
        let mut batch_grad = vec![0.0; FEATURE_COUNT];
        let mut mean_reward = 0.0;
        let mut mean_advantage_abs = 0.0;
        let mut objective = 0.0;
        let mut kl_mean = 0.0;
        let mut clip_fraction = 0.0;

        for j in 0..config.batch_size {
            let index = (step as usize * config.batch_size + j) % queries.len();
            let query = &queries[index];
            let oracle_text = query.oracle_text();

            let mut baseline_sum = 0.0;
            for i in 0..config.baseline_samples {
                let seed = derive_seed(config.seed, &format!("baseline/{step}/{}/{i}", query.id));
                let draft = sample_trajectory(&policy, query, PromptMode::RefineDisabled, seed);
                let (answer, _, _) = judged_answer(&draft.rendered);
                if answer.trim() == oracle_text {
                    baseline_sum += 1.0;
                }
            }
            let baseline_mean = baseline_sum / config.baseline_samples as f64;

            let mut responses = Vec::with_capacity(config.group_size);
            let mut logp_ref = Vec::with_capacity(config.group_size);
            for i in 0..config.group_size {
                let seed = derive_seed(config.seed, &format!("group/{step}/{}/{i}", query.id));
                let trajectory = sample_trajectory(&policy, query, PromptMode::RefineEnabled, seed);
                let reward = reward_axes(&trajectory.rendered, &oracle_text, baseline_mean, config);
                let (ref_logp, _) =
                    logprob_and_grad(&reference, query, PromptMode::RefineEnabled, &trajectory.actions)?;
                logp_ref.push(ref_logp);
                responses.push(GroupResponse {
                    sequence: trajectory.actions,
                    logprob_old: trajectory.logprob,
                    reward,
                });
            }
            let group = Group {
                query_id: query.id.clone(),
                responses,
            };

            let bound = QueryPolicy {
                policy: &policy,
                query,
                mode: PromptMode::RefineEnabled,
            };
            let grad = grpo_gradient(&bound, &group, &logp_ref, &config.grpo)?;
            for (slot, partial) in batch_grad.iter_mut().zip(&grad) {
                *slot += partial / config.batch_size as f64;
            }

            let logp_new: Vec<f64> = group
                .responses
                .iter()
                .map(|r| {
                    logprob_and_grad(&policy, query, PromptMode::RefineEnabled, &r.sequence)
                        .map(|(lp, _)| lp)
                })
                .collect::<Result<_, _>>()?;
            let stats = group_stats(&group, &logp_new, &logp_ref, &config.grpo)?;
            let scale = 1.0 / config.batch_size as f64;
            mean_reward += stats.mean_reward * scale;
            mean_advantage_abs += stats.mean_advantage_abs * scale;
            objective += stats.objective * scale;
            kl_mean += stats.kl_mean * scale;
            clip_fraction += stats.clip_fraction * scale;
        }

        for (weight, partial) in policy.weights.iter_mut().zip(&batch_grad) {
            *weight += config.learning_rate * partial;
        }

        reward_curve.push(mean_reward);
        step_records.push(StepLogRecord {
            step,
            mean_reward,
            mean_advantage_abs,
            objective,
            kl_mean,
            clip_fraction,
        });
    }

    let (final_easy, final_hard) =
        measure_refine_rates(&policy, &queries, config.rate_probe_samples, config.seed);

    let report = TrainingReport {
        steps: config.steps,
        reward_curve,
        initial_refine_rate_easy: initial_easy,
        initial_refine_rate_hard: initial_hard,
        refine_rate_easy: final_easy,
        refine_rate_hard: final_hard,
        final_weights: policy.weights.clone(),
        final_weights_digest: policy.weights_digest(),
    };

    Ok(ToyTrainOutcome {
        report,
        policy,
        step_records,
    })
}

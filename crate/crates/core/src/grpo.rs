//! Group-relative policy optimization.
//!
//! Rewards are normalized within each rollout group (no learned critic),
//! the surrogate is the clipped importance-ratio objective, and a
//! non-negative estimator regularizes against a reference policy:
//!
//! ```text
//! A_i  = (R_i - mean(R)) / (std(R) + xi)
//! J    = (1/G) sum_i min(r_i A_i, clip(r_i, 1-eps, 1+eps) A_i) - beta * (1/G) sum_i k3_i
//! k3_i = t_i - ln t_i - 1,   t_i = pi_ref(y_i) / pi_theta(y_i)
//! ```
//!
//! `grpo_gradient` differentiates this analytically through sequence
//! log-probabilities: each response contributes
//! `(surrogate_coefficient - beta * (1 - t_i)) * grad_logprob(y_i)`, where
//! the surrogate coefficient is `A_i * r_i` when the unclipped branch is
//! active and 0 when the clipped branch wins (the clipped branch is
//! constant in theta).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Log-ratio saturation bound; `exp(50)` is still comfortably finite in
/// f64, so downstream products cannot overflow to infinity.
pub const RATIO_LOG_BOUND: f64 = 50.0;

/// Which clipped surrogate to optimize.
///
/// `Pessimistic` is the standard elementwise minimum of the unclipped and
/// clipped terms. `LiteralRatioMin` clips the ratio before multiplying,
/// `min(r, clip(r)) * A`, which only caps the upside; the two coincide for
/// positive advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipForm {
    #[default]
    Pessimistic,
    LiteralRatioMin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Ratio clip half-width.
    pub epsilon: f64,
    /// Reference-divergence penalty weight.
    pub beta: f64,
    /// Denominator guard added to the in-group reward standard deviation.
    pub xi: f64,
    #[serde(default)]
    pub clip_form: ClipForm,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta: 0.04,
            xi: 1e-8,
            clip_form: ClipForm::Pessimistic,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(GrpoError::InvalidConfig(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(GrpoError::InvalidConfig(format!(
                "beta must be finite and non-negative, got {}",
                self.beta
            )));
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(GrpoError::InvalidConfig(format!(
                "xi must be finite and non-negative, got {}",
                self.xi
            )));
        }
        Ok(())
    }
}

/// One sampled response inside a group.
#[derive(Debug, Clone)]
pub struct GroupResponse<S> {
    pub sequence: S,
    /// Sequence log-probability under the policy that sampled it.
    pub logprob_old: f64,
    pub reward: f64,
}

/// All responses sampled for one query.
#[derive(Debug, Clone)]
pub struct Group<S> {
    pub query_id: String,
    pub responses: Vec<GroupResponse<S>>,
}

impl<S> Group<S> {
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }
}

/// Normalized advantages plus the group statistics they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std_dev: f64,
    pub xi: f64,
}

/// Anything a policy must expose for analytic gradient steps.
pub trait DifferentiablePolicy<S> {
    fn param_count(&self) -> usize;
    /// Log-probability of `sequence` under the current parameters together
    /// with its gradient with respect to those parameters.
    fn logprob_and_grad(&self, sequence: &S) -> Result<(f64, Vec<f64>), GrpoError>;
}

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group must contain at least two responses, got {0}")]
    GroupTooSmall(usize),
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("policy evaluation failed: {0}")]
    PolicyEval(String),
}

/// Normalize raw rewards to in-group advantages.
///
/// The deviations are computed as `(n * r_i - sum) / n`, which is
/// algebraically `r_i - mean` but stays bitwise shift-invariant for
/// integer-valued rewards: adding a constant shifts `n * r_i` and `sum` by
/// the same exactly-representable amount. Population (not sample) standard
/// deviation is used. A group with identical rewards yields all-zero
/// advantages for any `xi`.
pub fn normalize_advantages(rewards: &[f64], xi: f64) -> Result<AdvantageVector, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite(format!("reward {bad}")));
    }
    if !(xi >= 0.0 && xi.is_finite()) {
        return Err(GrpoError::InvalidConfig(format!(
            "xi must be finite and non-negative, got {xi}"
        )));
    }
    let n = rewards.len() as f64;
    let sum: f64 = rewards.iter().sum();
    let deviations: Vec<f64> = rewards.iter().map(|r| (n * r - sum) / n).collect();
    let variance = deviations.iter().map(|d| d * d).sum::<f64>() / n;
    let std_dev = variance.sqrt();
    let denom = std_dev + xi;
    let values = deviations
        .iter()
        .map(|d| if denom == 0.0 { 0.0 } else { d / denom })
        .collect();
    Ok(AdvantageVector {
        values,
        mean: sum / n,
        std_dev,
        xi,
    })
}

/// Importance ratio `exp(logp_new - logp_old)` with the log difference
/// saturated at [`RATIO_LOG_BOUND`].
pub fn policy_ratio(logp_new: f64, logp_old: f64) -> f64 {
    (logp_new - logp_old)
        .clamp(-RATIO_LOG_BOUND, RATIO_LOG_BOUND)
        .exp()
}

/// Per-response clipped surrogate term.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64, form: ClipForm) -> f64 {
    let clamped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    match form {
        ClipForm::Pessimistic => (ratio * advantage).min(clamped * advantage),
        ClipForm::LiteralRatioMin => ratio.min(clamped) * advantage,
    }
}

/// Non-negative divergence estimator `t - ln t - 1` with
/// `t = exp(logp_ref - logp_theta)`, saturated like [`policy_ratio`].
pub fn kl_k3(logp_theta: f64, logp_ref: f64) -> f64 {
    let delta = (logp_ref - logp_theta).clamp(-RATIO_LOG_BOUND, RATIO_LOG_BOUND);
    delta.exp() - delta - 1.0
}

fn check_lengths<S>(
    group: &Group<S>,
    logp_new: &[f64],
    logp_ref: &[f64],
) -> Result<(), GrpoError> {
    if group.len() < 2 {
        return Err(GrpoError::GroupTooSmall(group.len()));
    }
    if logp_new.len() != group.len() {
        return Err(GrpoError::LengthMismatch {
            what: "logp_new",
            got: logp_new.len(),
            expected: group.len(),
        });
    }
    if logp_ref.len() != group.len() {
        return Err(GrpoError::LengthMismatch {
            what: "logp_ref",
            got: logp_ref.len(),
            expected: group.len(),
        });
    }
    for (name, values) in [("logp_new", logp_new), ("logp_ref", logp_ref)] {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(GrpoError::NonFinite(format!("{name} value {bad}")));
        }
    }
    if let Some(bad) = group.responses.iter().find(|r| !r.logprob_old.is_finite()) {
        return Err(GrpoError::NonFinite(format!(
            "logprob_old {}",
            bad.logprob_old
        )));
    }
    Ok(())
}

/// Group objective value for the given new/reference log-probabilities.
pub fn grpo_objective<S>(
    group: &Group<S>,
    logp_new: &[f64],
    logp_ref: &[f64],
    config: &GrpoConfig,
) -> Result<f64, GrpoError> {
    config.validate()?;
    check_lengths(group, logp_new, logp_ref)?;
    let advantages = normalize_advantages(&group.rewards(), config.xi)?;
    let g = group.len() as f64;
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    for (i, response) in group.responses.iter().enumerate() {
        let ratio = policy_ratio(logp_new[i], response.logprob_old);
        surrogate += clipped_term(ratio, advantages.values[i], config.epsilon, config.clip_form);
        kl += kl_k3(logp_new[i], logp_ref[i]);
    }
    Ok(surrogate / g - config.beta * kl / g)
}

/// Summary statistics logged per optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub objective: f64,
    pub mean_reward: f64,
    pub mean_advantage_abs: f64,
    pub kl_mean: f64,
    /// Fraction of responses whose ratio left the clip band.
    pub clip_fraction: f64,
}

pub fn group_stats<S>(
    group: &Group<S>,
    logp_new: &[f64],
    logp_ref: &[f64],
    config: &GrpoConfig,
) -> Result<GroupStats, GrpoError> {
    config.validate()?;
    check_lengths(group, logp_new, logp_ref)?;
    let advantages = normalize_advantages(&group.rewards(), config.xi)?;
    let g = group.len() as f64;
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    let mut clipped = 0usize;
    for (i, response) in group.responses.iter().enumerate() {
        let ratio = policy_ratio(logp_new[i], response.logprob_old);
        if ratio < 1.0 - config.epsilon || ratio > 1.0 + config.epsilon {
            clipped += 1;
        }
        surrogate += clipped_term(ratio, advantages.values[i], config.epsilon, config.clip_form);
        kl += kl_k3(logp_new[i], logp_ref[i]);
    }
    Ok(GroupStats {
        objective: surrogate / g - config.beta * kl / g,
        mean_reward: advantages.mean,
        mean_advantage_abs: advantages.values.iter().map(|a| a.abs()).sum::<f64>() / g,
        kl_mean: kl / g,
        clip_fraction: clipped as f64 / g,
    })
}

/// Analytic gradient of the group objective with respect to policy
/// parameters.
///
/// Responses on the clipped branch contribute nothing through the
/// surrogate (that branch is constant in theta); every response
/// contributes `-beta * (1 - t_i)` through the divergence penalty. Ties
/// between branches resolve to the unclipped side.
pub fn grpo_gradient<S, P: DifferentiablePolicy<S>>(
    policy: &P,
    group: &Group<S>,
    logp_ref: &[f64],
    config: &GrpoConfig,
) -> Result<Vec<f64>, GrpoError> {
    config.validate()?;
    let mut logp_new = Vec::with_capacity(group.len());
    let mut grads = Vec::with_capacity(group.len());
    for response in &group.responses {
        let (logp, grad) = policy.logprob_and_grad(&response.sequence)?;
        if grad.len() != policy.param_count() {
            return Err(GrpoError::LengthMismatch {
                what: "policy gradient",
                got: grad.len(),
                expected: policy.param_count(),
            });
        }
        logp_new.push(logp);
        grads.push(grad);
    }
    check_lengths(group, &logp_new, logp_ref)?;
    let advantages = normalize_advantages(&group.rewards(), config.xi)?;

    let g = group.len() as f64;
    let mut total = vec![0.0; policy.param_count()];
    for (i, response) in group.responses.iter().enumerate() {
        let advantage = advantages.values[i];
        let ratio = policy_ratio(logp_new[i], response.logprob_old);
        let clamped = ratio.clamp(1.0 - config.epsilon, 1.0 + config.epsilon);
        let unclipped_active = match config.clip_form {
            ClipForm::Pessimistic => ratio * advantage <= clamped * advantage,
            ClipForm::LiteralRatioMin => ratio <= 1.0 + config.epsilon,
        };
        let surrogate_coeff = if unclipped_active { advantage * ratio } else { 0.0 };
        let t = (logp_ref[i] - logp_new[i])
            .clamp(-RATIO_LOG_BOUND, RATIO_LOG_BOUND)
            .exp();
        let coeff = (surrogate_coeff - config.beta * (1.0 - t)) / g;
        for (slot, partial) in total.iter_mut().zip(&grads[i]) {
            *slot += coeff * partial;
        }
    }
    Ok(total)
}

/// One line of the per-step training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLogRecord {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_advantage_abs: f64,
    pub objective: f64,
    pub kl_mean: f64,
    pub clip_fraction: f64,
}

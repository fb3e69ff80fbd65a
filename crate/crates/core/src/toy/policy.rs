//! Log-linear policy over the toy action grammar.
//!
//! Trajectories interleave forced steps (drafting the operands and cue,
//! closing refine blocks, stopping) with decision points where the policy
//! chooses, by softmax over five hand-coded features, between opening a
//! refine block and answering with one of the menu candidates. Forced
//! steps contribute zero log-probability; grammar-violating actions are
//! masked, which bounds every trajectory by the action budget and keeps
//! every rendered trace well-formed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{DifferentiablePolicy, GrpoError};
use crate::rollout::PromptMode;
use crate::toy::task::{render_trajectory, ToyAction, ToyQuery, ACTION_BUDGET};

pub const FEATURE_COUNT: usize = 5;
/// Opening the first refine block when the draft cue failed its check.
pub const F_REFINE_INCONSISTENT: usize = 0;
/// Opening the first refine block when the draft cue looks right.
pub const F_REFINE_CONSISTENT: usize = 1;
/// Opening any further refine block.
pub const F_REFINE_AGAIN: usize = 2;
/// Answering with the candidate that matches the current cue.
pub const F_ANSWER_MATCH: usize = 3;
/// Answering with any other candidate.
pub const F_ANSWER_OTHER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub weights: Vec<f64>,
    pub temperature: f64,
}

impl ToyPolicy {
    /// Uniform policy: zero weights.
    pub fn uniform(temperature: f64) -> Self {
        Self {
            weights: vec![0.0; FEATURE_COUNT],
            temperature,
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        if self.weights.len() != FEATURE_COUNT {
            return Err(ToyError::InvalidConfig(format!(
                "policy must have {FEATURE_COUNT} weights, got {}",
                self.weights.len()
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ToyError::InvalidConfig(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if let Some(bad) = self.weights.iter().find(|w| !w.is_finite()) {
            return Err(ToyError::InvalidConfig(format!("non-finite weight {bad}")));
        }
        Ok(())
    }

    /// Hex digest of the weights, for reproducibility reporting.
    pub fn weights_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for w in &self.weights {
            hasher.update(w.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid toy config: {0}")]
    InvalidConfig(String),
    #[error("action {index} is ungrammatical here: {detail}")]
    Ungrammatical { index: usize, detail: String },
    #[error("action list ends before the trajectory completes")]
    Incomplete,
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

/// One sampled toy episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrajectory {
    pub query_id: String,
    pub actions: Vec<ToyAction>,
    /// Exact log-probability of the decision steps under the sampling
    /// policy.
    pub logprob: f64,
    /// Tag-grammar text produced by serializing the actions.
    pub rendered: String,
}

impl ToyTrajectory {
    pub fn refine_count(&self) -> usize {
        self.actions
            .iter()
            .filter(|a| matches!(a, ToyAction::OpenRefine))
            .count()
    }

    pub fn answer(&self) -> Option<&[u8]> {
        self.actions.iter().find_map(|a| match a {
            ToyAction::Answer(symbols) => Some(symbols.as_slice()),
            _ => None,
        })
    }
}

enum StepChoices {
    Forced(ToyAction),
    /// Candidate actions with their feature index.
    Decision(Vec<(ToyAction, usize)>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Draft(usize),
    Decide,
    RefineEmit,
    RefineClose,
    Stopping,
    Done,
}

/// Deterministic walk through the action grammar for one query. The
/// sampler and the log-probability evaluator share this walker, so they
/// cannot disagree about which actions are legal.
struct Walker<'q> {
    query: &'q ToyQuery,
    allow_refine: bool,
    phase: Phase,
    refines_done: usize,
    actions_used: usize,
}

impl<'q> Walker<'q> {
    fn new(query: &'q ToyQuery, mode: PromptMode) -> Self {
        Self {
            query,
            allow_refine: mode == PromptMode::RefineEnabled,
            phase: Phase::Draft(0),
            refines_done: 0,
            actions_used: 0,
        }
    }

    fn draft_tokens(&self) -> [u8; 3] {
        let (a, b) = self.query.operands();
        [a, b, self.query.draft_cue()]
    }

    fn current_cue(&self) -> u8 {
        if self.refines_done == 0 {
            self.query.draft_cue()
        } else {
            self.query.oracle()
        }
    }

    fn current_menu(&self) -> Vec<u8> {
        if self.refines_done == 0 {
            self.query.draft_menu()
        } else {
            self.query.refined_menu()
        }
    }

    fn refine_feature(&self) -> usize {
        if self.refines_done > 0 {
            F_REFINE_AGAIN
        } else if self.query.draft_cue_consistent() {
            F_REFINE_CONSISTENT
        } else {
            F_REFINE_INCONSISTENT
        }
    }

    /// A refine block costs three actions and must still leave room for
    /// the answer and stop.
    fn refine_fits_budget(&self) -> bool {
        self.actions_used + 5 <= ACTION_BUDGET
    }

    fn choices(&self) -> StepChoices {
        match self.phase {
            Phase::Draft(i) => StepChoices::Forced(ToyAction::Emit(self.draft_tokens()[i])),
            Phase::Decide => {
                let mut options = Vec::with_capacity(5);
                if self.allow_refine && self.refine_fits_budget() {
                    options.push((ToyAction::OpenRefine, self.refine_feature()));
                }
                let cue = self.current_cue();
                for candidate in self.current_menu() {
                    let feature = if candidate == cue {
                        F_ANSWER_MATCH
                    } else {
                        F_ANSWER_OTHER
                    };
                    options.push((ToyAction::Answer(vec![candidate]), feature));
                }
                StepChoices::Decision(options)
            }
            Phase::RefineEmit => StepChoices::Forced(ToyAction::Emit(self.query.oracle())),
            Phase::RefineClose => StepChoices::Forced(ToyAction::CloseRefine),
            Phase::Stopping => StepChoices::Forced(ToyAction::Stop),
            Phase::Done => unreachable!("choices requested after the trajectory ended"),
        }
    }

    fn apply(&mut self, action: &ToyAction) {
        self.actions_used += 1;
        self.phase = match (self.phase, action) {
            (Phase::Draft(i), ToyAction::Emit(_)) if i + 1 < 3 => Phase::Draft(i + 1),
            (Phase::Draft(_), ToyAction::Emit(_)) => Phase::Decide,
            (Phase::Decide, ToyAction::OpenRefine) => Phase::RefineEmit,
            (Phase::Decide, ToyAction::Answer(_)) => Phase::Stopping,
            (Phase::RefineEmit, ToyAction::Emit(_)) => Phase::RefineClose,
            (Phase::RefineClose, ToyAction::CloseRefine) => {
                self.refines_done += 1;
                Phase::Decide
            }
            (Phase::Stopping, ToyAction::Stop) => Phase::Done,
            (phase, action) => unreachable!("apply({action:?}) in phase {phase:?}"),
        };
    }

    fn done(&self) -> bool {
        self.phase == Phase::Done
    }
}

/// Softmax probabilities over the options' feature weights.
fn option_probabilities(policy: &ToyPolicy, options: &[(ToyAction, usize)]) -> Vec<f64> {
    let logits: Vec<f64> = options
        .iter()
        .map(|(_, f)| policy.weights[*f] / policy.temperature)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Sample one trajectory. Deterministic for a fixed (policy, query, mode,
/// seed).
pub fn sample_trajectory(
    policy: &ToyPolicy,
    query: &ToyQuery,
    mode: PromptMode,
    seed: u64,
) -> ToyTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut walker = Walker::new(query, mode);
    let mut actions = Vec::new();
    let mut logprob = 0.0;
    while !walker.done() {
        let action = match walker.choices() {
            StepChoices::Forced(action) => action,
            StepChoices::Decision(options) => {
                let probs = option_probabilities(policy, &options);
                let draw: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = options.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if draw < acc {
                        chosen = i;
                        break;
                    }
                }
                logprob += probs[chosen].ln();
                options.into_iter().nth(chosen).expect("index in range").0
            }
        };
        walker.apply(&action);
        actions.push(action);
    }
    let rendered = render_trajectory(&actions);
    ToyTrajectory {
        query_id: query.id.clone(),
        actions,
        logprob,
        rendered,
    }
}

/// Exact log-probability of an action list plus its gradient with respect
/// to the policy weights. Rejects lists the grammar could not produce.
pub fn logprob_and_grad(
    policy: &ToyPolicy,
    query: &ToyQuery,
    mode: PromptMode,
    actions: &[ToyAction],
) -> Result<(f64, Vec<f64>), ToyError> {
    policy.validate()?;
    let mut walker = Walker::new(query, mode);
    let mut logprob = 0.0;
    let mut grad = vec![0.0; FEATURE_COUNT];
    for (index, action) in actions.iter().enumerate() {
        if walker.done() {
            return Err(ToyError::Ungrammatical {
                index,
                detail: "trajectory already ended".to_string(),
            });
        }
        match walker.choices() {
            StepChoices::Forced(expected) => {
                if *action != expected {
                    return Err(ToyError::Ungrammatical {
                        index,
                        detail: format!("expected forced {expected:?}, got {action:?}"),
                    });
                }
            }
            StepChoices::Decision(options) => {
                let Some(chosen) = options.iter().position(|(a, _)| a == action) else {
                    return Err(ToyError::Ungrammatical {
                        index,
                        detail: format!("{action:?} is not among the available choices"),
                    });
                };
                let probs = option_probabilities(policy, &options);
                logprob += probs[chosen].ln();
                let t = policy.temperature;
                grad[options[chosen].1] += 1.0 / t;
                for ((_, feature), p) in options.iter().zip(&probs) {
                    grad[*feature] -= p / t;
                }
            }
        }
        walker.apply(action);
    }
    if !walker.done() {
        return Err(ToyError::Incomplete);
    }
    Ok((logprob, grad))
}

/// Probabilities at the decision point reached after `refines_done` refine
/// blocks, or `None` when that point is unreachable (mode or budget).
pub fn decision_probabilities(
    policy: &ToyPolicy,
    query: &ToyQuery,
    mode: PromptMode,
    refines_done: usize,
) -> Option<Vec<f64>> {
    let mut walker = Walker::new(query, mode);
    loop {
        match walker.choices() {
            StepChoices::Forced(action) => walker.apply(&action),
            StepChoices::Decision(options) => {
                if walker.refines_done == refines_done {
                    return Some(option_probabilities(policy, &options));
                }
                if !(walker.allow_refine && walker.refine_fits_budget()) {
                    return None;
                }
                walker.apply(&ToyAction::OpenRefine);
            }
        }
        if walker.done() {
            return None;
        }
    }
}

/// A toy policy bound to one query and prompt mode, as the optimizer sees
/// it.
pub struct QueryPolicy<'a> {
    pub policy: &'a ToyPolicy,
    pub query: &'a ToyQuery,
    pub mode: PromptMode,
}

impl DifferentiablePolicy<Vec<ToyAction>> for QueryPolicy<'_> {
    fn param_count(&self) -> usize {
        FEATURE_COUNT
    }

    fn logprob_and_grad(&self, sequence: &Vec<ToyAction>) -> Result<(f64, Vec<f64>), GrpoError> {
        logprob_and_grad(self.policy, self.query, self.mode, sequence)
            .map_err(|err| GrpoError::PolicyEval(err.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tag_grammar::{check_constraints, format_reward, parse_trace};
    use crate::toy::task::{make_task_set, oracle_judge, Difficulty};

    fn random_policy(seed: u64) -> ToyPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ToyPolicy {
            weights: (0..FEATURE_COUNT).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            temperature: 1.0,
        }
    }

    #[test]
    fn every_sampled_trajectory_renders_well_formed() {
        let queries = make_task_set(5, 10, 10);
        let mut checked = 0;
        for policy_seed in 0..5u64 {
            let policy = random_policy(policy_seed);
            for (i, query) in queries.iter().enumerate() {
                for sample in 0..100u64 {
                    let seed = policy_seed * 10_000 + i as u64 * 100 + sample;
                    let trajectory = sample_trajectory(&policy, query, PromptMode::RefineEnabled, seed);
                    let trace = parse_trace(&trajectory.rendered);
                    let report = check_constraints(&trace);
                    assert_eq!(format_reward(&report), 1.0, "bad trace: {}", trajectory.rendered);
                    assert!(trajectory.actions.len() <= ACTION_BUDGET);
                    assert_eq!(trace.refine_count(), trajectory.refine_count());
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, 10_000);
    }

    #[test]
    fn recorded_logprob_matches_reevaluation() {
        let queries = make_task_set(9, 5, 5);
        for policy_seed in 0..4u64 {
            let policy = random_policy(policy_seed);
            for (i, query) in queries.iter().enumerate() {
                for sample in 0..20u64 {
                    let seed = policy_seed * 1_000 + i as u64 * 50 + sample;
                    let trajectory = sample_trajectory(&policy, query, PromptMode::RefineEnabled, seed);
                    let (logp, _) =
                        logprob_and_grad(&policy, query, PromptMode::RefineEnabled, &trajectory.actions)
                            .unwrap();
                    assert!(
                        (logp - trajectory.logprob).abs() < 1e-12,
                        "recorded {} vs reevaluated {logp}",
                        trajectory.logprob
                    );
                }
            }
        }
    }

    #[test]
    fn decision_distributions_are_normalized() {
        let queries = make_task_set(2, 3, 3);
        for policy_seed in 0..4u64 {
            let policy = random_policy(policy_seed);
            for query in &queries {
                for refines in 0..3 {
                    if let Some(probs) =
                        decision_probabilities(&policy, query, PromptMode::RefineEnabled, refines)
                    {
                        let total: f64 = probs.iter().sum();
                        assert!((total - 1.0).abs() < 1e-12);
                        assert!(probs.iter().all(|p| *p > 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_policy_is_uniform_at_the_first_decision() {
        let policy = ToyPolicy::uniform(1.0);
        let query = &make_task_set(1, 1, 0)[0];
        let probs = decision_probabilities(&policy, query, PromptMode::RefineEnabled, 0).unwrap();
        // One refine option plus four answer candidates.
        assert_eq!(probs.len(), 5);
        for p in &probs {
            assert!((p - 0.2).abs() < 1e-12);
        }
        let trajectory = sample_trajectory(&policy, query, PromptMode::RefineEnabled, 3);
        if trajectory.refine_count() == 0 {
            assert!((trajectory.logprob - (0.2f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn high_temperature_approaches_uniform() {
        let mut policy = random_policy(13);
        policy.temperature = 1e4;
        let query = &make_task_set(4, 0, 1)[0];
        let probs = decision_probabilities(&policy, query, PromptMode::RefineEnabled, 0).unwrap();
        let uniform = 1.0 / probs.len() as f64;
        let kl: f64 = probs.iter().map(|p| p * (p / uniform).ln()).sum();
        assert!(kl.abs() < 1e-6, "KL to uniform was {kl}");
    }

    #[test]
    fn refine_disabled_mode_never_refines() {
        let mut policy = ToyPolicy::uniform(1.0);
        policy.weights[F_REFINE_CONSISTENT] = 10.0;
        policy.weights[F_REFINE_INCONSISTENT] = 10.0;
        let queries = make_task_set(6, 2, 2);
        for query in &queries {
            for seed in 0..20 {
                let trajectory = sample_trajectory(&policy, query, PromptMode::RefineDisabled, seed);
                assert_eq!(trajectory.refine_count(), 0);
            }
        }
    }

    #[test]
    fn hard_draft_accuracy_is_zero_under_any_weights() {
        let queries = make_task_set(8, 0, 10);
        for policy_seed in 0..10u64 {
            let policy = random_policy(policy_seed);
            for (i, query) in queries.iter().enumerate() {
                for sample in 0..10u64 {
                    let trajectory = sample_trajectory(
                        &policy,
                        query,
                        PromptMode::RefineDisabled,
                        policy_seed * 1000 + i as u64 * 10 + sample,
                    );
                    assert_eq!(oracle_judge(query, trajectory.answer().unwrap()), 0.0);
                }
            }
        }
    }

    #[test]
    fn budget_masks_endless_refinement() {
        let mut policy = ToyPolicy::uniform(1.0);
        policy.weights[F_REFINE_INCONSISTENT] = 50.0;
        policy.weights[F_REFINE_AGAIN] = 50.0;
        let query = &make_task_set(2, 0, 1)[0];
        let trajectory = sample_trajectory(&policy, query, PromptMode::RefineEnabled, 1);
        assert!(trajectory.actions.len() <= ACTION_BUDGET);
        assert!(trajectory.refine_count() >= 10);
        assert!(matches!(trajectory.actions.last(), Some(ToyAction::Stop)));
        let trace = parse_trace(&trajectory.rendered);
        assert_eq!(format_reward(&check_constraints(&trace)), 1.0);
    }

    #[test]
    fn ungrammatical_action_lists_are_rejected() {
        let policy = ToyPolicy::uniform(1.0);
        let queries = make_task_set(3, 1, 1);
        let query = &queries[0];

        let err = logprob_and_grad(&policy, query, PromptMode::RefineEnabled, &[ToyAction::Stop]);
        assert!(matches!(err, Err(ToyError::Ungrammatical { index: 0, .. })));

        // A refined trajectory is ungrammatical when refinement is
        // disabled.
        let refined = sample_trajectory(
            &{
                let mut p = ToyPolicy::uniform(1.0);
                p.weights[F_REFINE_CONSISTENT] = 10.0;
                p
            },
            query,
            PromptMode::RefineEnabled,
            5,
        );
        assert!(refined.refine_count() >= 1);
        assert!(
            logprob_and_grad(&policy, query, PromptMode::RefineDisabled, &refined.actions).is_err()
        );

        // Truncated lists are incomplete.
        let full = sample_trajectory(&policy, query, PromptMode::RefineEnabled, 2);
        let err = logprob_and_grad(
            &policy,
            query,
            PromptMode::RefineEnabled,
            &full.actions[..full.actions.len() - 1],
        );
        assert!(matches!(err, Err(ToyError::Incomplete)));

        // Answers outside the menu are masked.
        let hard = &queries[1];
        assert_eq!(hard.difficulty, Difficulty::Hard);
        let oracle_answer = vec![
            ToyAction::Emit(hard.operands().0),
            ToyAction::Emit(hard.operands().1),
            ToyAction::Emit(hard.draft_cue()),
            ToyAction::Answer(hard.oracle_answer.clone()),
            ToyAction::Stop,
        ];
        assert!(
            logprob_and_grad(&policy, hard, PromptMode::RefineEnabled, &oracle_answer).is_err(),
            "the true answer must not be reachable from a hard draft"
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let query = &make_task_set(12, 0, 1)[0];
        let base = random_policy(3);
        let trajectory = sample_trajectory(&base, query, PromptMode::RefineEnabled, 11);
        let (_, grad) =
            logprob_and_grad(&base, query, PromptMode::RefineEnabled, &trajectory.actions).unwrap();
        let h = 1e-6;
        for k in 0..FEATURE_COUNT {
            let mut plus = base.clone();
            plus.weights[k] += h;
            let mut minus = base.clone();
            minus.weights[k] -= h;
            let (lp, _) =
                logprob_and_grad(&plus, query, PromptMode::RefineEnabled, &trajectory.actions)
                    .unwrap();
            let (lm, _) =
                logprob_and_grad(&minus, query, PromptMode::RefineEnabled, &trajectory.actions)
                    .unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (grad[k] - numeric).abs() < 1e-6,
                "weight {k}: analytic {} vs numeric {numeric}",
                grad[k]
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let policy = random_policy(21);
        let query = &make_task_set(30, 1, 0)[0];
        let a = sample_trajectory(&policy, query, PromptMode::RefineEnabled, 77);
        let b = sample_trajectory(&policy, query, PromptMode::RefineEnabled, 77);
        assert_eq!(a, b);
        let c = sample_trajectory(&policy, query, PromptMode::RefineEnabled, 78);
        // Different seeds may coincide by chance on tiny action spaces, but
        // the digest-relevant fields must still be internally consistent.
        assert_eq!(c.rendered, render_trajectory(&c.actions));
    }
}

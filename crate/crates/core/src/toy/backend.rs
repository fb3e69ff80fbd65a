//! A generation backend over the toy policy.
//!
//! The backend reconstructs the query from the question text, reads the
//! prompt mode off the system text (a system prompt that teaches the
//! refine tag permits refining), and samples one trajectory. This lets the
//! rollout, evaluation, and analysis stacks exercise the toy environment
//! through exactly the interface a hosted model would use.

use std::sync::Mutex;

use crate::backend::{
    BackendCaps, BackendError, BackendIdentity, Generation, GenerationBackend, PromptInputs,
    SamplingParams,
};
use crate::rollout::PromptMode;
use crate::tag_grammar::REFINE_OPEN;
use crate::toy::policy::{sample_trajectory, ToyPolicy};
use crate::toy::task::parse_question_text;

pub struct ToyBackend {
    policy: ToyPolicy,
    /// Fallback seed source for calls that carry no seed.
    unseeded_calls: Mutex<u64>,
}

impl ToyBackend {
    pub fn new(policy: ToyPolicy) -> Self {
        Self {
            policy,
            unseeded_calls: Mutex::new(0),
        }
    }

    /// Backend over the untrained uniform policy.
    pub fn untrained() -> Self {
        Self::new(ToyPolicy::uniform(1.0))
    }

    pub fn policy(&self) -> &ToyPolicy {
        &self.policy
    }
}

impl GenerationBackend for ToyBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: "toy".to_string(),
            model: "log-linear".to_string(),
        }
    }

    fn capabilities(&self) -> BackendCaps {
        BackendCaps {
            max_concurrency: usize::MAX,
            supports_logprobs: true,
        }
    }

    fn generate(
        &self,
        prompt: &PromptInputs,
        params: &SamplingParams,
    ) -> Result<Generation, BackendError> {
        let query = parse_question_text(&prompt.user).ok_or_else(|| {
            BackendError::MalformedResponse(format!(
                "question text is not a toy task: {:?}",
                prompt.user
            ))
        })?;
        let mode = if prompt.system.contains(REFINE_OPEN) {
            PromptMode::RefineEnabled
        } else {
            PromptMode::RefineDisabled
        };
        let seed = match params.seed {
            Some(seed) => seed,
            None => {
                let mut calls = self.unseeded_calls.lock().expect("counter poisoned");
                let seed = *calls;
                *calls += 1;
                seed
            }
        };
        let trajectory = sample_trajectory(&self.policy, &query, mode, seed);
        Ok(Generation {
            text: trajectory.rendered,
            completion_tokens: Some(trajectory.actions.len() as u32),
            logprob: Some(trajectory.logprob),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::PromptTemplate;
    use crate::tag_grammar::{check_constraints, format_reward, parse_trace};
    use crate::toy::policy::{F_REFINE_CONSISTENT, F_REFINE_INCONSISTENT};
    use crate::toy::task::make_task_set;

    fn params_with_seed(seed: u64) -> SamplingParams {
        SamplingParams::default().with_seed(seed)
    }

    #[test]
    fn renders_well_formed_traces_for_every_query() {
        let backend = ToyBackend::untrained();
        let template = PromptTemplate::refine_enabled();
        for (i, query) in make_task_set(3, 4, 4).iter().enumerate() {
            let prompt = template.inputs(&query.question_text());
            let generation = backend.generate(&prompt, &params_with_seed(i as u64)).unwrap();
            let trace = parse_trace(&generation.text);
            assert_eq!(format_reward(&check_constraints(&trace)), 1.0);
            assert!(generation.completion_tokens.unwrap() >= 5);
            assert!(generation.logprob.unwrap() < 0.0);
        }
    }

    #[test]
    fn same_seed_reproduces_the_same_text() {
        let backend = ToyBackend::untrained();
        let template = PromptTemplate::refine_enabled();
        let query = &make_task_set(5, 1, 1)[1];
        let prompt = template.inputs(&query.question_text());
        let a = backend.generate(&prompt, &params_with_seed(9)).unwrap();
        let b = backend.generate(&prompt, &params_with_seed(9)).unwrap();
        assert_eq!(a.text, b.text);
    }

    #[test]
    fn refine_disabled_prompts_suppress_refine_blocks() {
        let mut policy = ToyPolicy::uniform(1.0);
        policy.weights[F_REFINE_CONSISTENT] = 8.0;
        policy.weights[F_REFINE_INCONSISTENT] = 8.0;
        let backend = ToyBackend::new(policy);
        let template = PromptTemplate::refine_disabled();
        let query = &make_task_set(6, 1, 1)[0];
        let prompt = template.inputs(&query.question_text());
        for seed in 0..10 {
            let generation = backend.generate(&prompt, &params_with_seed(seed)).unwrap();
            assert!(!generation.text.contains(REFINE_OPEN));
        }
        let enabled = PromptTemplate::refine_enabled().inputs(&query.question_text());
        let generation = backend.generate(&enabled, &params_with_seed(0)).unwrap();
        assert!(generation.text.contains(REFINE_OPEN));
    }

    #[test]
    fn rejects_foreign_questions() {
        let backend = ToyBackend::untrained();
        let template = PromptTemplate::refine_enabled();
        let prompt = template.inputs("what is the capital of France?");
        let err = backend.generate(&prompt, &params_with_seed(0));
        assert!(matches!(err, Err(BackendError::MalformedResponse(_))));
    }

    #[test]
    fn unseeded_calls_still_produce_valid_traces() {
        let backend = ToyBackend::untrained();
        let template = PromptTemplate::refine_enabled();
        let query = &make_task_set(7, 1, 0)[0];
        let prompt = template.inputs(&query.question_text());
        let unseeded = SamplingParams::default();
        for _ in 0..5 {
            let generation = backend.generate(&prompt, &unseeded).unwrap();
            let trace = parse_trace(&generation.text);
            assert_eq!(format_reward(&check_constraints(&trace)), 1.0);
        }
    }
}

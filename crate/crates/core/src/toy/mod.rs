//! A fully observable miniature environment for exercising the training
//! stack end to end.
//!
//! Queries ask for the combination of two symbols. Easy queries draft a
//! correct cue and offer it among the answer candidates; hard queries
//! draft a corrupted cue and offer only wrong candidates, so the true
//! answer becomes reachable only after a refine block replaces the cue.
//! A five-feature log-linear policy chooses between refining and
//! answering, which makes every log-probability and gradient exact and
//! every run reproducible from a seed.

pub mod backend;
pub mod policy;
pub mod task;
pub mod train;

pub use backend::ToyBackend;
pub use policy::{
    decision_probabilities, logprob_and_grad, sample_trajectory, QueryPolicy, ToyError, ToyPolicy,
    ToyTrajectory, FEATURE_COUNT, F_ANSWER_MATCH, F_ANSWER_OTHER, F_REFINE_AGAIN,
    F_REFINE_CONSISTENT, F_REFINE_INCONSISTENT,
};
pub use task::{
    make_task_set, oracle_judge, parse_question_text, render_trajectory, task_rule, Difficulty,
    ToyAction, ToyQuery, ACTION_BUDGET, ALPHABET_SIZE, MENU_SIZE,
};
pub use train::{
    measure_refine_rates, train_toy, ToyTrainConfig, ToyTrainOutcome, TrainingReport,
};

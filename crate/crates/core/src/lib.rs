//! Core library for PASR-style proactive self-refinement training.
//!
//! The crate is organized around the training loop's data flow:
//!
//! - [`tag_grammar`] parses `<think>` / `<refine>` / `<answer>` traces and
//!   checks the structural constraints behind the format reward.
//! - [`reward`] scores rollout groups with the hybrid format + accuracy +
//!   refinement reward.
//! - [`grpo`] implements group-relative advantage normalization, the clipped
//!   surrogate objective with a KL penalty, and its analytic gradient.
//! - [`toy`] is a small symbolic environment with a log-linear policy whose
//!   exact log-probabilities and gradients make end-to-end training testable.
//! - [`backend`], [`judge`], [`rollout`], [`eval`], and [`analysis`] provide
//!   the generation/judging abstractions and the rollout, evaluation, and
//!   trace-analysis harnesses built on top of them.

pub mod analysis;
pub mod backend;
pub mod eval;
pub mod grpo;
pub mod judge;
pub mod reward;
pub mod rollout;
pub mod tag_grammar;
pub mod toy;

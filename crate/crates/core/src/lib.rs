//! Feedback-conditioned self-distillation for group-relative policy optimization.
//!
//! The crate trains a small, analytically differentiable softmax policy to emit
//! grounded reasoning traces about symbolic "videos". Each rollout is scored by
//! a rule-based verifier; a rule-based judge diagnoses it; a teacher that sees
//! the verified answer, grounding evidence and the diagnosis replays the same
//! completion; and the teacher-student log-ratio on a top-K local support
//! rescales (but never flips) each token's group-relative advantage inside a
//! clipped policy-gradient update.
//!
//! Module map:
//!
//! - [`vocab`], [`trace`]: token alphabet and the trace grammar.
//! - [`verifier`]: compound verifiable reward.
//! - [`judge`]: structured feedback and its feature encoding.
//! - [`policy`]: linear softmax policy, sampling, closed-form gradients.
//! - [`teacher`]: EMA / current / sync-N teacher, replay, local support.
//! - [`optimizer`]: advantages, token credit, clipped surrogate, training step.
//! - [`env`]: synthetic episodes.
//! - [`harness`]: experiment configs, presets, metrics files, run comparison.
//!
//! The `book/` directory at the repository root walks through each piece;
//! its code listings are compiled and run as doc-tests of this crate.

pub mod env;
pub mod error;
pub mod harness;
pub mod judge;
pub mod optimizer;
pub mod policy;
pub mod rng;
pub mod teacher;
pub mod trace;
pub mod verifier;
pub mod vocab;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/traces.md")]
    mod traces {}
    #[doc = include_str!("../../../book/src/rewards.md")]
    mod rewards {}
    #[doc = include_str!("../../../book/src/judge.md")]
    mod judge {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/local-support.md")]
    mod local_support {}
    #[doc = include_str!("../../../book/src/token-credit.md")]
    mod token_credit {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}

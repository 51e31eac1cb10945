//! Adaptive-window on-policy distillation for toy autoregressive policies.
//!
//! The crate provides tabular student/teacher policies, token-local
//! distillation gradients, a prefix-gradient alignment audit, the window
//! scheduler driven by it, a bounded-staleness probe pool, the training
//! loop with its baselines, drift diagnostics and a cost ledger.

pub mod audit;
pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod ledger;
pub mod metrics;
pub mod opd;
pub mod policy;
pub mod probe;
pub mod sampling;
pub mod trainer;
pub mod window;

pub use error::{Error, Result};
pub use policy::{
    Family, FrozenPolicy, GradientVector, PolicyParams, TeacherPolicy, TokenId, TokenSequence,
    Vocabulary,
};

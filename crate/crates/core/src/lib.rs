//! Staged chain-of-thought recognition of occluded hand-held objects.
//!
//! The crate provides, as independent pieces behind one facade:
//!
//! - [`losses`]: pure numeric kernels for the training objectives
//!   (preference, quality, generation, staged supervision, masked
//!   reconstruction composition) with analytic gradients and a
//!   finite-difference checker;
//! - [`pipeline`]: the staged reasoning cascade (three attribute probes,
//!   clarity self-reflection, expert-gated final decision) with full audit
//!   traces and bounded-concurrency batch execution;
//! - [`backends`]: model/expert backend contracts with mock, fixture-replay,
//!   and HTTP chat-completion implementations;
//! - [`dataset`]: seed-deterministic corpus generation (records, five-step
//!   annotations, preference pairs) and JSONL schemas;
//! - [`eval`]: description/reflection/decision scoring and comparison-table
//!   rendering.

pub mod backends;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod pipeline;

pub use error::{Error, Result};

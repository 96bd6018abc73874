//! Batched on-policy reinforcement learning with variable experience rollouts.
//!
//! The crate is organised the way data flows through a training iteration:
//!
//! - [`envsim`]: environments with controllable simulation-time heterogeneity.
//! - [`runtime`]: environment workers, dynamically batching inference, and the
//!   Sync / NoVER / VER rollout schedulers (real threads or a virtual clock).
//! - [`rollout`]: experience storage, inflight carryover and stale backfill.
//! - [`packseq`]: equal-size mini-batches of variable-length sequences and the
//!   packed time-major layout.
//! - [`nn`]: a small reverse-mode tape, the recurrent policy, and Adam.
//! - [`learner`]: GAE, the clipped surrogate, the learned entropy coefficient.
//! - [`distributed`]: replica groups, gradient averaging, optimal preemption.
//! - [`session`]: the collect-and-learn loop over one or more replicas.
//! - [`metrics`]: JSONL records and throughput summaries.

pub mod config;
pub mod distributed;
pub mod envsim;
pub mod error;
pub mod learner;
pub mod metrics;
pub mod nn;
pub mod packseq;
pub mod rollout;
pub mod runtime;
pub mod seeding;
pub mod session;

pub use config::RunConfig;
pub use error::{Error, Result};

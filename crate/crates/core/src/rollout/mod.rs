//! Experience storage for fixed-length and variable experience rollouts.
//!
//! A [`RolloutBuffer`] accepts completed transitions in commit order. In
//! variable mode it closes as soon as `T x N` steps are committed, whatever
//! each environment contributed; in fixed mode every environment contributes
//! exactly `T`. Transitions that complete after close (inflight actions) wait
//! in a per-environment carryover slot and are committed first in the next
//! rollout.

mod buffer;
mod dump;
mod view;

pub use buffer::{AppendOutcome, RolloutBuffer, RolloutMode};
pub use dump::{read_dump, replay, DumpEntry, DumpWriter};
pub use view::{RolloutView, SequenceInfo, StoredStep};

use serde::{Deserialize, Serialize};

use crate::envsim::{Action, Observation};

/// One completed transition as produced by the collection pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvStepRecord {
    pub env_index: usize,
    pub episode: u64,
    /// Step index of `observation` within its episode.
    pub t: usize,
    pub observation: Observation,
    pub action: Action,
    /// Log-probability of `action` under the behaviour policy.
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    /// Simulated seconds the environment spent on this step.
    pub latency: f64,
    pub snapshot_version: u64,
    /// Recurrent state fed together with `observation`.
    pub hidden_in: Vec<f64>,
}

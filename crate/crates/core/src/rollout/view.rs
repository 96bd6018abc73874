use serde::{Deserialize, Serialize};

use crate::envsim::{Action, Observation};

/// A committed step as held by a closed rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredStep {
    pub env_index: usize,
    pub episode: u64,
    pub t: usize,
    pub observation: Observation,
    pub action: Action,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub latency: f64,
    pub snapshot_version: u64,
    pub sequence_id: u64,
    /// Reused from the previous rollout to fill a preempted deficit.
    pub stale: bool,
    /// Completed after the previous rollout closed.
    pub carryover: bool,
}

/// A maximal run of steps sharing one recurrent lineage: it starts at a
/// rollout start or right after a `done`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceInfo {
    pub id: u64,
    pub env_index: usize,
    /// Offset of the first step in [`RolloutView::steps`].
    pub start: usize,
    pub len: usize,
    pub initial_state: Vec<f64>,
    /// Value of the observation following the last step; needed only when
    /// the last step is not terminal.
    pub bootstrap: Option<f64>,
    pub stale: bool,
}

impl SequenceInfo {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Immutable closed rollout. Each sequence occupies a contiguous range of
/// `steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutView {
    pub rollout_index: u64,
    pub capacity: usize,
    pub steps: Vec<StoredStep>,
    pub sequences: Vec<SequenceInfo>,
    /// Fresh steps committed per environment.
    pub per_env_counts: Vec<usize>,
    /// Capacity left unfilled by fresh steps at close (preemption).
    pub deficit: usize,
}

impl RolloutView {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn num_stale(&self) -> usize {
        self.steps.iter().filter(|s| s.stale).count()
    }

    pub fn num_fresh(&self) -> usize {
        self.len() - self.num_stale()
    }

    pub fn sequence_lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.len).collect()
    }

    /// Marks every step and sequence stale (policy-lagged rollouts).
    pub fn mark_stale(&mut self) {
        self.steps.iter_mut().for_each(|s| s.stale = true);
        self.sequences.iter_mut().for_each(|s| s.stale = true);
    }
}

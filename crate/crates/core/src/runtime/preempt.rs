use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

/// When to cut a rollout short.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PreemptRule {
    Never,
    /// Preempt every replica once the group has jointly committed this many
    /// steps.
    GlobalSteps(usize),
    /// Each replica preempts itself at its own step target.
    PerReplica(Vec<usize>),
    /// Preempt every replica once this many replicas have filled their
    /// rollouts.
    Quorum(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    Continue,
    Preempt(usize),
    PreemptAll,
}

/// Shared step counter deciding preemption across replicas.
#[derive(Debug)]
pub struct Preemptor {
    rule: PreemptRule,
    committed: AtomicUsize,
    full: AtomicUsize,
    fired: AtomicBool,
}

impl Preemptor {
    pub fn new(rule: PreemptRule) -> Self {
        Preemptor {
            rule,
            committed: AtomicUsize::new(0),
            full: AtomicUsize::new(0),
            fired: AtomicBool::new(false),
        }
    }

    pub fn rule(&self) -> &PreemptRule {
        &self.rule
    }

    /// Clears the counters; call before the replicas begin a rollout.
    pub fn reset(&self) {
        self.committed.store(0, Ordering::SeqCst);
        self.full.store(0, Ordering::SeqCst);
        self.fired.store(false, Ordering::SeqCst);
    }

    pub fn fired(&self) -> bool {
        self.fired.load(Ordering::SeqCst)
    }

    /// Steps committed by all replicas since the last reset.
    pub fn committed(&self) -> usize {
        self.committed.load(Ordering::SeqCst)
    }

    /// Reports `delta` new commits by `replica`, which now holds
    /// `replica_committed` steps and is full if `became_full`.
    pub fn record(&self, replica: usize, delta: usize, replica_committed: usize, became_full: bool) -> Signal {
        let total = self.committed.fetch_add(delta, Ordering::SeqCst) + delta;
        let full = if became_full {
            self.full.fetch_add(1, Ordering::SeqCst) + 1
        } else {
            self.full.load(Ordering::SeqCst)
        };
        match &self.rule {
            PreemptRule::Never => Signal::Continue,
            PreemptRule::GlobalSteps(target) => self.fire_once(total >= *target),
            PreemptRule::Quorum(k) => self.fire_once(full >= *k),
            PreemptRule::PerReplica(targets) => {
                if targets.get(replica).is_some_and(|&t| replica_committed >= t) {
                    Signal::Preempt(replica)
                } else {
                    Signal::Continue
                }
            }
        }
    }

    fn fire_once(&self, condition: bool) -> Signal {
        if condition && !self.fired.swap(true, Ordering::SeqCst) {
            Signal::PreemptAll
        } else {
            Signal::Continue
        }
    }
}

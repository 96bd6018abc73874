use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Predicts how long collecting `S` steps takes from each environment's
/// mean step time, and picks the step count that maximises throughput
/// including the learning phase.
///
/// Environment `i` is modelled as yielding a step every `step_times[i]`
/// seconds, so its yields fall at `k * step_times[i]` for `k = 1, 2, ...`.
/// A replica stops contributing once it has yielded `replica_cap` steps
/// (its rollout is full).
#[derive(Clone, Debug, PartialEq)]
pub struct PreemptionEstimator {
    pub step_times: Vec<f64>,
    /// Replica owning each environment.
    pub replica_of: Vec<usize>,
    pub replica_cap: usize,
    /// Seconds per learning phase.
    pub learn_time: f64,
}

impl PreemptionEstimator {
    /// Single replica: every environment belongs to replica 0.
    pub fn new(step_times: Vec<f64>, replica_cap: usize, learn_time: f64) -> Self {
        PreemptionEstimator {
            replica_of: vec![0; step_times.len()],
            step_times,
            replica_cap,
            learn_time,
        }
    }

    pub fn num_replicas(&self) -> usize {
        self.replica_of.iter().max().map_or(0, |m| m + 1)
    }

    fn usable(&self, i: usize) -> bool {
        self.step_times[i].is_finite() && self.step_times[i] > 0.0
    }

    /// Upper bound on `S`: every replica full, unless some replica has no
    /// environment that ever yields.
    pub fn s_max(&self) -> usize {
        (0..self.num_replicas())
            .filter(|&r| (0..self.step_times.len()).any(|i| self.replica_of[i] == r && self.usable(i)))
            .count()
            * self.replica_cap
    }

    /// Yields of environment `i` at or before `t`.
    fn yields_by(&self, i: usize, t: f64) -> usize {
        let tau = self.step_times[i];
        if !self.usable(i) || t < tau {
            return 0;
        }
        let mut k = (t / tau).floor() as usize;
        // snap to the exact product so counts agree with k * tau
        while (k + 1) as f64 * tau <= t {
            k += 1;
        }
        while k > 0 && k as f64 * tau > t {
            k -= 1;
        }
        k
    }

    /// Steps collected by `t`, respecting per-replica caps.
    pub fn count(&self, t: f64) -> usize {
        let mut per_replica = vec![0usize; self.num_replicas()];
        for i in 0..self.step_times.len() {
            per_replica[self.replica_of[i]] += self.yields_by(i, t);
        }
        per_replica.into_iter().map(|c| c.min(self.replica_cap)).sum()
    }

    /// Time at which the `S`-th step arrives, by binary search over time on
    /// the yield count.
    pub fn estimate_time(&self, steps: usize) -> Result<f64> {
        let s_max = self.s_max();
        if steps > s_max {
            return Err(Error::StepsOutOfRange { requested: steps, max: s_max });
        }
        if steps == 0 {
            return Ok(0.0);
        }
        let min_tau = (0..self.step_times.len())
            .filter(|&i| self.usable(i))
            .map(|i| self.step_times[i])
            .fold(f64::INFINITY, f64::min);
        let max_tau = (0..self.step_times.len())
            .filter(|&i| self.usable(i))
            .map(|i| self.step_times[i])
            .fold(0.0, f64::max);
        let (mut lo, mut hi) = (0.0, max_tau * self.replica_cap as f64);
        // invariant: count(lo) < steps <= count(hi)
        for _ in 0..200 {
            if hi - lo < min_tau * 0.25 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.count(mid) >= steps {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        // (lo, hi] is narrower than any step time: each environment has at
        // most one yield inside it, and the answer is one of them
        let mut candidates: Vec<f64> = (0..self.step_times.len())
            .filter(|&i| self.usable(i))
            .map(|i| self.yields_by(i, hi) as f64 * self.step_times[i])
            .filter(|&t| t > lo)
            .collect();
        candidates.sort_by(f64::total_cmp);
        candidates
            .into_iter()
            .find(|&t| self.count(t) >= steps)
            .ok_or_else(|| Error::Protocol("time search lost its bracket".into()))
    }

    /// `Time(S)` for every `S` in `1..=s_max`, by merging the yield
    /// progressions in order.
    pub fn time_table(&self) -> Vec<f64> {
        let s_max = self.s_max();
        let mut per_replica = vec![0usize; self.num_replicas()];
        let mut heap: BinaryHeap<Reverse<(OrdF64, usize, usize)>> = (0..self.step_times.len())
            .filter(|&i| self.usable(i))
            .map(|i| Reverse((OrdF64(self.step_times[i]), i, 1)))
            .collect();
        let mut out = Vec::with_capacity(s_max);
        while out.len() < s_max {
            let Some(Reverse((OrdF64(t), i, k))) = heap.pop() else {
                break;
            };
            let r = self.replica_of[i];
            if per_replica[r] < self.replica_cap {
                per_replica[r] += 1;
                out.push(t);
                heap.push(Reverse((OrdF64((k + 1) as f64 * self.step_times[i]), i, k + 1)));
            }
        }
        out
    }

    /// `S/(Time(S) + LT)`.
    pub fn objective(&self, steps: usize, time: f64) -> f64 {
        steps as f64 / (time + self.learn_time)
    }

    /// The `S` in `1..=s_max` maximising [`objective`](Self::objective),
    /// found by scanning all of them; ties go to the smaller `S`. Returns
    /// `None` when no environment has a usable rate.
    pub fn optimal_steps(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (idx, &t) in self.time_table().iter().enumerate() {
            let s = idx + 1;
            let value = self.objective(s, t);
            if best.is_none_or(|(_, b)| value > b) {
                best = Some((s, value));
            }
        }
        best.map(|(s, _)| s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Convenience wrapper over [`PreemptionEstimator::optimal_steps`].
pub fn optimal_preempt_steps(model: &PreemptionEstimator) -> Option<usize> {
    model.optimal_steps()
}

//! Data-parallel replicas that each collect and learn, averaging gradients
//! at a barrier, plus the straggler-preemption estimator.

mod preemption;

pub use preemption::{optimal_preempt_steps, PreemptionEstimator};

use std::sync::{Condvar, Mutex};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::learner::GradientSync;

#[derive(Debug, Default)]
struct Round {
    deposits: Vec<Option<(Vec<Array2<f64>>, Vec<f64>)>>,
    arrived: usize,
    generation: u64,
    result: Option<(Vec<Array2<f64>>, Vec<f64>)>,
    taken: usize,
    aborted: Option<String>,
}

/// Gradient-averaging barrier shared by `R` replica learner threads.
///
/// The mean is summed in replica order by whichever thread arrives last,
/// and every replica copies the same result, so replicas that start from
/// identical parameters stay bitwise identical.
#[derive(Debug)]
pub struct ReplicaGroup {
    size: usize,
    round: Mutex<Round>,
    ready: Condvar,
}

impl ReplicaGroup {
    pub fn new(size: usize) -> Self {
        assert!(size > 0, "replica group needs at least one member");
        ReplicaGroup {
            size,
            round: Mutex::new(Round {
                deposits: vec![None; size],
                ..Round::default()
            }),
            ready: Condvar::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Releases every waiting replica with an error; later calls fail too.
    pub fn abort(&self, reason: &str) {
        let mut round = self.round.lock().unwrap_or_else(|e| e.into_inner());
        round.aborted.get_or_insert_with(|| reason.to_string());
        self.ready.notify_all();
    }

    /// Element-wise mean of every replica's `grads` and `extra`, written
    /// back in place.
    pub fn allreduce(&self, replica: usize, grads: &mut [Array2<f64>], extra: &mut [f64]) -> Result<()> {
        if self.size == 1 {
            return Ok(());
        }
        let mut round = self.round.lock().unwrap_or_else(|e| e.into_inner());
        // a previous round is still being read out
        while round.result.is_some() && round.aborted.is_none() {
            round = self.ready.wait(round).unwrap_or_else(|e| e.into_inner());
        }
        if let Some(reason) = &round.aborted {
            return Err(Error::ReplicaAborted(reason.clone()));
        }
        if round.deposits[replica].is_some() {
            return Err(Error::Protocol(format!("replica {replica} entered the barrier twice")));
        }
        round.deposits[replica] = Some((grads.to_vec(), extra.to_vec()));
        round.arrived += 1;
        let generation = round.generation;
        if round.arrived == self.size {
            let mut deposits = round.deposits.iter_mut().map(|d| d.take().expect("all arrived"));
            let (mut sum_g, mut sum_e) = deposits.next().expect("size > 1");
            for (g, e) in deposits {
                if g.len() != sum_g.len() || e.len() != sum_e.len() {
                    round.aborted = Some("replicas disagree on gradient layout".into());
                    self.ready.notify_all();
                    return Err(Error::Shape("replicas disagree on gradient layout".into()));
                }
                for (s, x) in sum_g.iter_mut().zip(&g) {
                    *s += x;
                }
                for (s, x) in sum_e.iter_mut().zip(&e) {
                    *s += x;
                }
            }
            let r = self.size as f64;
            sum_g.iter_mut().for_each(|s| *s /= r);
            sum_e.iter_mut().for_each(|s| *s /= r);
            round.result = Some((sum_g, sum_e));
            round.arrived = 0;
            round.generation += 1;
            self.ready.notify_all();
        } else {
            while round.generation == generation && round.aborted.is_none() {
                round = self.ready.wait(round).unwrap_or_else(|e| e.into_inner());
            }
            if let Some(reason) = &round.aborted {
                return Err(Error::ReplicaAborted(reason.clone()));
            }
        }
        let (mean_g, mean_e) = round.result.as_ref().expect("round completed");
        for (dst, src) in grads.iter_mut().zip(mean_g) {
            dst.assign(src);
        }
        extra.copy_from_slice(mean_e);
        round.taken += 1;
        if round.taken == self.size {
            round.taken = 0;
            round.result = None;
            self.ready.notify_all();
        }
        Ok(())
    }

    /// View of the group as seen by one replica.
    pub fn member(&self, replica: usize) -> GroupMember<'_> {
        GroupMember { group: self, replica }
    }
}

/// [`GradientSync`] handle binding a replica index to its group.
#[derive(Clone, Copy, Debug)]
pub struct GroupMember<'a> {
    group: &'a ReplicaGroup,
    replica: usize,
}

impl GradientSync for GroupMember<'_> {
    fn allreduce(&self, grads: &mut [Array2<f64>], extra: &mut [f64]) -> Result<()> {
        self.group.allreduce(self.replica, grads, extra)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_replica_is_identity() {
        let g = ReplicaGroup::new(1);
        let mut grads = vec![array![[1.0, 2.0]]];
        let mut extra = vec![3.0];
        g.allreduce(0, &mut grads, &mut extra).unwrap();
        assert_eq!(grads[0], array![[1.0, 2.0]]);
        assert_eq!(extra, vec![3.0]);
    }

    #[test]
    fn opposite_gradients_cancel() {
        let g = ReplicaGroup::new(2);
        std::thread::scope(|s| {
            for (r, sign) in [(0, 1.0), (1, -1.0)] {
                let g = &g;
                s.spawn(move || {
                    for round in 0..5 {
                        let mut grads = vec![array![[1.5, -2.0], [0.25, round as f64]] * sign];
                        let mut extra = vec![sign * 4.0];
                        g.allreduce(r, &mut grads, &mut extra).unwrap();
                        assert!(grads[0].iter().all(|&x| x == 0.0));
                        assert_eq!(extra[0], 0.0);
                    }
                });
            }
        });
    }

    #[test]
    fn abort_releases_waiters() {
        let g = ReplicaGroup::new(2);
        std::thread::scope(|s| {
            let h = s.spawn(|| {
                let mut grads = vec![array![[1.0]]];
                g.allreduce(0, &mut grads, &mut [])
            });
            std::thread::sleep(std::time::Duration::from_millis(20));
            g.abort("replica 1 failed");
            assert!(matches!(h.join().unwrap(), Err(Error::ReplicaAborted(_))));
        });
    }
}

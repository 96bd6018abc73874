//! Environment workers, dynamically batching inference and the rollout
//! schedulers.
//!
//! [`InferenceCore`] holds everything the inference side decides (which
//! requests to serve, when a rollout closes, what gets committed) and knows
//! nothing about threads or time sources. Two drivers feed it:
//!
//! - [`VirtualCluster`] is a discrete-event simulation. Environment latency,
//!   inference service time and learn time advance a virtual clock, so runs
//!   are exactly reproducible and independent of the host.
//! - [`ThreadedCluster`] runs real threads: environment workers sleep for
//!   the sampled latency, one inference thread per replica batches whatever
//!   has arrived.
//!
//! Both implement [`Cluster`], which the training session drives one
//! collection phase at a time.

mod core;
mod preempt;
mod threaded;
mod virtual_clock;

use std::sync::Arc;

pub use self::core::{Arrival, Collected, CoreSettings, InferenceCore, RolloutTiming};
pub use preempt::{PreemptRule, Preemptor, Signal};
pub use threaded::ThreadedCluster;
pub use virtual_clock::VirtualCluster;

use crate::config::RunConfig;
use crate::envsim::{Action, Env, Observation};
use crate::error::Result;
use crate::nn::PolicyParams;
use crate::seeding::episode_seed;

/// One environment plus its episode bookkeeping. Resets automatically when
/// an episode ends so the next request carries the fresh observation.
#[derive(Debug)]
pub struct EnvRunner {
    env: Env,
    global_index: usize,
    seed: u64,
    episode: u64,
}

impl EnvRunner {
    pub fn new(cfg: &RunConfig, replica: usize, local: usize) -> Self {
        let slowdown = cfg.rollout.slowdown(local) * cfg.distributed.slowdown(replica);
        EnvRunner {
            env: Env::new(cfg.task.clone(), cfg.latency.clone(), slowdown),
            global_index: replica * cfg.rollout.num_envs + local,
            seed: cfg.run.seed,
            episode: 0,
        }
    }

    pub fn start(&mut self) -> Observation {
        self.episode = 0;
        self.env.reset(episode_seed(self.seed, self.global_index, 0))
    }

    /// Steps the environment; returns the arrival to report and the
    /// simulated latency to wait before reporting it.
    pub fn step(&mut self, action: &Action) -> Result<(Arrival, f64)> {
        let result = self.env.step(action)?;
        let latency = result.latency;
        let next_observation = if result.done {
            self.episode += 1;
            self.env
                .reset(episode_seed(self.seed, self.global_index, self.episode))
        } else {
            result.observation.clone()
        };
        Ok((
            Arrival::Step {
                result,
                next_observation,
            },
            latency,
        ))
    }
}

/// Splits `num_envs` environments over workers holding at most
/// `per_worker` each.
pub fn partition_envs(num_envs: usize, per_worker: usize) -> Vec<Vec<usize>> {
    let per_worker = per_worker.max(1);
    (0..num_envs)
        .collect::<Vec<_>>()
        .chunks(per_worker)
        .map(<[usize]>::to_vec)
        .collect()
}

/// A set of replicas collecting experience on a common clock.
pub trait Cluster {
    fn num_replicas(&self) -> usize;

    /// Seconds on this cluster's clock.
    fn now(&self) -> f64;

    /// Starts a rollout on every replica with the given parameter snapshot.
    fn begin_all(&mut self, snapshots: &[Arc<PolicyParams>], version: u64) -> Result<()>;

    /// Blocks until every replica has closed its rollout. Results are
    /// ordered by replica.
    fn wait_all(&mut self) -> Result<Vec<Collected>>;

    /// Lets `seconds` of learner time pass. Real clocks have already spent
    /// it; the virtual clock processes the events that fall inside it.
    fn advance(&mut self, seconds: f64) -> Result<()>;

    /// Replaces the preemption rule for subsequent rollouts.
    fn set_preemption(&mut self, rule: PreemptRule);

    fn shutdown(&mut self) -> Result<()>;
}

/// Builds the driver selected by `cfg.run.clock`.
pub fn build_cluster(cfg: &RunConfig) -> Result<Box<dyn Cluster + Send>> {
    match cfg.run.clock {
        crate::config::Clock::Virtual => Ok(Box::new(VirtualCluster::new(cfg)?)),
        crate::config::Clock::Real => Ok(Box::new(ThreadedCluster::new(cfg)?)),
    }
}

pub(crate) fn core_settings(cfg: &RunConfig, replica: usize) -> CoreSettings {
    CoreSettings {
        regime: cfg.run.regime,
        num_envs: cfg.rollout.num_envs,
        steps_per_env: cfg.rollout.steps_per_env,
        batching: cfg.batching_policy(),
        seed: cfg.run.seed,
        replica,
    }
}

use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::config::{BatchingPolicy, Regime};
use crate::envsim::{Action, Observation, StepResult};
use crate::error::{Error, Result};
use crate::nn::PolicyParams;
use crate::rollout::{AppendOutcome, DumpWriter, EnvStepRecord, RolloutBuffer, RolloutMode, RolloutView};
use crate::seeding::{stream_rng, Stream};

/// What an environment worker hands back.
#[derive(Clone, Debug)]
pub enum Arrival {
    /// First observation after start-up.
    Initial(Observation),
    /// A completed step. `next_observation` is the post-reset observation
    /// when the step ended the episode.
    Step {
        result: StepResult,
        next_observation: Observation,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoreSettings {
    pub regime: Regime,
    pub num_envs: usize,
    pub steps_per_env: usize,
    pub batching: BatchingPolicy,
    pub seed: u64,
    pub replica: usize,
}

impl CoreSettings {
    /// Index of local env `env` among all replicas' environments.
    pub fn global_env(&self, env: usize) -> usize {
        self.replica * self.num_envs + env
    }
}

/// Per-rollout collection record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutTiming {
    pub replica: usize,
    pub rollout_index: u64,
    pub regime: Option<Regime>,
    /// Seconds on the runtime clock.
    pub start: f64,
    pub end: f64,
    pub wall_time: f64,
    /// Fresh steps in the view.
    pub steps: usize,
    pub per_env_counts: Vec<usize>,
    /// Seconds each environment spent waiting for an action.
    pub idle_times: Vec<f64>,
    pub snapshot_version: u64,
    pub preempted: bool,
    pub deficit: usize,
    pub inference_batches: usize,
    pub mean_batch_size: f64,
    /// Request-to-action latency percentiles, seconds.
    pub wait_p50: f64,
    pub wait_p99: f64,
    pub wait_max: f64,
    pub episodes: usize,
    pub mean_return: Option<f64>,
}

/// A closed rollout with its timing and the episodes that finished in it.
#[derive(Clone, Debug)]
pub struct Collected {
    pub view: RolloutView,
    pub timing: RolloutTiming,
    pub episode_returns: Vec<f64>,
}

#[derive(Debug)]
struct Waiting {
    observation: Observation,
    since: f64,
}

#[derive(Debug)]
struct Pending {
    observation: Observation,
    action: Action,
    log_prob: f64,
    value: f64,
    hidden_in: Vec<f64>,
    version: u64,
}

#[derive(Debug)]
struct EnvSlot {
    episode: u64,
    t: usize,
    hidden: Array1<f64>,
    waiting: Option<Waiting>,
    pending: Option<Pending>,
    issued: usize,
    episode_return: f64,
}

/// The inference side of collection, independent of threads and clocks:
/// takes environment arrivals, forms dynamic batches, samples actions with
/// the current parameter snapshot, and commits completed transitions.
#[derive(Debug)]
pub struct InferenceCore {
    settings: CoreSettings,
    buffer: RolloutBuffer,
    envs: Vec<EnvSlot>,
    snapshot: Option<Arc<PolicyParams>>,
    version: u64,
    collecting: bool,
    preempted: bool,
    rollout_start: f64,
    idle: Vec<f64>,
    waits: Vec<f64>,
    batches: usize,
    batch_items: usize,
    returns: Vec<f64>,
}

impl InferenceCore {
    pub fn new(settings: CoreSettings, rnn_hidden: usize) -> Self {
        let mode = if settings.regime.variable_rollouts() {
            RolloutMode::Variable
        } else {
            RolloutMode::Fixed
        };
        InferenceCore {
            buffer: RolloutBuffer::new(mode, settings.num_envs, settings.steps_per_env),
            envs: (0..settings.num_envs)
                .map(|_| EnvSlot {
                    episode: 0,
                    t: 0,
                    hidden: Array1::zeros(rnn_hidden),
                    waiting: None,
                    pending: None,
                    issued: 0,
                    episode_return: 0.0,
                })
                .collect(),
            idle: vec![0.0; settings.num_envs],
            settings,
            snapshot: None,
            version: 0,
            collecting: false,
            preempted: false,
            rollout_start: 0.0,
            waits: Vec::new(),
            batches: 0,
            batch_items: 0,
            returns: Vec::new(),
        }
    }

    pub fn settings(&self) -> &CoreSettings {
        &self.settings
    }

    pub fn set_dump(&mut self, writer: DumpWriter) -> Result<()> {
        self.buffer.set_dump(writer)
    }

    pub fn is_collecting(&self) -> bool {
        self.collecting
    }

    /// True once the current rollout has reached its close condition.
    pub fn ready_to_close(&self) -> bool {
        self.collecting && !self.buffer.is_open()
    }

    /// Fresh steps committed so far in the current rollout.
    pub fn committed(&self) -> usize {
        self.buffer.committed()
    }

    pub fn capacity(&self) -> usize {
        self.buffer.capacity()
    }

    pub fn num_waiting(&self) -> usize {
        self.envs.iter().filter(|e| e.waiting.is_some()).count()
    }

    pub fn num_pending(&self) -> usize {
        self.envs.iter().filter(|e| e.pending.is_some()).count()
    }

    pub fn begin_rollout(&mut self, snapshot: Arc<PolicyParams>, version: u64, now: f64) -> Result<()> {
        if self.collecting {
            return Err(Error::Protocol("rollout already in progress".into()));
        }
        self.buffer.begin_rollout()?;
        self.snapshot = Some(snapshot);
        self.version = version;
        self.collecting = true;
        self.preempted = false;
        self.rollout_start = now;
        self.idle.iter_mut().for_each(|x| *x = 0.0);
        self.waits.clear();
        self.batches = 0;
        self.batch_items = 0;
        for env in &mut self.envs {
            env.issued = 0;
        }
        Ok(())
    }

    /// Commits a completed step (if any) and queues the next observation.
    pub fn on_arrival(&mut self, env: usize, arrival: Arrival, now: f64) -> Result<Option<AppendOutcome>> {
        let slot = self
            .envs
            .get_mut(env)
            .ok_or_else(|| Error::Protocol(format!("arrival from unknown env {env}")))?;
        if slot.waiting.is_some() {
            return Err(Error::Protocol(format!("env {env} has two outstanding requests")));
        }
        let (observation, outcome) = match arrival {
            Arrival::Initial(obs) => (obs, None),
            Arrival::Step {
                result,
                next_observation,
            } => {
                let pending = slot
                    .pending
                    .take()
                    .ok_or_else(|| Error::Protocol(format!("env {env} returned a step it was never asked for")))?;
                let record = EnvStepRecord {
                    env_index: env,
                    episode: slot.episode,
                    t: slot.t,
                    observation: pending.observation,
                    action: pending.action,
                    log_prob: pending.log_prob,
                    value: pending.value,
                    reward: result.reward,
                    done: result.done,
                    latency: result.latency,
                    snapshot_version: pending.version,
                    hidden_in: pending.hidden_in,
                };
                slot.episode_return += result.reward;
                if result.done {
                    self.returns.push(slot.episode_return);
                    slot.episode_return = 0.0;
                    slot.episode += 1;
                    slot.t = 0;
                    slot.hidden.fill(0.0);
                } else {
                    slot.t += 1;
                }
                let outcome = self.buffer.append_step(record)?;
                (next_observation, Some(outcome))
            }
        };
        self.envs[env].waiting = Some(Waiting {
            observation,
            since: now,
        });
        Ok(outcome)
    }

    fn eligible(&self, env: usize) -> bool {
        let slot = &self.envs[env];
        slot.waiting.is_some()
            && slot.pending.is_none()
            && (self.settings.regime.variable_rollouts() || slot.issued < self.settings.steps_per_env)
    }

    fn eligible_by_age(&self) -> Vec<usize> {
        if !self.collecting || !self.buffer.is_open() {
            return Vec::new();
        }
        let mut ready: Vec<usize> = (0..self.envs.len()).filter(|&e| self.eligible(e)).collect();
        ready.sort_by(|&a, &b| {
            let (sa, sb) = (self.since(a), self.since(b));
            sa.total_cmp(&sb).then(a.cmp(&b))
        });
        ready
    }

    fn since(&self, env: usize) -> f64 {
        self.envs[env].waiting.as_ref().map_or(f64::INFINITY, |w| w.since)
    }

    /// Requests to serve now, oldest first, or `None` if the batching
    /// policy says to keep waiting.
    pub fn select_batch(&self, now: f64) -> Option<Vec<usize>> {
        let ready = self.eligible_by_age();
        let b = &self.settings.batching;
        if ready.is_empty() {
            return None;
        }
        if ready.len() >= b.min_requests {
            return Some(ready.into_iter().take(b.max_requests).collect());
        }
        // below the minimum: serve once the oldest request has waited long enough
        (now >= self.since(ready[0]) + b.max_wait).then(|| ready.into_iter().take(b.max_requests).collect())
    }

    /// When the oldest under-minimum request times out, if ever.
    pub fn next_deadline(&self) -> Option<f64> {
        let ready = self.eligible_by_age();
        let b = &self.settings.batching;
        (!ready.is_empty() && ready.len() < b.min_requests && b.max_wait.is_finite())
            .then(|| self.since(ready[0]) + b.max_wait)
    }

    /// One batched forward pass; returns the sampled action per env.
    pub fn infer(&mut self, batch: &[usize], now: f64) -> Result<Vec<(usize, Action)>> {
        let params = self
            .snapshot
            .clone()
            .ok_or_else(|| Error::Protocol("inference before the first rollout".into()))?;
        let obs_dim = params.spec.obs_dim;
        let h = params.spec.rnn_hidden;
        let mut obs = Array2::zeros((batch.len(), obs_dim));
        let mut hidden = Array2::zeros((batch.len(), h));
        for (row, &env) in batch.iter().enumerate() {
            if !self.eligible(env) {
                return Err(Error::Protocol(format!("env {env} is not awaiting an action")));
            }
            let slot = &self.envs[env];
            let o = slot.waiting.as_ref().expect("eligible").observation.as_slice();
            if o.len() != obs_dim {
                return Err(Error::Shape(format!("observation width {} != {obs_dim}", o.len())));
            }
            obs.row_mut(row).assign(&ndarray::ArrayView1::from(o));
            hidden.row_mut(row).assign(&slot.hidden);
        }
        let out = params.step(obs.view(), hidden.view())?;
        let mut actions = Vec::with_capacity(batch.len());
        for (row, &env) in batch.iter().enumerate() {
            let global = self.settings.global_env(env) as u64;
            let slot = &mut self.envs[env];
            let waiting = slot.waiting.take().expect("eligible");
            let dist = out.distribution(&params, row);
            let mut rng = stream_rng(Stream::Action, &[self.settings.seed, global, slot.episode, slot.t as u64]);
            let action = dist.sample(&mut rng);
            let log_prob = dist.log_prob(&action);
            let hidden_in = slot.hidden.to_vec();
            slot.hidden.assign(&out.hidden.row(row));
            slot.pending = Some(Pending {
                observation: waiting.observation,
                action: action.clone(),
                log_prob,
                value: out.values[row],
                hidden_in,
                version: self.version,
            });
            slot.issued += 1;
            let waited = now - waiting.since.max(self.rollout_start);
            self.waits.push(waited);
            self.idle[env] += waited;
            actions.push((env, action));
        }
        self.batches += 1;
        self.batch_items += batch.len();
        Ok(actions)
    }

    /// Closes the rollout early; later arrivals are carried over.
    pub fn preempt(&mut self) {
        if self.collecting && self.buffer.is_open() {
            self.buffer.preempt();
            self.preempted = true;
        }
    }

    /// Builds the closed view, backfilling any preemption deficit from the
    /// previous rollout. Bootstrap values come from the pending step
    /// (already evaluated) or from a value-only forward of the waiting
    /// observation.
    pub fn close(&mut self, now: f64) -> Result<Collected> {
        if !self.ready_to_close() {
            return Err(Error::Protocol("close before the rollout reached its end".into()));
        }
        let params = self.snapshot.clone().expect("collecting implies a snapshot");
        let n = self.envs.len();
        let mut bootstraps = vec![None; n];
        let mut to_eval = Vec::new();
        for (env, slot) in self.envs.iter().enumerate() {
            match self.buffer.last_committed_done(env) {
                None | Some(true) => {}
                Some(false) => {
                    if let Some(p) = &slot.pending {
                        bootstraps[env] = Some(p.value);
                    } else if slot.waiting.is_some() {
                        to_eval.push(env);
                    } else {
                        return Err(Error::Protocol(format!("env {env} has neither a pending nor a waiting step")));
                    }
                }
            }
        }
        if !to_eval.is_empty() {
            let mut obs = Array2::zeros((to_eval.len(), params.spec.obs_dim));
            let mut hidden = Array2::zeros((to_eval.len(), params.spec.rnn_hidden));
            for (row, &env) in to_eval.iter().enumerate() {
                let slot = &self.envs[env];
                let o = slot.waiting.as_ref().expect("checked").observation.as_slice();
                obs.row_mut(row).assign(&ndarray::ArrayView1::from(o));
                hidden.row_mut(row).assign(&slot.hidden);
            }
            let out = params.step(obs.view(), hidden.view())?;
            for (row, &env) in to_eval.iter().enumerate() {
                bootstraps[env] = Some(out.values[row]);
            }
        }
        for (env, slot) in self.envs.iter().enumerate() {
            if let Some(w) = &slot.waiting {
                self.idle[env] += (now - w.since.max(self.rollout_start)).max(0.0);
            }
        }
        let view = self.buffer.close_rollout(&bootstraps)?;
        self.collecting = false;
        // a preempted rollout is topped up from the previous one
        let view = if view.deficit > 0 {
            self.buffer.backfill_stale(view, self.settings.seed)?
        } else {
            view
        };
        let mut waits = std::mem::take(&mut self.waits);
        waits.sort_by(f64::total_cmp);
        let pct = |q: f64| -> f64 {
            if waits.is_empty() {
                0.0
            } else {
                waits[((waits.len() - 1) as f64 * q).round() as usize]
            }
        };
        let episode_returns = std::mem::take(&mut self.returns);
        let timing = RolloutTiming {
            replica: self.settings.replica,
            rollout_index: view.rollout_index,
            regime: Some(self.settings.regime),
            start: self.rollout_start,
            end: now,
            wall_time: now - self.rollout_start,
            steps: view.num_fresh(),
            per_env_counts: view.per_env_counts.clone(),
            idle_times: self.idle.clone(),
            snapshot_version: self.version,
            preempted: self.preempted,
            deficit: view.deficit,
            inference_batches: self.batches,
            mean_batch_size: if self.batches == 0 {
                0.0
            } else {
                self.batch_items as f64 / self.batches as f64
            },
            wait_p50: pct(0.5),
            wait_p99: pct(0.99),
            wait_max: waits.last().copied().unwrap_or(0.0),
            episodes: episode_returns.len(),
            mean_return: (!episode_returns.is_empty())
                .then(|| episode_returns.iter().sum::<f64>() / episode_returns.len() as f64),
        };
        Ok(Collected {
            view,
            timing,
            episode_returns,
        })
    }

    /// One-line state summary for deadlock reports.
    pub fn diagnostics(&self) -> String {
        format!(
            "replica {} collecting={} committed={}/{} waiting={} pending={} carryovers={}",
            self.settings.replica,
            self.collecting,
            self.buffer.committed(),
            self.buffer.capacity(),
            self.num_waiting(),
            self.num_pending(),
            self.buffer.pending_carryovers()
        )
    }
}

//! The training loop: collect on every replica, learn, repeat.
//!
//! Without overlap a rollout is collected with the parameters produced by
//! the previous update, so learning and collection never run at the same
//! time. With overlap the next rollout starts right after the current one
//! closes, using the parameters from before the update; the learner then
//! always trains on data one update old, which is flagged stale.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use crate::config::{Clock, PreemptionMode, PreemptionScope, RunConfig};
use crate::distributed::{PreemptionEstimator, ReplicaGroup};
use crate::error::{Error, Result};
use crate::learner::{Learner, TrainStats};
use crate::metrics::{IterationRecord, JsonlWriter, UpdateRecord};
use crate::nn::PolicyParams;
use crate::runtime::{build_cluster, Cluster, Collected, PreemptRule};
use crate::seeding::{stream_key, Stream};

/// Everything one iteration produced.
#[derive(Debug)]
pub struct Iteration {
    pub record: IterationRecord,
    pub collected: Vec<Collected>,
    pub stats: Vec<TrainStats>,
    /// Clock times bracketing the learning phase.
    pub learn_start: f64,
    pub learn_end: f64,
}

#[derive(Debug)]
struct Outputs {
    dir: PathBuf,
    iterations: JsonlWriter,
    updates: JsonlWriter,
    rollouts: JsonlWriter,
}

pub struct Session {
    cfg: RunConfig,
    cluster: Box<dyn Cluster + Send>,
    learners: Vec<Learner>,
    group: ReplicaGroup,
    version: u64,
    in_flight: bool,
    last_close: Option<f64>,
    last_learn_time: Option<f64>,
    preempt_target: Option<usize>,
    next_rule: PreemptRule,
    cumulative_steps: u64,
    outputs: Option<Outputs>,
}

impl Session {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.policy_spec();
        let init = PolicyParams::init(spec, stream_key(Stream::Init, &[cfg.run.seed]));
        let learners = (0..cfg.run.replicas)
            .map(|r| {
                Learner::new(
                    init.clone(),
                    cfg.ppo.clone(),
                    &cfg.entropy,
                    cfg.total_updates(),
                    stream_key(Stream::Minibatch, &[cfg.run.seed, r as u64]),
                )
            })
            .collect();
        Ok(Session {
            cluster: build_cluster(cfg)?,
            learners,
            group: ReplicaGroup::new(cfg.run.replicas),
            cfg: cfg.clone(),
            version: 0,
            in_flight: false,
            last_close: None,
            last_learn_time: None,
            preempt_target: None,
            next_rule: PreemptRule::Never,
            cumulative_steps: 0,
            outputs: None,
        })
    }

    /// Writes JSONL metrics and checkpoints under `cfg.run.out_dir`.
    pub fn with_outputs(mut self) -> Result<Self> {
        let dir = self.cfg.run.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        std::fs::write(dir.join("config.toml"), self.cfg.to_toml_string()).map_err(|e| Error::io(&dir, e))?;
        self.outputs = Some(Outputs {
            iterations: JsonlWriter::create(&dir.join("iterations.jsonl"))?,
            updates: JsonlWriter::create(&dir.join("updates.jsonl"))?,
            rollouts: JsonlWriter::create(&dir.join("rollouts.jsonl"))?,
            dir,
        });
        Ok(self)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn learners(&self) -> &[Learner] {
        &self.learners
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn snapshots(&self) -> Vec<Arc<PolicyParams>> {
        self.learners.iter().map(|l| Arc::new(l.params.clone())).collect()
    }

    fn begin(&mut self) -> Result<()> {
        self.cluster.set_preemption(self.next_rule.clone());
        self.preempt_target = match &self.next_rule {
            PreemptRule::GlobalSteps(s) => Some(*s),
            PreemptRule::PerReplica(t) => Some(t.iter().sum()),
            _ => None,
        };
        let snapshots = self.snapshots();
        if self.last_close.is_none() {
            self.last_close = Some(self.cluster.now());
        }
        self.cluster.begin_all(&snapshots, self.version)?;
        self.in_flight = true;
        Ok(())
    }

    /// Runs one collect-and-learn iteration.
    pub fn step(&mut self) -> Result<Iteration> {
        let update = self.learners[0].updates;
        if !self.in_flight {
            self.begin()?;
        }
        let preempt_target = self.preempt_target;
        let mut collected = self.cluster.wait_all()?;
        self.in_flight = false;
        let close_time = self.cluster.now();

        if self.cfg.run.overlap {
            for c in &mut collected {
                mark_lagged(c, self.version);
            }
        }
        let is_last = update + 1 >= self.cfg.num_updates();
        if self.cfg.run.overlap && !is_last {
            // start the next rollout before learning, with pre-update weights
            self.begin()?;
        }

        let learn_start = self.cluster.now();
        let wall = Instant::now();
        let stats = self.learn(&collected)?;
        let learn_time = match self.cfg.run.clock {
            Clock::Virtual => self.cfg.sim.learn_time_ms / 1e3,
            Clock::Real => wall.elapsed().as_secs_f64(),
        };
        self.cluster.advance(learn_time)?;
        let learn_end = self.cluster.now();
        self.version += 1;
        self.last_learn_time = Some(learn_time);
        self.next_rule = self.preemption_rule(&collected, learn_time);

        let steps: usize = collected.iter().map(|c| c.timing.steps).sum();
        self.cumulative_steps += steps as u64;
        let returns: Vec<f64> = collected.iter().flat_map(|c| c.episode_returns.iter().copied()).collect();
        let interval = close_time - self.last_close.unwrap_or(0.0);
        self.last_close = Some(close_time);
        let record = IterationRecord {
            update,
            steps,
            cumulative_steps: self.cumulative_steps,
            close_time,
            interval,
            sps: if interval > 0.0 { steps as f64 / interval } else { 0.0 },
            collect_time: collected.iter().map(|c| c.timing.wall_time).fold(0.0, f64::max),
            learn_time,
            episodes: returns.len(),
            mean_return: (!returns.is_empty()).then(|| returns.iter().sum::<f64>() / returns.len() as f64),
            stale_steps: collected.iter().map(|c| c.view.num_stale()).sum(),
            preempted_replicas: collected.iter().filter(|c| c.timing.preempted).count(),
            preempt_target,
            max_divergence: self.max_divergence(),
        };
        self.write_outputs(&record, &collected, &stats)?;
        Ok(Iteration {
            record,
            collected,
            stats,
            learn_start,
            learn_end,
        })
    }

    fn learn(&mut self, collected: &[Collected]) -> Result<Vec<TrainStats>> {
        if self.learners.len() == 1 {
            return Ok(vec![self.learners[0].update(&collected[0].view, None)?]);
        }
        let group = &self.group;
        let results: Vec<Result<TrainStats>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .learners
                .iter_mut()
                .zip(collected)
                .enumerate()
                .map(|(r, (learner, c))| {
                    s.spawn(move || {
                        let member = group.member(r);
                        let out = learner.update(&c.view, Some(&member));
                        if let Err(e) = &out {
                            group.abort(&format!("replica {r}: {e}"));
                        }
                        out
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::ReplicaAborted("learner thread panicked".into()))))
                .collect()
        });
        results.into_iter().collect()
    }

    fn max_divergence(&self) -> f64 {
        let first = &self.learners[0].params;
        self.learners[1..]
            .iter()
            .map(|l| l.params.max_abs_diff(first))
            .fold(0.0, f64::max)
    }

    /// Preemption for the next rollout, from this rollout's per-env rates.
    fn preemption_rule(&self, collected: &[Collected], learn_time: f64) -> PreemptRule {
        let d = &self.cfg.distributed;
        let cap = self.cfg.rollout.capacity();
        match d.preemption {
            PreemptionMode::None => PreemptRule::Never,
            PreemptionMode::FixedFraction => {
                PreemptRule::Quorum(((d.fraction * collected.len() as f64).ceil() as usize).max(1))
            }
            PreemptionMode::Optimal => {
                let rates = |c: &Collected| -> Vec<f64> {
                    c.timing
                        .per_env_counts
                        .iter()
                        .map(|&n| {
                            if n > 0 {
                                c.timing.wall_time / n as f64
                            } else {
                                f64::INFINITY
                            }
                        })
                        .collect()
                };
                match d.scope {
                    PreemptionScope::Global => {
                        let mut model = PreemptionEstimator {
                            step_times: Vec::new(),
                            replica_of: Vec::new(),
                            replica_cap: cap,
                            learn_time,
                        };
                        for (r, c) in collected.iter().enumerate() {
                            let taus = rates(c);
                            model.replica_of.extend(std::iter::repeat_n(r, taus.len()));
                            model.step_times.extend(taus);
                        }
                        model
                            .optimal_steps()
                            .map_or(PreemptRule::Never, PreemptRule::GlobalSteps)
                    }
                    PreemptionScope::PerReplica => PreemptRule::PerReplica(
                        collected
                            .iter()
                            .map(|c| {
                                PreemptionEstimator::new(rates(c), cap, learn_time)
                                    .optimal_steps()
                                    .unwrap_or(cap)
                            })
                            .collect(),
                    ),
                }
            }
        }
    }

    fn write_outputs(&mut self, record: &IterationRecord, collected: &[Collected], stats: &[TrainStats]) -> Result<()> {
        let Some(out) = self.outputs.as_mut() else {
            return Ok(());
        };
        out.iterations.write(record)?;
        for (r, (c, s)) in collected.iter().zip(stats).enumerate() {
            out.rollouts.write(&c.timing)?;
            out.updates.write(&UpdateRecord {
                replica: r,
                cumulative_steps: record.cumulative_steps,
                mean_return: c.timing.mean_return,
                stats: s.clone(),
            })?;
        }
        let every = self.cfg.run.checkpoint_every;
        let done = self.learners[0].updates;
        if every > 0 && done % every == 0 {
            self.learners[0]
                .checkpoint()
                .save(&out.dir.join(format!("checkpoint_{done:06}.json")))?;
        }
        Ok(())
    }

    /// Runs every configured update, then writes the final checkpoint.
    pub fn run(&mut self) -> Result<Vec<IterationRecord>> {
        let mut records = Vec::new();
        while self.learners[0].updates < self.cfg.num_updates() {
            let it = self.step()?;
            log::debug!(
                "update {} steps {} sps {:.0} return {:?}",
                it.record.update,
                it.record.cumulative_steps,
                it.record.sps,
                it.record.mean_return
            );
            records.push(it.record);
        }
        self.finish()?;
        Ok(records)
    }

    /// Stops the runtime and flushes outputs.
    pub fn finish(&mut self) -> Result<()> {
        if self.in_flight {
            // drain the overlapped rollout nobody will learn from
            self.cluster.wait_all()?;
            self.in_flight = false;
        }
        self.cluster.shutdown()?;
        if let Some(out) = self.outputs.as_mut() {
            out.iterations.flush()?;
            out.updates.flush()?;
            out.rollouts.flush()?;
            self.learners[0].checkpoint().save(&out.dir.join("checkpoint.json"))?;
        }
        Ok(())
    }
}

/// Flags every step collected with parameters older than `version`.
fn mark_lagged(c: &mut Collected, version: u64) {
    let view = &mut c.view;
    for step in &mut view.steps {
        if step.snapshot_version < version {
            step.stale = true;
        }
    }
    for seq in &mut view.sequences {
        if view.steps[seq.range()].iter().any(|s| s.stale) {
            seq.stale = true;
        }
    }
}

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dump::{DumpEntry, DumpWriter};
use super::{EnvStepRecord, RolloutView, SequenceInfo, StoredStep};
use crate::error::{Error, Result};
use crate::seeding::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// `T x N` steps in total, any split across environments.
    Variable,
    /// Exactly `T` steps from every environment.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AppendOutcome {
    Accepted,
    /// This commit filled the buffer; it is now closed.
    RolloutFull,
    /// Buffer closed: held in the carryover slot for the next rollout.
    Carried,
    /// Fixed mode: the environment already has `T` steps; held until the
    /// next rollout.
    Paused,
}

#[derive(Debug)]
struct Committed {
    step: StoredStep,
    hidden_in: Vec<f64>,
    starts_sequence: bool,
}

#[derive(Debug)]
pub struct RolloutBuffer {
    mode: RolloutMode,
    num_envs: usize,
    steps_per_env: usize,
    capacity: usize,
    committed: Vec<Committed>,
    per_env: Vec<usize>,
    last_done: Vec<Option<bool>>,
    current_sequence: Vec<u64>,
    carryover: Vec<Option<EnvStepRecord>>,
    open: bool,
    preempted: bool,
    next_sequence_id: u64,
    rollout_index: u64,
    previous: Option<RolloutView>,
    dump: Option<DumpWriter>,
}

impl RolloutBuffer {
    pub fn new(mode: RolloutMode, num_envs: usize, steps_per_env: usize) -> Self {
        let capacity = num_envs * steps_per_env;
        RolloutBuffer {
            mode,
            num_envs,
            steps_per_env,
            capacity,
            committed: Vec::with_capacity(capacity),
            per_env: vec![0; num_envs],
            last_done: vec![None; num_envs],
            current_sequence: vec![0; num_envs],
            carryover: vec![None; num_envs],
            open: false,
            preempted: false,
            next_sequence_id: 0,
            rollout_index: 0,
            previous: None,
            dump: None,
        }
    }

    /// Mirrors every begin/append/close into a JSONL trace.
    pub fn set_dump(&mut self, mut writer: DumpWriter) -> Result<()> {
        writer.write(&DumpEntry::Header {
            mode: self.mode,
            num_envs: self.num_envs,
            steps_per_env: self.steps_per_env,
        })?;
        self.dump = Some(writer);
        Ok(())
    }

    pub fn mode(&self) -> RolloutMode {
        self.mode
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_envs(&self) -> usize {
        self.num_envs
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn committed(&self) -> usize {
        self.committed.len()
    }

    pub fn env_count(&self, env: usize) -> usize {
        self.per_env[env]
    }

    pub fn rollout_index(&self) -> u64 {
        self.rollout_index
    }

    pub fn pending_carryovers(&self) -> usize {
        self.carryover.iter().filter(|c| c.is_some()).count()
    }

    pub fn has_carryover(&self, env: usize) -> bool {
        self.carryover[env].is_some()
    }

    /// True when `env` may not receive further actions this rollout.
    pub fn env_paused(&self, env: usize) -> bool {
        !self.open
            || (self.mode == RolloutMode::Fixed && self.per_env[env] >= self.steps_per_env)
    }

    /// Done flag of `env`'s last step committed in the current rollout.
    pub fn last_committed_done(&self, env: usize) -> Option<bool> {
        self.last_done[env]
    }

    pub fn has_previous(&self) -> bool {
        self.previous.is_some()
    }

    /// Opens a new rollout and commits pending carryovers first.
    pub fn begin_rollout(&mut self) -> Result<usize> {
        if self.open {
            return Err(Error::Protocol("begin_rollout on an open buffer".into()));
        }
        self.committed.clear();
        self.per_env.iter_mut().for_each(|c| *c = 0);
        self.last_done.iter_mut().for_each(|d| *d = None);
        self.open = true;
        self.preempted = false;
        if let Some(dump) = &mut self.dump {
            dump.write(&DumpEntry::Begin {
                rollout: self.rollout_index,
            })?;
        }
        let pending: Vec<EnvStepRecord> =
            self.carryover.iter_mut().filter_map(Option::take).collect();
        let n = pending.len();
        for record in pending {
            self.commit(record, true);
        }
        if self.committed.len() >= self.capacity {
            self.open = false;
        }
        Ok(n)
    }

    pub fn append_step(&mut self, record: EnvStepRecord) -> Result<AppendOutcome> {
        let env = record.env_index;
        if env >= self.num_envs {
            return Err(Error::Protocol(format!(
                "env index {env} out of range for {} environments",
                self.num_envs
            )));
        }
        if let Some(dump) = &mut self.dump {
            dump.write(&DumpEntry::Step {
                rollout: self.rollout_index,
                record: record.clone(),
            })?;
        }
        if !self.open || self.env_paused(env) {
            if self.carryover[env].is_some() {
                return Err(Error::Protocol(format!(
                    "environment {env} already has a pending carryover transition"
                )));
            }
            let outcome = if self.open {
                AppendOutcome::Paused
            } else {
                AppendOutcome::Carried
            };
            self.carryover[env] = Some(record);
            return Ok(outcome);
        }
        self.commit(record, false);
        if self.committed.len() == self.capacity {
            self.open = false;
            Ok(AppendOutcome::RolloutFull)
        } else {
            Ok(AppendOutcome::Accepted)
        }
    }

    fn commit(&mut self, record: EnvStepRecord, carryover: bool) {
        let env = record.env_index;
        let starts_sequence = self.last_done[env].is_none_or(|done| done);
        if starts_sequence {
            self.current_sequence[env] = self.next_sequence_id;
            self.next_sequence_id += 1;
        }
        self.last_done[env] = Some(record.done);
        self.per_env[env] += 1;
        let EnvStepRecord {
            env_index,
            episode,
            t,
            observation,
            action,
            log_prob,
            value,
            reward,
            done,
            latency,
            snapshot_version,
            hidden_in,
        } = record;
        self.committed.push(Committed {
            step: StoredStep {
                env_index,
                episode,
                t,
                observation,
                action,
                log_prob,
                value,
                reward,
                done,
                latency,
                snapshot_version,
                sequence_id: self.current_sequence[env],
                stale: false,
                carryover,
            },
            hidden_in,
            starts_sequence,
        });
    }

    /// Closes the rollout early (preemption). Later arrivals are carried over.
    pub fn preempt(&mut self) {
        if self.open {
            self.open = false;
            self.preempted = true;
        }
    }

    /// Builds the closed view. `bootstraps[env]` is the value of the
    /// observation that follows `env`'s last committed step.
    pub fn close_rollout(&mut self, bootstraps: &[Option<f64>]) -> Result<RolloutView> {
        if self.committed.is_empty() {
            return Err(Error::EmptyRollout);
        }
        if self.open {
            return Err(Error::Protocol(
                "close_rollout before the buffer is full or preempted".into(),
            ));
        }
        if bootstraps.len() != self.num_envs {
            return Err(Error::Protocol("one bootstrap slot per environment".into()));
        }
        if let Some(dump) = &mut self.dump {
            dump.write(&DumpEntry::Close {
                rollout: self.rollout_index,
                bootstraps: bootstraps.to_vec(),
            })?;
            dump.flush()?;
        }

        let mut by_env: Vec<Vec<Committed>> = (0..self.num_envs).map(|_| Vec::new()).collect();
        for c in self.committed.drain(..) {
            by_env[c.step.env_index].push(c);
        }
        let mut steps = Vec::with_capacity(self.capacity);
        let mut sequences: Vec<SequenceInfo> = Vec::new();
        for (env, env_steps) in by_env.into_iter().enumerate() {
            let n = env_steps.len();
            for (k, c) in env_steps.into_iter().enumerate() {
                if c.starts_sequence {
                    sequences.push(SequenceInfo {
                        id: c.step.sequence_id,
                        env_index: env,
                        start: steps.len(),
                        len: 0,
                        initial_state: c.hidden_in,
                        bootstrap: None,
                        stale: false,
                    });
                }
                let seq = sequences.last_mut().expect("first step starts a sequence");
                seq.len += 1;
                if k + 1 == n && !c.step.done {
                    seq.bootstrap = bootstraps[env];
                }
                steps.push(c.step);
            }
        }
        let deficit = self.capacity - steps.len();
        let view = RolloutView {
            rollout_index: self.rollout_index,
            capacity: self.capacity,
            steps,
            sequences,
            per_env_counts: self.per_env.clone(),
            deficit,
        };
        self.rollout_index += 1;
        if deficit == 0 {
            self.previous = Some(view.clone());
        }
        Ok(view)
    }

    /// Fills `view.deficit` steps with whole sequences from the previous
    /// rollout (the last one truncated to fit), flagged stale. Without a
    /// previous rollout the view is returned short.
    pub fn backfill_stale(&mut self, mut view: RolloutView, seed: u64) -> Result<RolloutView> {
        let deficit = view.deficit;
        if deficit == 0 {
            return Ok(view);
        }
        let Some(previous) = self.previous.as_ref() else {
            return Ok(view);
        };
        if deficit > previous.len() {
            return Err(Error::BackfillTooLarge {
                deficit,
                available: previous.len(),
            });
        }
        let mut order: Vec<usize> = (0..previous.sequences.len()).collect();
        order.shuffle(&mut stream_rng(Stream::Backfill, &[seed, view.rollout_index]));
        let mut remaining = deficit;
        for idx in order {
            if remaining == 0 {
                break;
            }
            let seq = &previous.sequences[idx];
            let take = seq.len.min(remaining);
            let id = self.next_sequence_id;
            self.next_sequence_id += 1;
            let bootstrap = if take < seq.len {
                Some(previous.steps[seq.start + take].value)
            } else {
                seq.bootstrap
            };
            view.sequences.push(SequenceInfo {
                id,
                env_index: seq.env_index,
                start: view.steps.len(),
                len: take,
                initial_state: seq.initial_state.clone(),
                bootstrap,
                stale: true,
            });
            view.steps.extend(previous.steps[seq.start..seq.start + take].iter().map(|s| {
                let mut s = s.clone();
                s.stale = true;
                s.sequence_id = id;
                s
            }));
            remaining -= take;
        }
        self.previous = Some(view.clone());
        Ok(view)
    }
}

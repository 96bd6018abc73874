use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;

use crate::config::RunConfig;
use crate::envsim::Action;
use crate::error::{Error, Result};
use crate::nn::PolicyParams;
use crate::rollout::{AppendOutcome, DumpWriter};

use super::{core_settings, Arrival, Cluster, Collected, EnvRunner, InferenceCore, PreemptRule, Preemptor, Signal};

#[derive(Debug)]
enum EventKind {
    Arrival {
        replica: usize,
        env: usize,
        arrival: Arrival,
    },
    InferenceDone {
        replica: usize,
        actions: Vec<(usize, Action)>,
    },
    Timer {
        replica: usize,
    },
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap pops the earliest event first
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug)]
struct Replica {
    core: InferenceCore,
    envs: Vec<EnvRunner>,
    busy: bool,
    timer: Option<f64>,
    reported: usize,
    active: bool,
    closed: Option<Collected>,
}

/// Discrete-event driver: every replica has its own inference device whose
/// service time is `base + per_item * batch`, every environment step takes
/// its sampled latency, and nothing depends on host speed or scheduling.
#[derive(Debug)]
pub struct VirtualCluster {
    replicas: Vec<Replica>,
    events: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    service_base: f64,
    service_per_item: f64,
    preemptor: Preemptor,
}

impl VirtualCluster {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut cluster = VirtualCluster {
            replicas: Vec::with_capacity(cfg.run.replicas),
            events: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            service_base: cfg.sim.inference_base_ms / 1e3,
            service_per_item: cfg.sim.inference_per_item_ms / 1e3,
            preemptor: Preemptor::new(PreemptRule::Never),
        };
        for r in 0..cfg.run.replicas {
            let mut core = InferenceCore::new(core_settings(cfg, r), cfg.model.rnn_hidden);
            if cfg.run.dump_rollouts {
                std::fs::create_dir_all(&cfg.run.out_dir).map_err(|e| Error::io(&cfg.run.out_dir, e))?;
                core.set_dump(DumpWriter::create(&cfg.run.out_dir.join(format!("rollouts_r{r}.jsonl")))?)?;
            }
            let mut envs: Vec<EnvRunner> = (0..cfg.rollout.num_envs).map(|i| EnvRunner::new(cfg, r, i)).collect();
            for (env, runner) in envs.iter_mut().enumerate() {
                let arrival = Arrival::Initial(runner.start());
                cluster.push(0.0, EventKind::Arrival { replica: r, env, arrival });
            }
            cluster.replicas.push(Replica {
                core,
                envs,
                busy: false,
                timer: None,
                reported: 0,
                active: false,
                closed: None,
            });
        }
        Ok(cluster)
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn process(&mut self, event: Event) -> Result<()> {
        self.now = event.time;
        let now = self.now;
        let replica = match event.kind {
            EventKind::Arrival { replica, env, arrival } => {
                let outcome = self.replicas[replica].core.on_arrival(env, arrival, now)?;
                if matches!(outcome, Some(AppendOutcome::Accepted | AppendOutcome::RolloutFull)) {
                    self.report(replica);
                }
                replica
            }
            EventKind::InferenceDone { replica, actions } => {
                self.replicas[replica].busy = false;
                for (env, action) in actions {
                    let (arrival, latency) = self.replicas[replica].envs[env].step(&action)?;
                    self.push(now + latency, EventKind::Arrival { replica, env, arrival });
                }
                replica
            }
            EventKind::Timer { replica } => {
                if self.replicas[replica].timer == Some(now) {
                    self.replicas[replica].timer = None;
                }
                replica
            }
        };
        self.try_close(replica)?;
        self.try_dispatch(replica)
    }

    fn report(&mut self, replica: usize) {
        let rep = &mut self.replicas[replica];
        let committed = rep.core.committed();
        let delta = committed.saturating_sub(rep.reported);
        if delta == 0 {
            return;
        }
        rep.reported = committed;
        let full = committed >= rep.core.capacity();
        match self.preemptor.record(replica, delta, committed, full) {
            Signal::Continue => {}
            Signal::Preempt(r) => self.replicas[r].core.preempt(),
            Signal::PreemptAll => self.replicas.iter_mut().for_each(|r| r.core.preempt()),
        }
    }

    fn try_close(&mut self, replica: usize) -> Result<()> {
        // preemption may have closed other replicas too
        let now = self.now;
        for (r, rep) in self.replicas.iter_mut().enumerate() {
            if rep.active && rep.core.ready_to_close() {
                rep.closed = Some(rep.core.close(now)?);
                rep.active = false;
                if r != replica {
                    log::trace!("replica {r} closed by preemption at {now:.4}");
                }
            }
        }
        Ok(())
    }

    fn try_dispatch(&mut self, replica: usize) -> Result<()> {
        let now = self.now;
        let rep = &mut self.replicas[replica];
        if rep.busy {
            return Ok(());
        }
        if let Some(batch) = rep.core.select_batch(now) {
            let actions = rep.core.infer(&batch, now)?;
            rep.busy = true;
            let done = now + self.service_base + self.service_per_item * batch.len() as f64;
            self.push(done, EventKind::InferenceDone { replica, actions });
        } else if let Some(deadline) = rep.core.next_deadline() {
            if rep.timer != Some(deadline) {
                rep.timer = Some(deadline);
                self.push(deadline, EventKind::Timer { replica });
            }
        }
        Ok(())
    }

    fn diagnostics(&self) -> String {
        self.replicas
            .iter()
            .map(|r| r.core.diagnostics())
            .collect::<Vec<_>>()
            .join("; ")
    }
}

impl Cluster for VirtualCluster {
    fn num_replicas(&self) -> usize {
        self.replicas.len()
    }

    fn now(&self) -> f64 {
        self.now
    }

    fn begin_all(&mut self, snapshots: &[Arc<PolicyParams>], version: u64) -> Result<()> {
        if snapshots.len() != self.replicas.len() {
            return Err(Error::Protocol(format!(
                "{} snapshots for {} replicas",
                snapshots.len(),
                self.replicas.len()
            )));
        }
        self.preemptor.reset();
        let now = self.now;
        for (rep, snap) in self.replicas.iter_mut().zip(snapshots) {
            rep.core.begin_rollout(Arc::clone(snap), version, now)?;
            rep.reported = 0;
            rep.active = true;
            rep.closed = None;
        }
        for r in 0..self.replicas.len() {
            self.report(r);
        }
        for r in 0..self.replicas.len() {
            self.try_close(r)?;
            self.try_dispatch(r)?;
        }
        Ok(())
    }

    fn wait_all(&mut self) -> Result<Vec<Collected>> {
        while self.replicas.iter().any(|r| r.active) {
            let event = self.events.pop().ok_or_else(|| Error::Deadlock {
                waited_ms: 0,
                diagnostics: format!("virtual event queue drained: {}", self.diagnostics()),
            })?;
            self.process(event)?;
        }
        self.replicas
            .iter_mut()
            .enumerate()
            .map(|(r, rep)| {
                rep.closed
                    .take()
                    .ok_or_else(|| Error::Protocol(format!("replica {r} has no closed rollout")))
            })
            .collect()
    }

    fn advance(&mut self, seconds: f64) -> Result<()> {
        let until = self.now + seconds.max(0.0);
        while self.events.peek().is_some_and(|e| e.time <= until) {
            let event = self.events.pop().expect("peeked");
            self.process(event)?;
        }
        self.now = until;
        Ok(())
    }

    fn set_preemption(&mut self, rule: PreemptRule) {
        self.preemptor = Preemptor::new(rule);
    }

    fn shutdown(&mut self) -> Result<()> {
        self.events.clear();
        Ok(())
    }
}

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::config::RunConfig;
use crate::envsim::Action;
use crate::error::{Error, Result};
use crate::nn::PolicyParams;
use crate::rollout::{AppendOutcome, DumpWriter};

use super::{
    core_settings, partition_envs, Arrival, Cluster, Collected, EnvRunner, InferenceCore, PreemptRule, Preemptor,
    Signal,
};

enum Msg {
    Arrival {
        env: usize,
        arrival: Arrival,
    },
    Begin {
        snapshot: Arc<PolicyParams>,
        version: u64,
        generation: u64,
        preemptor: Arc<Preemptor>,
    },
    Preempt {
        generation: u64,
    },
    WorkerFailed(String),
    Shutdown,
}

enum WorkerMsg {
    Act { env: usize, action: Action },
    Shutdown,
}

type Report = (usize, Result<Collected>);

/// Real threads on the wall clock: per replica, one inference thread plus
/// environment workers that each own a disjoint set of environments and
/// sleep for the sampled step latency.
///
/// A worker with several environments keeps their steps in flight
/// concurrently (it sleeps until the earliest completion), so the latency
/// model behaves the same whatever `envs_per_worker` is.
pub struct ThreadedCluster {
    origin: Instant,
    inference: Vec<Sender<Msg>>,
    workers: Vec<Sender<WorkerMsg>>,
    results: Receiver<Report>,
    handles: Vec<JoinHandle<()>>,
    preemptor: Arc<Preemptor>,
    generation: u64,
    watchdog: Duration,
    closed: bool,
}

impl ThreadedCluster {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let origin = Instant::now();
        let watchdog = Duration::from_millis(cfg.run.watchdog_ms.max(1));
        let (result_tx, results) = mpsc::channel();
        let replicas = cfg.run.replicas;
        let (inference, inference_rx): (Vec<_>, Vec<_>) = (0..replicas).map(|_| mpsc::channel::<Msg>()).unzip();
        let peers = Arc::new(inference.clone());
        let mut workers = Vec::new();
        let mut handles = Vec::new();

        for (r, rx) in inference_rx.into_iter().enumerate() {
            let mut core = InferenceCore::new(core_settings(cfg, r), cfg.model.rnn_hidden);
            if cfg.run.dump_rollouts {
                std::fs::create_dir_all(&cfg.run.out_dir).map_err(|e| Error::io(&cfg.run.out_dir, e))?;
                core.set_dump(DumpWriter::create(&cfg.run.out_dir.join(format!("rollouts_r{r}.jsonl")))?)?;
            }
            let mut routes = vec![0; cfg.rollout.num_envs];
            let mut senders = Vec::new();
            for (w, envs) in partition_envs(cfg.rollout.num_envs, cfg.rollout.envs_per_worker)
                .into_iter()
                .enumerate()
            {
                let (tx, wrx) = mpsc::channel();
                for &e in &envs {
                    routes[e] = w;
                }
                let runners: Vec<(usize, EnvRunner)> = envs.iter().map(|&e| (e, EnvRunner::new(cfg, r, e))).collect();
                let to_inference = peers[r].clone();
                handles.push(
                    std::thread::Builder::new()
                        .name(format!("env-r{r}-w{w}"))
                        .spawn(move || worker_loop(runners, wrx, to_inference))
                        .map_err(|e| Error::ReplicaAborted(e.to_string()))?,
                );
                senders.push(tx.clone());
                workers.push(tx);
            }
            let ctx = InferenceThread {
                replica: r,
                core,
                rx,
                peers: Arc::clone(&peers),
                workers: senders,
                routes,
                out: result_tx.clone(),
                origin,
                watchdog,
                generation: 0,
                preemptor: Arc::new(Preemptor::new(PreemptRule::Never)),
                reported: 0,
            };
            handles.push(
                std::thread::Builder::new()
                    .name(format!("inference-r{r}"))
                    .spawn(move || ctx.run())
                    .map_err(|e| Error::ReplicaAborted(e.to_string()))?,
            );
        }
        Ok(ThreadedCluster {
            origin,
            inference,
            workers,
            results,
            handles,
            preemptor: Arc::new(Preemptor::new(PreemptRule::Never)),
            generation: 0,
            watchdog,
            closed: false,
        })
    }
}

impl Cluster for ThreadedCluster {
    fn num_replicas(&self) -> usize {
        self.inference.len()
    }

    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    fn begin_all(&mut self, snapshots: &[Arc<PolicyParams>], version: u64) -> Result<()> {
        if snapshots.len() != self.inference.len() {
            return Err(Error::Protocol(format!(
                "{} snapshots for {} replicas",
                snapshots.len(),
                self.inference.len()
            )));
        }
        self.generation += 1;
        self.preemptor.reset();
        for (tx, snap) in self.inference.iter().zip(snapshots) {
            tx.send(Msg::Begin {
                snapshot: Arc::clone(snap),
                version,
                generation: self.generation,
                preemptor: Arc::clone(&self.preemptor),
            })
            .map_err(|_| Error::ChannelClosed)?;
        }
        Ok(())
    }

    fn wait_all(&mut self) -> Result<Vec<Collected>> {
        let mut slots: Vec<Option<Collected>> = (0..self.inference.len()).map(|_| None).collect();
        let mut remaining = slots.len();
        while remaining > 0 {
            // inference threads run their own watchdog; this one only
            // catches a thread that died without reporting
            let (r, res) = self.results.recv_timeout(self.watchdog * 2).map_err(|e| match e {
                RecvTimeoutError::Timeout => Error::Deadlock {
                    waited_ms: (self.watchdog * 2).as_millis(),
                    diagnostics: format!("{remaining} replica(s) never reported"),
                },
                RecvTimeoutError::Disconnected => Error::ChannelClosed,
            })?;
            slots[r] = Some(res?);
            remaining -= 1;
        }
        Ok(slots.into_iter().map(|s| s.expect("all replicas reported")).collect())
    }

    fn advance(&mut self, _seconds: f64) -> Result<()> {
        Ok(())
    }

    fn set_preemption(&mut self, rule: PreemptRule) {
        self.preemptor = Arc::new(Preemptor::new(rule));
    }

    fn shutdown(&mut self) -> Result<()> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        for tx in &self.workers {
            let _ = tx.send(WorkerMsg::Shutdown);
        }
        for tx in &self.inference {
            let _ = tx.send(Msg::Shutdown);
        }
        let mut panicked = false;
        for h in self.handles.drain(..) {
            panicked |= h.join().is_err();
        }
        if panicked {
            return Err(Error::ReplicaAborted("a runtime thread panicked".into()));
        }
        Ok(())
    }
}

impl Drop for ThreadedCluster {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

fn worker_loop(mut envs: Vec<(usize, EnvRunner)>, rx: Receiver<WorkerMsg>, tx: Sender<Msg>) {
    for (env, runner) in envs.iter_mut() {
        let arrival = Arrival::Initial(runner.start());
        if tx.send(Msg::Arrival { env: *env, arrival }).is_err() {
            return;
        }
    }
    let mut inflight: Vec<(Instant, usize, Arrival)> = Vec::new();
    loop {
        let now = Instant::now();
        // report completed steps in completion order
        inflight.sort_by_key(|(due, _, _)| std::cmp::Reverse(*due));
        while inflight.last().is_some_and(|(due, _, _)| *due <= now) {
            let (_, env, arrival) = inflight.pop().expect("checked");
            if tx.send(Msg::Arrival { env, arrival }).is_err() {
                return;
            }
        }
        let msg = match inflight.last() {
            Some((due, _, _)) => match rx.recv_timeout(due.saturating_duration_since(now)) {
                Ok(m) => m,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => return,
            },
            None => match rx.recv() {
                Ok(m) => m,
                Err(_) => return,
            },
        };
        match msg {
            WorkerMsg::Act { env, action } => {
                let Some((_, runner)) = envs.iter_mut().find(|(e, _)| *e == env) else {
                    let _ = tx.send(Msg::WorkerFailed(format!("env {env} is not owned by this worker")));
                    return;
                };
                let started = Instant::now();
                match runner.step(&action) {
                    Ok((arrival, latency)) => {
                        inflight.push((started + Duration::from_secs_f64(latency.max(0.0)), env, arrival));
                    }
                    Err(e) => {
                        let _ = tx.send(Msg::WorkerFailed(format!("env {env}: {e}")));
                        return;
                    }
                }
            }
            // in-flight steps are dropped: nothing further is reported
            WorkerMsg::Shutdown => return,
        }
    }
}

struct InferenceThread {
    replica: usize,
    core: InferenceCore,
    rx: Receiver<Msg>,
    peers: Arc<Vec<Sender<Msg>>>,
    workers: Vec<Sender<WorkerMsg>>,
    /// Worker index owning each environment.
    routes: Vec<usize>,
    out: Sender<Report>,
    origin: Instant,
    watchdog: Duration,
    generation: u64,
    preemptor: Arc<Preemptor>,
    reported: usize,
}

enum Flow {
    Continue,
    Stop,
}

impl InferenceThread {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    fn run(mut self) {
        let mut last_progress = Instant::now();
        loop {
            let timeout = if self.core.is_collecting() {
                let watchdog_left = self.watchdog.saturating_sub(last_progress.elapsed());
                match self.core.next_deadline() {
                    Some(d) => Duration::from_secs_f64((d - self.now()).max(0.0)).min(watchdog_left),
                    None => watchdog_left,
                }
            } else {
                Duration::from_secs(3600)
            };
            let first = match self.rx.recv_timeout(timeout) {
                Ok(m) => Some(m),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => return,
            };
            let mut msgs: Vec<Msg> = first.into_iter().collect();
            msgs.extend(self.rx.try_iter());
            if !msgs.is_empty() {
                last_progress = Instant::now();
            }
            for msg in msgs {
                match self.handle(msg) {
                    Ok(Flow::Continue) => {}
                    Ok(Flow::Stop) => return,
                    Err(e) => {
                        let _ = self.out.send((self.replica, Err(e)));
                        return;
                    }
                }
            }
            if let Err(e) = self.serve() {
                let _ = self.out.send((self.replica, Err(e)));
                return;
            }
            if self.core.is_collecting() && last_progress.elapsed() >= self.watchdog {
                let _ = self.out.send((
                    self.replica,
                    Err(Error::Deadlock {
                        waited_ms: last_progress.elapsed().as_millis(),
                        diagnostics: self.core.diagnostics(),
                    }),
                ));
                return;
            }
        }
    }

    fn handle(&mut self, msg: Msg) -> Result<Flow> {
        match msg {
            Msg::Arrival { env, arrival } => {
                let now = self.now();
                let outcome = self.core.on_arrival(env, arrival, now)?;
                if matches!(outcome, Some(AppendOutcome::Accepted | AppendOutcome::RolloutFull)) {
                    self.report();
                }
            }
            Msg::Begin {
                snapshot,
                version,
                generation,
                preemptor,
            } => {
                let now = self.now();
                self.core.begin_rollout(snapshot, version, now)?;
                self.generation = generation;
                self.preemptor = preemptor;
                self.reported = 0;
                self.report();
            }
            Msg::Preempt { generation } => {
                if generation == self.generation {
                    self.core.preempt();
                }
            }
            Msg::WorkerFailed(reason) => return Err(Error::ReplicaAborted(reason)),
            Msg::Shutdown => return Ok(Flow::Stop),
        }
        Ok(Flow::Continue)
    }

    fn report(&mut self) {
        let committed = self.core.committed();
        let delta = committed.saturating_sub(self.reported);
        if delta == 0 {
            return;
        }
        self.reported = committed;
        let full = committed >= self.core.capacity();
        match self.preemptor.record(self.replica, delta, committed, full) {
            Signal::Continue => {}
            Signal::Preempt(_) => self.core.preempt(),
            Signal::PreemptAll => {
                self.core.preempt();
                for (r, peer) in self.peers.iter().enumerate() {
                    if r != self.replica {
                        let _ = peer.send(Msg::Preempt {
                            generation: self.generation,
                        });
                    }
                }
            }
        }
    }

    fn serve(&mut self) -> Result<()> {
        if self.core.ready_to_close() {
            let collected = self.core.close(self.now())?;
            self.out
                .send((self.replica, Ok(collected)))
                .map_err(|_| Error::ChannelClosed)?;
        }
        while let Some(batch) = self.core.select_batch(self.now()) {
            let actions = self.core.infer(&batch, self.now())?;
            for (env, action) in actions {
                self.workers[self.routes[env]]
                    .send(WorkerMsg::Act { env, action })
                    .map_err(|_| Error::ChannelClosed)?;
            }
        }
        Ok(())
    }
}

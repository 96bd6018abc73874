//! Run configuration, read from TOML.
//!
//! ```toml
//! [run]
//! regime = "ver"            # sync | nover | ver (required)
//! seed = 0
//! total_steps = 2000000
//! clock = "virtual"         # virtual | real
//!
//! [task]
//! kind = "delayed_cue"      # delayed_cue | reach2d | latency_only (required)
//! horizon = 8
//! ```
//!
//! Every other table is optional and falls back to the defaults below.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envsim::{LatencyModel, TaskSpec};
use crate::error::{Error, Result};
use crate::learner::{EntropyConfig, PpoConfig};
use crate::nn::PolicySpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Lock-step: inference waits for all environments, each contributes `T`.
    Sync,
    /// Dynamic batching, each environment contributes exactly `T`.
    NoVer,
    /// Dynamic batching, `T x N` steps in total from any environments.
    Ver,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Sync, Regime::NoVer, Regime::Ver];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Sync => "sync",
            Regime::NoVer => "nover",
            Regime::Ver => "ver",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sync" => Ok(Regime::Sync),
            "nover" | "no_ver" | "no-ver" => Ok(Regime::NoVer),
            "ver" => Ok(Regime::Ver),
            other => Err(Error::Config(vec![format!(
                "unknown regime `{other}` (expected sync, nover or ver)"
            )])),
        }
    }

    pub fn variable_rollouts(self) -> bool {
        self == Regime::Ver
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    /// Discrete-event simulation; latencies advance a virtual clock.
    #[default]
    Virtual,
    /// Worker threads sleep for every sampled latency.
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub regime: Regime,
    #[serde(default)]
    pub overlap: bool,
    #[serde(default)]
    pub seed: u64,
    /// Environment steps over all replicas; sets the learning-rate horizon.
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    /// Stop after this many updates (defaults to the `total_steps` horizon).
    #[serde(default)]
    pub max_updates: Option<u64>,
    #[serde(default)]
    pub clock: Clock,
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Write a checkpoint every this many updates; 0 writes only the last.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Mirror every rollout into a JSONL trace for `replay`.
    #[serde(default)]
    pub dump_rollouts: bool,
    /// Abort collection after this long without progress.
    #[serde(default = "default_watchdog_ms")]
    pub watchdog_ms: u64,
}

fn default_total_steps() -> u64 {
    2_000_000
}
fn one() -> usize {
    1
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_watchdog_ms() -> u64 {
    30_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    /// `N`
    pub num_envs: usize,
    /// `T`
    pub steps_per_env: usize,
    pub envs_per_worker: usize,
    /// Static latency multiplier per environment, cycled over envs.
    pub env_slowdown: Vec<f64>,
}

impl Default for RolloutSection {
    fn default() -> Self {
        RolloutSection {
            num_envs: 16,
            steps_per_env: 128,
            envs_per_worker: 1,
            env_slowdown: Vec::new(),
        }
    }
}

impl RolloutSection {
    pub fn capacity(&self) -> usize {
        self.num_envs * self.steps_per_env
    }

    pub fn slowdown(&self, env: usize) -> f64 {
        if self.env_slowdown.is_empty() {
            1.0
        } else {
            self.env_slowdown[env % self.env_slowdown.len()]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchingSection {
    pub min_requests: usize,
    /// Defaults to `N`.
    pub max_requests: Option<usize>,
    pub max_wait_ms: f64,
}

impl Default for BatchingSection {
    fn default() -> Self {
        BatchingSection {
            min_requests: 1,
            max_requests: None,
            max_wait_ms: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder_hidden: usize,
    pub rnn_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            encoder_hidden: 64,
            rnn_hidden: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreemptionMode {
    #[default]
    None,
    /// Stop at the step count maximising `S / (Time(S) + LT)`.
    Optimal,
    /// Stop once `ceil(fraction * R)` replicas have filled their rollout.
    FixedFraction,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreemptionScope {
    /// One step count shared by all replicas, `S <= T x N x R`.
    #[default]
    Global,
    /// Each replica preempts itself, `S <= T x N`.
    PerReplica,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistributedSection {
    pub preemption: PreemptionMode,
    pub fraction: f64,
    pub scope: PreemptionScope,
    /// Latency multiplier per replica, cycled.
    pub replica_slowdown: Vec<f64>,
}

impl Default for DistributedSection {
    fn default() -> Self {
        DistributedSection {
            preemption: PreemptionMode::None,
            fraction: 0.6,
            scope: PreemptionScope::Global,
            replica_slowdown: Vec::new(),
        }
    }
}

impl DistributedSection {
    pub fn slowdown(&self, replica: usize) -> f64 {
        if self.replica_slowdown.is_empty() {
            1.0
        } else {
            self.replica_slowdown[replica % self.replica_slowdown.len()]
        }
    }
}

/// Service-time model of the virtual clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub inference_base_ms: f64,
    pub inference_per_item_ms: f64,
    /// Virtual time charged for one learner update.
    pub learn_time_ms: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            inference_base_ms: 0.3,
            inference_per_item_ms: 0.02,
            learn_time_ms: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub task: TaskSpec,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub batching: BatchingSection,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub entropy: EntropyConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub distributed: DistributedSection,
    #[serde(default)]
    pub sim: SimSection,
}

/// Effective batching limits after applying regime rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchingPolicy {
    pub min_requests: usize,
    pub max_requests: usize,
    /// Seconds.
    pub max_wait: f64,
}

impl RunConfig {
    /// Defaults for `regime` on `task`; the starting point for programmatic
    /// configs.
    pub fn new(regime: Regime, task: TaskSpec) -> Self {
        RunConfig {
            run: RunSection {
                regime,
                overlap: false,
                seed: 0,
                total_steps: default_total_steps(),
                max_updates: None,
                clock: Clock::Virtual,
                replicas: 1,
                out_dir: default_out_dir(),
                checkpoint_every: 0,
                dump_rollouts: false,
                watchdog_ms: default_watchdog_ms(),
            },
            task,
            latency: LatencyModel::default(),
            rollout: RolloutSection::default(),
            batching: BatchingSection::default(),
            ppo: PpoConfig::default(),
            entropy: EntropyConfig::default(),
            model: ModelSection::default(),
            distributed: DistributedSection::default(),
            sim: SimSection::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(mut v) => {
                v.insert(0, format!("in {}", path.display()));
                Error::Config(v)
            }
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Collects every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let r = &self.rollout;
        if r.num_envs == 0 {
            errors.push("rollout.num_envs must be at least 1".into());
        }
        if r.steps_per_env == 0 {
            errors.push("rollout.steps_per_env must be at least 1".into());
        }
        if r.envs_per_worker == 0 {
            errors.push("rollout.envs_per_worker must be at least 1".into());
        }
        if r.env_slowdown.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            errors.push("rollout.env_slowdown entries must be positive".into());
        }
        if self.ppo.minibatches > 0 && r.capacity() % self.ppo.minibatches != 0 {
            errors.push(format!(
                "ppo.minibatches ({}) must divide T x N ({})",
                self.ppo.minibatches,
                r.capacity()
            ));
        }
        let b = &self.batching;
        let max = b.max_requests.unwrap_or(r.num_envs);
        if b.min_requests == 0 || b.min_requests > max || max > r.num_envs.max(1) {
            errors.push(format!(
                "batching requires 1 <= min_requests ({}) <= max_requests ({max}) <= num_envs ({})",
                b.min_requests, r.num_envs
            ));
        }
        if !(b.max_wait_ms >= 0.0 && b.max_wait_ms.is_finite()) {
            errors.push("batching.max_wait_ms must be >= 0".into());
        }
        for (name, v) in [
            ("model.encoder_hidden", self.model.encoder_hidden),
            ("model.rnn_hidden", self.model.rnn_hidden),
        ] {
            if v == 0 {
                errors.push(format!("{name} must be at least 1"));
            }
        }
        if self.run.replicas == 0 {
            errors.push("run.replicas must be at least 1".into());
        }
        if self.run.total_steps == 0 {
            errors.push("run.total_steps must be positive".into());
        }
        if self.run.watchdog_ms == 0 {
            errors.push("run.watchdog_ms must be positive".into());
        }
        let d = &self.distributed;
        if !(d.fraction > 0.0 && d.fraction <= 1.0) {
            errors.push(format!("distributed.fraction must be in (0, 1], got {}", d.fraction));
        }
        if d.replica_slowdown.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            errors.push("distributed.replica_slowdown entries must be positive".into());
        }
        if d.preemption != PreemptionMode::None && !self.run.regime.variable_rollouts() {
            errors.push("preemption requires the ver regime (fixed-length rollouts cannot close early)".into());
        }
        let s = &self.sim;
        for (name, v) in [
            ("sim.inference_base_ms", s.inference_base_ms),
            ("sim.inference_per_item_ms", s.inference_per_item_ms),
            ("sim.learn_time_ms", s.learn_time_ms),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errors.push(format!("{name} must be >= 0"));
            }
        }
        self.task.validate(&mut errors);
        self.latency.validate(&mut errors);
        self.ppo.validate(&mut errors);
        self.entropy.validate(&mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn batching_policy(&self) -> BatchingPolicy {
        let n = self.rollout.num_envs;
        match self.run.regime {
            Regime::Sync => BatchingPolicy {
                min_requests: n,
                max_requests: n,
                max_wait: f64::INFINITY,
            },
            _ => BatchingPolicy {
                min_requests: self.batching.min_requests,
                max_requests: self.batching.max_requests.unwrap_or(n),
                max_wait: self.batching.max_wait_ms / 1e3,
            },
        }
    }

    pub fn policy_spec(&self) -> PolicySpec {
        PolicySpec {
            obs_dim: self.task.obs_dim(),
            action_space: self.task.action_space(),
            encoder_hidden: self.model.encoder_hidden,
            rnn_hidden: self.model.rnn_hidden,
        }
    }

    /// Steps consumed by one update across all replicas.
    pub fn steps_per_update(&self) -> u64 {
        (self.rollout.capacity() * self.run.replicas) as u64
    }

    /// Learning-rate horizon in updates.
    pub fn total_updates(&self) -> u64 {
        self.run.total_steps.div_ceil(self.steps_per_update()).max(1)
    }

    /// Updates actually run.
    pub fn num_updates(&self) -> u64 {
        self.run.max_updates.unwrap_or_else(|| self.total_updates())
    }
}

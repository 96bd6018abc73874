//! Environments with controllable simulation-time heterogeneity.
//!
//! Every environment is single-threaded and owned by exactly one worker. The
//! simulated time an environment step takes is sampled from a
//! [`LatencyModel`]; the runtime either sleeps for it or advances a virtual
//! clock.

mod latency;
mod tasks;

pub use latency::LatencyModel;
pub use tasks::{optimal_return, TaskSpec, REACH_ORACLE_EPISODES};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat real-valued observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    /// Width of the action head output (logits or means).
    pub fn head_width(&self) -> usize {
        match *self {
            ActionSpace::Discrete(n) | ActionSpace::Continuous(n) => n,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, ActionSpace::Continuous(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    /// Simulated seconds this step took.
    pub latency: f64,
}

#[derive(Clone, Debug)]
enum TaskState {
    DelayedCue { cue: f64 },
    Reach { pos: [f64; 2], goal: [f64; 2] },
    LatencyOnly,
}

/// One environment instance: a task, its latency model and the current
/// episode's random stream.
#[derive(Debug)]
pub struct Env {
    task: TaskSpec,
    latency: LatencyModel,
    slowdown: f64,
    rng: Option<ChaCha8Rng>,
    state: Option<TaskState>,
    episode_scale: f64,
    t: usize,
    done: bool,
}

impl Env {
    /// `slowdown` is a static per-instance latency multiplier (two-speed
    /// setups, a deliberately slow replica).
    pub fn new(task: TaskSpec, latency: LatencyModel, slowdown: f64) -> Self {
        Env {
            task,
            latency,
            slowdown,
            rng: None,
            state: None,
            episode_scale: 1.0,
            t: 0,
            done: false,
        }
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn obs_dim(&self) -> usize {
        self.task.obs_dim()
    }

    pub fn action_space(&self) -> ActionSpace {
        self.task.action_space()
    }

    /// Step index within the current episode.
    pub fn episode_step(&self) -> usize {
        self.t
    }

    /// Latency multiplier drawn for the current episode.
    pub fn episode_scale(&self) -> f64 {
        self.episode_scale
    }

    /// Starts a new episode whose randomness is drawn from `seed`.
    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let state = self.task.initial_state(&mut rng);
        self.episode_scale = self.latency.sample_episode_scale(&mut rng);
        self.rng = Some(rng);
        self.state = Some(state);
        self.t = 0;
        self.done = false;
        self.observe()
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::EnvUsage("step called on a finished episode".into()));
        }
        let (Some(state), Some(rng)) = (self.state.as_mut(), self.rng.as_mut()) else {
            return Err(Error::EnvUsage("step called before reset".into()));
        };
        let (reward, done) = self.task.transition(state, self.t, action)?;
        let latency = self.latency.sample_step(
            rng,
            self.episode_scale * self.slowdown,
            action,
        );
        self.t += 1;
        self.done = done;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done,
            latency,
        })
    }

    fn observe(&self) -> Observation {
        let state = self.state.as_ref().expect("observe before reset");
        self.task.observe(state, self.t)
    }
}

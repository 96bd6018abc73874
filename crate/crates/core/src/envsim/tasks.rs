use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Action, ActionSpace, Env, LatencyModel, Observation, TaskState};
use crate::error::{Error, Result};
use crate::seeding::episode_seed;

/// Number of start states averaged by the Reach2D optimal-return oracle.
pub const REACH_ORACLE_EPISODES: u64 = 256;

/// Built-in tasks. All parameters come from the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// A cue in {-1, +1} is visible only at t = 0; the action taken at
    /// t = horizon - 1 must match it. Needs memory.
    DelayedCue {
        #[serde(default = "default_horizon")]
        horizon: usize,
    },
    /// Point mass on [-1, 1]^2 moving toward a goal with norm-clipped
    /// continuous actions.
    Reach2d {
        #[serde(default = "default_max_steps")]
        max_steps: usize,
        #[serde(default = "default_step_size")]
        step_size: f64,
        #[serde(default = "default_goal_radius")]
        goal_radius: f64,
        #[serde(default = "default_step_penalty")]
        step_penalty: f64,
    },
    /// No reward, fixed-length episodes. For throughput measurements.
    LatencyOnly {
        #[serde(default = "default_obs_dim")]
        obs_dim: usize,
        #[serde(default = "default_episode_length")]
        episode_length: usize,
        #[serde(default = "default_num_actions")]
        num_actions: usize,
    },
}

fn default_horizon() -> usize {
    8
}
fn default_max_steps() -> usize {
    32
}
fn default_step_size() -> f64 {
    0.1
}
fn default_goal_radius() -> f64 {
    0.05
}
fn default_step_penalty() -> f64 {
    0.01
}
fn default_obs_dim() -> usize {
    4
}
fn default_episode_length() -> usize {
    32
}
fn default_num_actions() -> usize {
    2
}

impl TaskSpec {
    pub fn delayed_cue(horizon: usize) -> Self {
        TaskSpec::DelayedCue { horizon }
    }

    pub fn reach2d() -> Self {
        TaskSpec::Reach2d {
            max_steps: default_max_steps(),
            step_size: default_step_size(),
            goal_radius: default_goal_radius(),
            step_penalty: default_step_penalty(),
        }
    }

    pub fn latency_only(episode_length: usize) -> Self {
        TaskSpec::LatencyOnly {
            obs_dim: default_obs_dim(),
            episode_length,
            num_actions: default_num_actions(),
        }
    }

    /// Parses a task id (`delayed_cue`, `reach2d`, `latency_only`, or the
    /// CamelCase names) into a task with default parameters.
    pub fn from_id(id: &str) -> Result<Self> {
        match id.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "delayedcue" => Ok(TaskSpec::delayed_cue(default_horizon())),
            "reach2d" => Ok(TaskSpec::reach2d()),
            "latencyonly" => Ok(TaskSpec::latency_only(default_episode_length())),
            _ => Err(Error::UnknownTask(id.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            TaskSpec::DelayedCue { .. } => "delayed_cue",
            TaskSpec::Reach2d { .. } => "reach2d",
            TaskSpec::LatencyOnly { .. } => "latency_only",
        }
    }

    pub fn obs_dim(&self) -> usize {
        match *self {
            TaskSpec::DelayedCue { .. } => 2,
            TaskSpec::Reach2d { .. } => 4,
            TaskSpec::LatencyOnly { obs_dim, .. } => obs_dim,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match *self {
            TaskSpec::DelayedCue { .. } => ActionSpace::Discrete(2),
            TaskSpec::Reach2d { .. } => ActionSpace::Continuous(2),
            TaskSpec::LatencyOnly { num_actions, .. } => ActionSpace::Discrete(num_actions),
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        match *self {
            TaskSpec::DelayedCue { horizon } => {
                if horizon == 0 {
                    errors.push("task.horizon must be >= 1".into());
                }
            }
            TaskSpec::Reach2d {
                max_steps,
                step_size,
                goal_radius,
                step_penalty,
            } => {
                if max_steps == 0 {
                    errors.push("task.max_steps must be >= 1".into());
                }
                if !(step_size > 0.0) {
                    errors.push("task.step_size must be > 0".into());
                }
                if !(goal_radius >= 0.0) {
                    errors.push("task.goal_radius must be >= 0".into());
                }
                if !step_penalty.is_finite() {
                    errors.push("task.step_penalty must be finite".into());
                }
            }
            TaskSpec::LatencyOnly {
                obs_dim,
                episode_length,
                num_actions,
            } => {
                if obs_dim == 0 || episode_length == 0 || num_actions == 0 {
                    errors.push(
                        "task.obs_dim, task.episode_length and task.num_actions must be >= 1"
                            .into(),
                    );
                }
            }
        }
    }

    pub(super) fn initial_state(&self, rng: &mut impl Rng) -> TaskState {
        match self {
            TaskSpec::DelayedCue { .. } => TaskState::DelayedCue {
                cue: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            },
            TaskSpec::Reach2d { .. } => {
                let mut point = || [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
                TaskState::Reach {
                    pos: point(),
                    goal: point(),
                }
            }
            TaskSpec::LatencyOnly { .. } => TaskState::LatencyOnly,
        }
    }

    pub(super) fn observe(&self, state: &TaskState, t: usize) -> Observation {
        match (self, state) {
            (TaskSpec::DelayedCue { horizon }, TaskState::DelayedCue { cue }) => {
                let cue_slot = if t == 0 { *cue } else { 0.0 };
                let progress = t as f64 / (horizon.saturating_sub(1)).max(1) as f64;
                Observation(vec![cue_slot, progress])
            }
            (TaskSpec::Reach2d { .. }, TaskState::Reach { pos, goal }) => {
                Observation(vec![pos[0], pos[1], goal[0], goal[1]])
            }
            (
                TaskSpec::LatencyOnly {
                    obs_dim,
                    episode_length,
                    ..
                },
                TaskState::LatencyOnly,
            ) => {
                let mut features = vec![0.0; *obs_dim];
                features[0] = t as f64 / *episode_length as f64;
                Observation(features)
            }
            _ => unreachable!("task/state mismatch"),
        }
    }

    /// Applies `action` at episode step `t`; returns `(reward, done)`.
    pub(super) fn transition(
        &self,
        state: &mut TaskState,
        t: usize,
        action: &Action,
    ) -> Result<(f64, bool)> {
        match (self, state, action) {
            (TaskSpec::DelayedCue { horizon }, TaskState::DelayedCue { cue }, Action::Discrete(a)) => {
                if *a >= 2 {
                    return Err(Error::EnvUsage(format!("action {a} out of range [0, 2)")));
                }
                if t + 1 == *horizon {
                    let chosen = if *a == 1 { 1.0 } else { -1.0 };
                    Ok((if chosen == *cue { 1.0 } else { 0.0 }, true))
                } else {
                    Ok((0.0, false))
                }
            }
            (
                TaskSpec::Reach2d {
                    max_steps,
                    step_size,
                    goal_radius,
                    step_penalty,
                },
                TaskState::Reach { pos, goal },
                Action::Continuous(a),
            ) => {
                if a.len() != 2 || a.iter().any(|x| !x.is_finite()) {
                    return Err(Error::EnvUsage(format!("invalid Reach2D action {a:?}")));
                }
                let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
                let scale = if norm > *step_size { step_size / norm } else { 1.0 };
                for d in 0..2 {
                    pos[d] = (pos[d] + a[d] * scale).clamp(-1.0, 1.0);
                }
                let dist = ((pos[0] - goal[0]).powi(2) + (pos[1] - goal[1]).powi(2)).sqrt();
                if dist <= *goal_radius {
                    Ok((1.0, true))
                } else {
                    Ok((-step_penalty, t + 1 >= *max_steps))
                }
            }
            (
                TaskSpec::LatencyOnly {
                    episode_length,
                    num_actions,
                    ..
                },
                TaskState::LatencyOnly,
                Action::Discrete(a),
            ) => {
                if a >= num_actions {
                    return Err(Error::EnvUsage(format!(
                        "action {a} out of range [0, {num_actions})"
                    )));
                }
                Ok((0.0, t + 1 >= *episode_length))
            }
            (task, _, action) => Err(Error::EnvUsage(format!(
                "action {action:?} does not fit task {}",
                task.id()
            ))),
        }
    }
}

/// Expected return of the optimal policy, the yardstick for learning curves.
///
/// DelayedCue: 1.0 (recall the cue). LatencyOnly: 0.0. Reach2D: the mean,
/// over [`REACH_ORACLE_EPISODES`] start states, of `gamma^ceil(d / step_size)`
/// with `d` the initial agent-goal distance.
pub fn optimal_return(task: &TaskSpec, gamma: f64) -> f64 {
    match *task {
        TaskSpec::DelayedCue { .. } => 1.0,
        TaskSpec::LatencyOnly { .. } => 0.0,
        TaskSpec::Reach2d { step_size, .. } => {
            let mut env = Env::new(task.clone(), LatencyModel::default(), 1.0);
            let total: f64 = (0..REACH_ORACLE_EPISODES)
                .map(|k| {
                    let obs = env.reset(episode_seed(0, 0, k));
                    let o = obs.as_slice();
                    let dist = ((o[0] - o[2]).powi(2) + (o[1] - o[3]).powi(2)).sqrt();
                    gamma.powf((dist / step_size).ceil())
                })
                .sum();
            total / REACH_ORACLE_EPISODES as f64
        }
    }
}

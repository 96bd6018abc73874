use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::Action;

/// Per-step simulated latency:
/// `base * slowdown * episode_scale * jitter * per_action[a]`, with
/// `episode_scale ~ LogNormal(0, episode_sigma)` drawn once per episode and
/// `jitter ~ LogNormal(0, jitter_sigma)` drawn every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModel {
    /// Seconds.
    pub base: f64,
    pub jitter_sigma: f64,
    pub episode_sigma: f64,
    /// Multiplier indexed by discrete action (cycled); empty means 1.
    pub per_action: Vec<f64>,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            base: 0.002,
            jitter_sigma: 0.0,
            episode_sigma: 0.0,
            per_action: Vec::new(),
        }
    }
}

impl LatencyModel {
    pub fn constant(base: f64) -> Self {
        LatencyModel {
            base,
            ..Default::default()
        }
    }

    /// The canonical heterogeneous benchmark setting.
    pub fn heterogeneous() -> Self {
        LatencyModel {
            base: 0.002,
            jitter_sigma: 0.5,
            episode_sigma: 0.75,
            per_action: Vec::new(),
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.base > 0.0 && self.base.is_finite()) {
            errors.push(format!("latency.base must be > 0 (got {})", self.base));
        }
        for (name, s) in [
            ("latency.jitter_sigma", self.jitter_sigma),
            ("latency.episode_sigma", self.episode_sigma),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                errors.push(format!("{name} must be finite and >= 0 (got {s})"));
            }
        }
        if self.per_action.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            errors.push("latency.per_action entries must be > 0".into());
        }
    }

    pub(crate) fn sample_episode_scale(&self, rng: &mut impl Rng) -> f64 {
        lognormal(self.episode_sigma, rng)
    }

    pub(crate) fn sample_step(&self, rng: &mut impl Rng, scale: f64, action: &Action) -> f64 {
        let jitter = lognormal(self.jitter_sigma, rng);
        let per_action = match action {
            Action::Discrete(a) if !self.per_action.is_empty() => {
                self.per_action[a % self.per_action.len()]
            }
            _ => 1.0,
        };
        self.base * scale * jitter * per_action
    }
}

fn lognormal(sigma: f64, rng: &mut impl Rng) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    LogNormal::new(0.0, sigma)
        .expect("sigma validated")
        .sample(rng)
}

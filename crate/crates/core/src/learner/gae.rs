use crate::error::{Error, Result};
use crate::rollout::RolloutView;

/// Per-step advantages and return targets, indexed like `view.steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageTable {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// GAE over one sequence. `bootstrap` is the value after the last step and
/// is ignored when that step is terminal.
pub fn gae_sequence(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    adv
}

/// GAE for every sequence of `view`, using the values stored at collection.
pub fn compute_gae(view: &RolloutView, gamma: f64, lambda: f64) -> Result<AdvantageTable> {
    let mut advantages = vec![0.0; view.len()];
    let mut returns = vec![0.0; view.len()];
    for seq in &view.sequences {
        let steps = &view.steps[seq.range()];
        let last = steps.last().ok_or(Error::EmptyRollout)?;
        let bootstrap = if last.done {
            0.0
        } else {
            seq.bootstrap.ok_or(Error::MissingBootstrap(seq.id as usize))?
        };
        let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
        let values: Vec<f64> = steps.iter().map(|s| s.value).collect();
        let dones: Vec<bool> = steps.iter().map(|s| s.done).collect();
        let adv = gae_sequence(&rewards, &values, &dones, bootstrap, gamma, lambda);
        for (k, a) in adv.into_iter().enumerate() {
            advantages[seq.start + k] = a;
            returns[seq.start + k] = a + values[k];
        }
    }
    if advantages.iter().chain(&returns).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("advantages"));
    }
    Ok(AdvantageTable {
        advantages,
        returns,
    })
}

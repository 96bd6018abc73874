//! PPO over packed recurrent mini-batches.
//!
//! One [`Learner::update`] computes GAE per sequence from the values stored
//! at collection, then for every epoch re-splits the rollout into equal-size
//! mini-batches and takes one Adam step per mini-batch. Tails of sequences
//! split across a mini-batch boundary get their initial recurrent state by a
//! gradient-free pass of the current policy over the head.

mod entropy;
mod gae;
mod loss;

pub use entropy::EntropyController;
pub use gae::{compute_gae, gae_sequence, AdvantageTable};
pub use loss::{ppo_loss, LossConfig, LossInputs, LossTerms};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ActionBatch, Adam, Checkpoint, CosineSchedule, PolicyParams, Tape, CHECKPOINT_VERSION};
use crate::packseq::{group_step_index, pack_group, split_minibatches, SequenceGroup};
use crate::rollout::RolloutView;
use crate::seeding::{stream_key, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub value_coef: f64,
    pub is_cap: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub lr: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; off by default.
    pub max_grad_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            epochs: 3,
            minibatches: 2,
            value_coef: 0.5,
            is_cap: 1.0,
            gamma: 0.99,
            gae_lambda: 0.95,
            lr: 2.5e-4,
            adam_eps: 1e-5,
            max_grad_norm: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            errors.push(format!("ppo.clip must be in (0, 1), got {}", self.clip));
        }
        if self.epochs == 0 {
            errors.push("ppo.epochs must be at least 1".into());
        }
        if self.minibatches == 0 {
            errors.push("ppo.minibatches must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            errors.push("ppo.gamma and ppo.gae_lambda must be in [0, 1]".into());
        }
        if !(self.lr >= 0.0) || !(self.adam_eps > 0.0) {
            errors.push("ppo.lr must be >= 0 and ppo.adam_eps > 0".into());
        }
        if !(self.is_cap > 0.0) {
            errors.push("ppo.is_cap must be positive".into());
        }
        if self.max_grad_norm.is_some_and(|g| !(g > 0.0)) {
            errors.push("ppo.max_grad_norm must be positive".into());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyConfig {
    pub initial_alpha: f64,
    pub min_alpha: f64,
    pub max_alpha: f64,
    pub target: f64,
    pub learned: bool,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig {
            initial_alpha: 1e-3,
            min_alpha: 1e-4,
            max_alpha: 1.0,
            target: 0.0,
            learned: true,
        }
    }
}

impl EntropyConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.min_alpha > 0.0 && self.min_alpha <= self.max_alpha) {
            errors.push("entropy bounds must satisfy 0 < min_alpha <= max_alpha".into());
        }
        if !self.initial_alpha.is_finite() || !self.target.is_finite() {
            errors.push("entropy.initial_alpha and entropy.target must be finite".into());
        }
    }
}

/// Averages gradients across data-parallel replicas. `extra` carries
/// scalars that must be averaged alongside (the entropy-coefficient
/// gradient).
pub trait GradientSync {
    fn allreduce(&self, grads: &mut [Array2<f64>], extra: &mut [f64]) -> Result<()>;
}

/// Statistics of one update, averaged over its mini-batch steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub update: u64,
    pub lr: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub entropy_loss: f64,
    pub alpha: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_is_weight: f64,
    pub max_is_weight: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub num_steps: usize,
    pub num_stale: usize,
    pub num_sequences: usize,
    pub minibatch_steps: usize,
}

#[derive(Clone, Debug)]
pub struct Learner {
    pub cfg: PpoConfig,
    pub params: PolicyParams,
    pub optimizer: Adam,
    pub schedule: CosineSchedule,
    pub entropy: EntropyController,
    pub updates: u64,
    seed: u64,
}

impl Learner {
    /// `total_updates` sets the cosine horizon.
    pub fn new(
        params: PolicyParams,
        cfg: PpoConfig,
        entropy: &EntropyConfig,
        total_updates: u64,
        seed: u64,
    ) -> Self {
        let shapes = PolicyParams::shapes(&params.spec);
        Learner {
            optimizer: Adam::new(&shapes, cfg.adam_eps),
            schedule: CosineSchedule {
                base_lr: cfg.lr,
                total_steps: total_updates,
            },
            entropy: EntropyController::new(
                entropy.initial_alpha,
                entropy.target,
                entropy.min_alpha,
                entropy.max_alpha,
                entropy.learned,
                cfg.adam_eps,
            ),
            cfg,
            params,
            updates: 0,
            seed,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            entropy_alpha: self.entropy.alpha,
            alpha_optimizer: self.entropy.optimizer.clone(),
            updates: self.updates,
        }
    }

    pub fn restore(&mut self, ckpt: Checkpoint) -> Result<()> {
        if ckpt.params.spec != self.params.spec {
            return Err(Error::Shape("checkpoint policy shape differs from config".into()));
        }
        self.params = ckpt.params;
        self.optimizer = ckpt.optimizer;
        self.entropy.alpha = ckpt.entropy_alpha;
        self.entropy.optimizer = ckpt.alpha_optimizer;
        self.updates = ckpt.updates;
        Ok(())
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.updates)
    }

    /// One PPO update over a closed rollout.
    pub fn update(&mut self, view: &RolloutView, sync: Option<&dyn GradientSync>) -> Result<TrainStats> {
        let table = compute_gae(view, self.cfg.gamma, self.cfg.gae_lambda)?;
        let lr = self.current_lr();
        let mut stats = TrainStats {
            update: self.updates,
            lr,
            num_steps: view.len(),
            num_stale: view.num_stale(),
            num_sequences: view.sequences.len(),
            ..TrainStats::default()
        };
        let mut count = 0usize;
        for epoch in 0..self.cfg.epochs {
            let seed = stream_key(Stream::Minibatch, &[self.seed, epoch as u64]);
            let groups = split_minibatches(view, self.cfg.minibatches, seed)?;
            for group in &groups {
                let step = self.minibatch_step(view, group, &table, lr, sync)?;
                stats.minibatch_steps = stats.minibatch_steps.max(group.num_steps());
                stats.policy_loss += step.policy_loss;
                stats.value_loss += step.value_loss;
                stats.entropy += step.mean_entropy;
                stats.mean_ratio += step.mean_ratio;
                stats.clip_fraction += step.clip_fraction;
                stats.mean_is_weight += step.mean_weight;
                stats.max_is_weight = stats.max_is_weight.max(step.max_weight);
                stats.approx_kl += step.approx_kl;
                stats.grad_norm += step.grad_norm;
                stats.entropy_loss += step.entropy_loss;
                count += 1;
            }
        }
        let k = count as f64;
        for x in [
            &mut stats.policy_loss,
            &mut stats.value_loss,
            &mut stats.entropy,
            &mut stats.mean_ratio,
            &mut stats.clip_fraction,
            &mut stats.mean_is_weight,
            &mut stats.approx_kl,
            &mut stats.grad_norm,
            &mut stats.entropy_loss,
        ] {
            *x /= k;
        }
        stats.alpha = self.entropy.alpha;
        self.updates += 1;
        Ok(stats)
    }

    /// Initial recurrent state of every slice of `group`, in slice order.
    fn initial_states(&self, view: &RolloutView, group: &SequenceGroup) -> Result<Array2<f64>> {
        let h = self.params.spec.rnn_hidden;
        let mut states = Array2::zeros((group.slices.len(), h));
        for (i, slice) in group.slices.iter().enumerate() {
            let seq = &view.sequences[slice.sequence];
            let mut state = Array2::zeros((1, h));
            if !seq.initial_state.is_empty() {
                if seq.initial_state.len() != h {
                    return Err(Error::Shape(format!(
                        "stored recurrent state has {} entries, policy expects {h}",
                        seq.initial_state.len()
                    )));
                }
                state.row_mut(0).assign(&ndarray::ArrayView1::from(&seq.initial_state));
            }
            for step in &view.steps[seq.start..seq.start + slice.offset] {
                let obs = ndarray::ArrayView2::from_shape((1, step.observation.len()), step.observation.as_slice())
                    .map_err(|e| Error::Shape(e.to_string()))?;
                state = self.params.step(obs, state.view())?.hidden;
            }
            states.row_mut(i).assign(&state.row(0));
        }
        Ok(states)
    }

    fn minibatch_step(
        &mut self,
        view: &RolloutView,
        group: &SequenceGroup,
        table: &AdvantageTable,
        lr: f64,
        sync: Option<&dyn GradientSync>,
    ) -> Result<StepStats> {
        let packed = pack_group(group)?;
        let rows = group_step_index(group, &packed);
        let states = self.initial_states(view, group)?;
        let mut h0 = Array2::zeros((packed.width(), self.params.spec.rnn_hidden));
        for (j, &input) in packed.order.iter().enumerate() {
            h0.row_mut(j).assign(&states.row(input));
        }
        let obs_dim = self.params.spec.obs_dim;
        let mut obs = Array2::zeros((rows.len(), obs_dim));
        for (r, &i) in rows.iter().enumerate() {
            let o = view.steps[i].observation.as_slice();
            if o.len() != obs_dim {
                return Err(Error::Shape(format!("observation width {} != {obs_dim}", o.len())));
            }
            obs.slice_mut(s![r, ..]).assign(&ndarray::ArrayView1::from(o));
        }
        let inputs = LossInputs {
            actions: ActionBatch::from_actions(
                rows.iter().map(|&i| &view.steps[i].action),
                self.params.spec.action_space,
            ),
            behavior_log_probs: rows.iter().map(|&i| view.steps[i].log_prob).collect(),
            advantages: rows.iter().map(|&i| table.advantages[i]).collect(),
            returns: rows.iter().map(|&i| table.returns[i]).collect(),
        };
        let cfg = LossConfig {
            clip: self.cfg.clip,
            value_coef: self.cfg.value_coef,
            is_cap: self.cfg.is_cap,
            alpha: self.entropy.alpha,
        };

        let mut tape = Tape::new();
        let graph = self.params.forward_packed(&mut tape, &obs, &packed.batch_sizes, &h0)?;
        let terms = ppo_loss(&mut tape, &graph, &inputs, &cfg);
        if !tape.scalar(terms.total).is_finite() {
            return Err(Error::NonFinite("ppo loss"));
        }
        let grads = tape.backward(terms.total);
        let mut grads: Vec<Array2<f64>> = graph
            .params
            .iter()
            .zip(&self.params.tensors)
            .map(|(&v, t)| grads.get_or_zeros(v, t.dim()))
            .collect();
        let mut extra = [self.entropy.alpha_grad(terms.mean_entropy)];
        if let Some(sync) = sync {
            sync.allreduce(&mut grads, &mut extra)?;
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("gradients"));
        }
        let grad_norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if let Some(max) = self.cfg.max_grad_norm {
            if grad_norm > max {
                let scale = max / grad_norm;
                grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * scale));
            }
        }
        self.optimizer.update(&mut self.params.tensors, &grads, lr);
        self.params.clamp_log_std();
        if !self.params.is_finite() {
            return Err(Error::NonFinite("parameters after update"));
        }
        let entropy_loss = self.entropy.loss(terms.mean_entropy);
        self.entropy.step(extra[0], lr);
        Ok(StepStats {
            policy_loss: terms.policy_loss,
            value_loss: terms.value_loss,
            mean_entropy: terms.mean_entropy,
            mean_ratio: terms.mean_ratio,
            clip_fraction: terms.clip_fraction,
            mean_weight: terms.mean_weight,
            max_weight: terms.max_weight,
            approx_kl: terms.approx_kl,
            grad_norm,
            entropy_loss,
        })
    }
}

struct StepStats {
    policy_loss: f64,
    value_loss: f64,
    mean_entropy: f64,
    mean_ratio: f64,
    clip_fraction: f64,
    mean_weight: f64,
    max_weight: f64,
    approx_kl: f64,
    grad_norm: f64,
    entropy_loss: f64,
}

use crate::nn::{ActionBatch, PolicyGraph, Tape, Var};

/// Per-row targets for one packed mini-batch.
#[derive(Clone, Debug)]
pub struct LossInputs {
    pub actions: ActionBatch,
    /// Log-probabilities stored at collection time.
    pub behavior_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub clip: f64,
    pub value_coef: f64,
    pub is_cap: f64,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// Differentiable part: `-weighted surrogate + value term - alpha * H`.
    pub total: Var,
    pub entropy: Var,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_weight: f64,
    pub max_weight: f64,
    pub approx_kl: f64,
}

/// Builds the clipped-surrogate PPO loss on `tape`.
///
/// The ratio is taken against the stored behaviour log-probability. Each
/// row's surrogate is scaled by the truncated importance weight
/// `min(is_cap, ratio)`, treated as a constant.
pub fn ppo_loss(tape: &mut Tape, graph: &PolicyGraph, inputs: &LossInputs, cfg: &LossConfig) -> LossTerms {
    let n = inputs.advantages.len();
    let log_prob = graph.log_prob(tape, &inputs.actions);
    let old = tape.column(&inputs.behavior_log_probs);
    let diff = tape.sub(log_prob, old);
    let ratio = tape.exp(diff);
    let ratios: Vec<f64> = tape.value(ratio).iter().copied().collect();
    let weights: Vec<f64> = ratios.iter().map(|r| r.min(cfg.is_cap)).collect();

    let adv = tape.column(&inputs.advantages);
    let surr1 = tape.mul(ratio, adv);
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let surr2 = tape.mul(clipped, adv);
    let surr = tape.min(surr1, surr2);
    let w = tape.column(&weights);
    let weighted = tape.mul(surr, w);
    let mean_surr = tape.mean(weighted);
    let policy_loss = tape.scale(mean_surr, -1.0);

    let ret = tape.column(&inputs.returns);
    let err = tape.sub(graph.value, ret);
    let sq = tape.mul(err, err);
    let value_loss = tape.mean(sq);
    let value_loss = tape.scale(value_loss, 0.5);
    let value_term = tape.scale(value_loss, cfg.value_coef);

    let entropy = graph.entropy(tape);
    let mean_entropy = tape.mean(entropy);
    let entropy_term = tape.scale(mean_entropy, -cfg.alpha);

    let total = tape.add(policy_loss, value_term);
    let total = tape.add(total, entropy_term);

    let clipped_rows = ratios
        .iter()
        .filter(|r| (**r - 1.0).abs() > cfg.clip)
        .count();
    let log_ratios = tape.value(diff);
    LossTerms {
        total,
        entropy: mean_entropy,
        policy_loss: tape.scalar(policy_loss),
        value_loss: tape.scalar(value_loss),
        mean_entropy: tape.scalar(mean_entropy),
        mean_ratio: ratios.iter().sum::<f64>() / n as f64,
        clip_fraction: clipped_rows as f64 / n as f64,
        mean_weight: weights.iter().sum::<f64>() / n as f64,
        max_weight: weights.iter().copied().fold(0.0, f64::max),
        approx_kl: log_ratios.iter().map(|d| -d).sum::<f64>() / n as f64,
    }
}

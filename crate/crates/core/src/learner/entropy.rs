use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::nn::Adam;

/// Learned entropy coefficient for a minimum-entropy constraint.
///
/// The loss is `alpha * (target - sg(H)) - sg(alpha) * H`. The policy sees
/// only the second term. `alpha` moves along `target - H` (dual ascent), so
/// it grows while the entropy is below target and shrinks otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyController {
    pub alpha: f64,
    pub target: f64,
    pub min_alpha: f64,
    pub max_alpha: f64,
    /// When false `alpha` stays fixed.
    pub learned: bool,
    pub optimizer: Adam,
}

impl EntropyController {
    pub fn new(alpha: f64, target: f64, min_alpha: f64, max_alpha: f64, learned: bool, eps: f64) -> Self {
        EntropyController {
            alpha: alpha.clamp(min_alpha, max_alpha),
            target,
            min_alpha,
            max_alpha,
            learned,
            optimizer: Adam::new(&[(1, 1)], eps),
        }
    }

    /// Loss value for mean entropy `h`.
    pub fn loss(&self, h: f64) -> f64 {
        self.alpha * (self.target - h) - self.alpha * h
    }

    /// Derivative of the loss with respect to `alpha`.
    pub fn alpha_grad(&self, h: f64) -> f64 {
        self.target - h
    }

    /// Moves `alpha` along `grad` (the loss derivative, possibly averaged
    /// across replicas) and clamps it to bounds.
    pub fn step(&mut self, grad: f64, lr: f64) {
        if !self.learned {
            return;
        }
        let mut p = [Array2::from_elem((1, 1), self.alpha)];
        // Adam minimises, so ascend by feeding the negated derivative
        self.optimizer.update(&mut p, &[Array2::from_elem((1, 1), -grad)], lr);
        self.alpha = p[0][[0, 0]].clamp(self.min_alpha, self.max_alpha);
    }
}

//! Recurrent actor-critic: 2-layer tanh encoder, one gated recurrent layer,
//! categorical or diagonal-Gaussian action head, scalar value head.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tape::{tanh, Tape, Var};
use crate::envsim::{Action, ActionSpace};
use crate::error::{Error, Result};
use crate::seeding::{stream_rng, Stream};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    pub encoder_hidden: usize,
    pub rnn_hidden: usize,
}

/// Parameter slots in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum Slot {
    EncW1,
    EncB1,
    EncW2,
    EncB2,
    GruWi,
    GruBi,
    GruWh,
    GruBh,
    PiW,
    PiB,
    ValueW,
    ValueB,
    LogStd,
}

const SLOT_NAMES: [&str; 13] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "gru.w_input",
    "gru.b_input",
    "gru.w_hidden",
    "gru.b_hidden",
    "policy.w",
    "policy.b",
    "value.w",
    "value.b",
    "policy.log_std",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spec: PolicySpec,
    pub tensors: Vec<Array2<f64>>,
}

/// One row's action distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionDistribution {
    Categorical { logits: Array1<f64> },
    Gaussian { mean: Array1<f64>, log_std: Array1<f64> },
}

impl ActionDistribution {
    pub fn sample(&self, rng: &mut impl Rng) -> Action {
        match self {
            ActionDistribution::Categorical { logits } => {
                let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let weights = logits.mapv(|x| (x - max).exp());
                let mut u = rng.random::<f64>() * weights.sum();
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        return Action::Discrete(i);
                    }
                    u -= w;
                }
                Action::Discrete(weights.len() - 1)
            }
            ActionDistribution::Gaussian { mean, log_std } => Action::Continuous(
                mean.iter()
                    .zip(log_std)
                    .map(|(m, ls)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + ls.exp() * z
                    })
                    .collect(),
            ),
        }
    }

    pub fn log_prob(&self, action: &Action) -> f64 {
        match (self, action) {
            (ActionDistribution::Categorical { logits }, Action::Discrete(a)) => {
                let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let lse = max + logits.mapv(|x| (x - max).exp()).sum().ln();
                logits[*a] - lse
            }
            (ActionDistribution::Gaussian { mean, log_std }, Action::Continuous(a)) => mean
                .iter()
                .zip(log_std)
                .zip(a)
                .map(|((m, ls), x)| {
                    let z = (x - m) * (-ls).exp();
                    -0.5 * z * z - ls - HALF_LN_2PI
                })
                .sum(),
            _ => f64::NAN,
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            ActionDistribution::Categorical { logits } => {
                let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let lse = max + logits.mapv(|x| (x - max).exp()).sum().ln();
                -logits.iter().map(|l| (l - lse).exp() * (l - lse)).sum::<f64>()
            }
            ActionDistribution::Gaussian { log_std, .. } => {
                log_std.iter().map(|ls| 0.5 + HALF_LN_2PI + ls).sum()
            }
        }
    }
}

/// Result of a batched single-step forward pass.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Logits or Gaussian means, `b x head_width`.
    pub head: Array2<f64>,
    pub values: Vec<f64>,
    pub hidden: Array2<f64>,
}

impl StepOutput {
    pub fn distribution(&self, params: &PolicyParams, row: usize) -> ActionDistribution {
        let head = self.head.row(row).to_owned();
        match params.spec.action_space {
            ActionSpace::Discrete(_) => ActionDistribution::Categorical { logits: head },
            ActionSpace::Continuous(_) => ActionDistribution::Gaussian {
                mean: head,
                log_std: params.tensors[Slot::LogStd as usize].row(0).to_owned(),
            },
        }
    }
}

/// Actions for a batch of rows, as the loss needs them.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionBatch {
    Discrete(Vec<usize>),
    Continuous(Array2<f64>),
}

impl ActionBatch {
    pub fn from_actions<'a>(actions: impl IntoIterator<Item = &'a Action>, space: ActionSpace) -> Self {
        match space {
            ActionSpace::Discrete(_) => ActionBatch::Discrete(
                actions
                    .into_iter()
                    .map(|a| match a {
                        Action::Discrete(i) => *i,
                        Action::Continuous(_) => panic!("continuous action in discrete space"),
                    })
                    .collect(),
            ),
            ActionSpace::Continuous(d) => {
                let rows: Vec<f64> = actions
                    .into_iter()
                    .flat_map(|a| match a {
                        Action::Continuous(v) => v.clone(),
                        Action::Discrete(_) => panic!("discrete action in continuous space"),
                    })
                    .collect();
                ActionBatch::Continuous(
                    Array2::from_shape_vec((rows.len() / d, d), rows).expect("action width"),
                )
            }
        }
    }
}

/// Tape handles for a packed forward pass. `head`, `value` and `hidden` rows
/// follow the packed (time-major) order of the input.
#[derive(Clone, Debug)]
pub struct PolicyGraph {
    pub params: Vec<Var>,
    pub head: Var,
    pub log_std: Option<Var>,
    pub value: Var,
    pub hidden: Var,
}

impl PolicyGraph {
    pub fn log_prob(&self, tape: &mut Tape, actions: &ActionBatch) -> Var {
        match actions {
            ActionBatch::Discrete(a) => tape.log_softmax_gather(self.head, a),
            ActionBatch::Continuous(a) => tape.gaussian_log_prob(
                self.head,
                self.log_std.expect("continuous policy has log_std"),
                a.clone(),
            ),
        }
    }

    pub fn entropy(&self, tape: &mut Tape) -> Var {
        match self.log_std {
            None => tape.categorical_entropy(self.head),
            Some(ls) => {
                let rows = tape.value(self.head).nrows();
                tape.gaussian_entropy(ls, rows)
            }
        }
    }
}

fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Array2<f64> {
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    let m = DMatrix::<f64>::from_fn(r, c, |_, _| StandardNormal.sample(rng));
    let qr = m.qr();
    let mut q = qr.q();
    let rdiag = qr.r().diagonal();
    for j in 0..c {
        if rdiag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        gain * if tall { q[(i, j)] } else { q[(j, i)] }
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PolicyParams {
    pub fn shapes(spec: &PolicySpec) -> Vec<(usize, usize)> {
        let (o, e, h, a) = (
            spec.obs_dim,
            spec.encoder_hidden,
            spec.rnn_hidden,
            spec.action_space.head_width(),
        );
        let mut shapes = vec![
            (o, e),
            (1, e),
            (e, e),
            (1, e),
            (e, 3 * h),
            (1, 3 * h),
            (h, 3 * h),
            (1, 3 * h),
            (h, a),
            (1, a),
            (h, 1),
            (1, 1),
        ];
        if spec.action_space.is_continuous() {
            shapes.push((1, a));
        }
        shapes
    }

    pub fn zeros(spec: PolicySpec) -> Self {
        PolicyParams {
            spec,
            tensors: Self::shapes(&spec).into_iter().map(Array2::zeros).collect(),
        }
    }

    /// Orthogonal weights (policy head gain 0.01, value head gain 1),
    /// zero biases, zero log-std.
    pub fn init(spec: PolicySpec, seed: u64) -> Self {
        let mut rng = stream_rng(Stream::Init, &[seed]);
        let mut p = Self::zeros(spec);
        let (e, h) = (spec.encoder_hidden, spec.rnn_hidden);
        p.tensors[Slot::EncW1 as usize] = orthogonal(spec.obs_dim, e, 1.0, &mut rng);
        p.tensors[Slot::EncW2 as usize] = orthogonal(e, e, 1.0, &mut rng);
        for gate in 0..3 {
            let wi = orthogonal(e, h, 1.0, &mut rng);
            let wh = orthogonal(h, h, 1.0, &mut rng);
            p.tensors[Slot::GruWi as usize]
                .slice_mut(s![.., gate * h..(gate + 1) * h])
                .assign(&wi);
            p.tensors[Slot::GruWh as usize]
                .slice_mut(s![.., gate * h..(gate + 1) * h])
                .assign(&wh);
        }
        let a = spec.action_space.head_width();
        p.tensors[Slot::PiW as usize] = orthogonal(h, a, 0.01, &mut rng);
        p.tensors[Slot::ValueW as usize] = orthogonal(h, 1, 1.0, &mut rng);
        p
    }

    pub fn name(index: usize) -> &'static str {
        SLOT_NAMES[index]
    }

    pub fn tensor(&self, slot: Slot) -> &Array2<f64> {
        &self.tensors[slot as usize]
    }

    pub fn tensor_mut(&mut self, slot: Slot) -> &mut Array2<f64> {
        &mut self.tensors[slot as usize]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn clamp_log_std(&mut self) {
        if self.spec.action_space.is_continuous() {
            self.tensors[Slot::LogStd as usize].mapv_inplace(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX));
        }
    }

    /// Largest absolute element-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &PolicyParams) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn zero_hidden(&self, rows: usize) -> Array2<f64> {
        Array2::zeros((rows, self.spec.rnn_hidden))
    }

    fn check_obs(&self, obs: ArrayView2<f64>) -> Result<()> {
        if obs.ncols() != self.spec.obs_dim {
            return Err(Error::Shape(format!(
                "observation width {} != {}",
                obs.ncols(),
                self.spec.obs_dim
            )));
        }
        if obs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("policy input"));
        }
        Ok(())
    }

    /// Batched single-step forward without a tape, used for inference.
    pub fn step(&self, obs: ArrayView2<f64>, hidden: ArrayView2<f64>) -> Result<StepOutput> {
        self.check_obs(obs)?;
        if hidden.dim() != (obs.nrows(), self.spec.rnn_hidden) {
            return Err(Error::Shape(format!("hidden state {:?}", hidden.dim())));
        }
        let t = &self.tensors;
        let h = self.spec.rnn_hidden;
        let e1 = (obs.dot(&t[Slot::EncW1 as usize]) + &t[Slot::EncB1 as usize]).mapv(tanh);
        let e2 = (e1.dot(&t[Slot::EncW2 as usize]) + &t[Slot::EncB2 as usize]).mapv(tanh);
        let xi = e2.dot(&t[Slot::GruWi as usize]) + &t[Slot::GruBi as usize];
        let hh = hidden.dot(&t[Slot::GruWh as usize]) + &t[Slot::GruBh as usize];
        let mut out = Array2::zeros((obs.nrows(), h));
        for i in 0..obs.nrows() {
            for k in 0..h {
                let r = sigmoid(xi[[i, k]] + hh[[i, k]]);
                let z = sigmoid(xi[[i, h + k]] + hh[[i, h + k]]);
                let n = tanh(xi[[i, 2 * h + k]] + r * hh[[i, 2 * h + k]]);
                out[[i, k]] = (1.0 - z) * n + z * hidden[[i, k]];
            }
        }
        let head = out.dot(&t[Slot::PiW as usize]) + &t[Slot::PiB as usize];
        let values = (out.dot(&t[Slot::ValueW as usize]) + &t[Slot::ValueB as usize])
            .index_axis(Axis(1), 0)
            .to_vec();
        Ok(StepOutput {
            head,
            values,
            hidden: out,
        })
    }

    /// Runs the recurrent core over a packed batch on `tape`.
    ///
    /// `obs` rows are time-major: the first `batch_sizes[0]` rows are
    /// timestep 0 of the live sequences, and so on. `h0` holds one initial
    /// state per sequence, longest first.
    pub fn forward_packed(
        &self,
        tape: &mut Tape,
        obs: &Array2<f64>,
        batch_sizes: &[usize],
        h0: &Array2<f64>,
    ) -> Result<PolicyGraph> {
        self.check_obs(obs.view())?;
        let total: usize = batch_sizes.iter().sum();
        if total != obs.nrows() || batch_sizes.first() != Some(&h0.nrows()) {
            return Err(Error::Shape(format!(
                "packed batch: {} rows, batch_sizes sum {}, {} initial states",
                obs.nrows(),
                total,
                h0.nrows()
            )));
        }
        let h = self.spec.rnn_hidden;
        let p: Vec<Var> = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();

        // time-independent parts run over every row at once
        let x = tape.leaf(obs.clone());
        let e1 = tape.matmul(x, p[Slot::EncW1 as usize]);
        let e1 = tape.add_row(e1, p[Slot::EncB1 as usize]);
        let e1 = tape.tanh(e1);
        let e2 = tape.matmul(e1, p[Slot::EncW2 as usize]);
        let e2 = tape.add_row(e2, p[Slot::EncB2 as usize]);
        let e2 = tape.tanh(e2);
        let xi_all = tape.matmul(e2, p[Slot::GruWi as usize]);
        let xi_all = tape.add_row(xi_all, p[Slot::GruBi as usize]);

        let mut prev = tape.leaf(h0.clone());
        let mut outputs = Vec::with_capacity(batch_sizes.len());
        let mut offset = 0;
        for &bs in batch_sizes {
            let xi = tape.row_slice(xi_all, offset, bs);
            let hp = if tape.value(prev).nrows() == bs {
                prev
            } else {
                tape.row_slice(prev, 0, bs)
            };
            let hh = tape.matmul(hp, p[Slot::GruWh as usize]);
            let hh = tape.add_row(hh, p[Slot::GruBh as usize]);
            let (xr, xz, xn) = (
                tape.col_slice(xi, 0, h),
                tape.col_slice(xi, h, h),
                tape.col_slice(xi, 2 * h, h),
            );
            let (hr, hz, hn) = (
                tape.col_slice(hh, 0, h),
                tape.col_slice(hh, h, h),
                tape.col_slice(hh, 2 * h, h),
            );
            let r = tape.add(xr, hr);
            let r = tape.sigmoid(r);
            let z = tape.add(xz, hz);
            let z = tape.sigmoid(z);
            let rn = tape.mul(r, hn);
            let n = tape.add(xn, rn);
            let n = tape.tanh(n);
            let keep_new = tape.affine(z, -1.0, 1.0);
            let a = tape.mul(keep_new, n);
            let b = tape.mul(z, hp);
            let hn_out = tape.add(a, b);
            outputs.push(hn_out);
            prev = hn_out;
            offset += bs;
        }
        let hidden = tape.concat_rows(&outputs);
        let head = tape.matmul(hidden, p[Slot::PiW as usize]);
        let head = tape.add_row(head, p[Slot::PiB as usize]);
        let value = tape.matmul(hidden, p[Slot::ValueW as usize]);
        let value = tape.add_row(value, p[Slot::ValueB as usize]);
        let log_std = self
            .spec
            .action_space
            .is_continuous()
            .then(|| p[Slot::LogStd as usize]);
        Ok(PolicyGraph {
            params: p,
            head,
            log_std,
            value,
            hidden,
        })
    }
}

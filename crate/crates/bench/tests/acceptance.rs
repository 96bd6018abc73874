//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to the
//! terminal (bypassing the harness's output capture) and then asserts.
//!
//! Tests share one lock: several of them measure wall-clock throughput and
//! must not compete with each other for CPU.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ver_bench::{bench, run_session, smoothed_returns, BenchOptions, BenchReport};
use ver_core::config::{Clock, PreemptionMode, Regime};
use ver_core::distributed::{optimal_preempt_steps, PreemptionEstimator};
use ver_core::envsim::{optimal_return, Action, ActionSpace, Observation};
use ver_core::learner::{gae_sequence, ppo_loss, EntropyController, LossConfig, LossInputs};
use ver_core::nn::{ActionBatch, PolicyParams, PolicySpec, Slot, Tape, Var};
use ver_core::packseq::{group_step_index, pack_group, split_minibatches};
use ver_core::rollout::{RolloutView, SequenceInfo, StoredStep};
use ver_core::session::Session;
use ver_core::RunConfig;

static LOCK: Mutex<()> = Mutex::new(());

fn lock() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {id:>2} {} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    RunConfig::load(&path).unwrap()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// 1 and 3: throughput under heterogeneous latency

struct HeteroBench {
    report: BenchReport,
    seconds: f64,
}

/// Three seeds of every regime on the standard config; shared by the
/// ordering and mean-versus-max checks.
fn hetero_bench() -> &'static HeteroBench {
    static CELL: OnceLock<HeteroBench> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = config("heterogeneous.toml");
        let opts = BenchOptions {
            seeds: vec![0, 1, 2],
            regimes: Regime::ALL.to_vec(),
            rollouts: 34,
            warmup: 2,
            replicas: None,
        };
        let t = Instant::now();
        let report = bench(&cfg, &opts).unwrap();
        HeteroBench {
            report,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn c01_throughput_ordering() {
    let _g = lock();
    let b = hetero_bench();
    let sps = |r| b.report.row(r, 1).unwrap().mean_sps;
    let (sync, nover, ver) = (sps(Regime::Sync), sps(Regime::NoVer), sps(Regime::Ver));
    let steady = b.report.row(Regime::Ver, 1).unwrap().iterations;
    let pass = ver >= 1.2 * sync && ver >= 1.05 * nover && nover > sync && steady >= 100 && b.seconds <= 900.0;
    report(
        1,
        "throughput ordering",
        pass,
        &format!(
            "mean SPS sync {sync:.0} nover {nover:.0} ver {ver:.0}; ver/sync {:.2} (>= 1.2), ver/nover {:.2} (>= 1.05); {steady} steady rollouts per regime; {:.0} s",
            ver / sync,
            ver / nover,
            b.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn c03_mean_versus_max_gap() {
    let _g = lock();
    let b = hetero_bench();
    let sync = &b.report.row(Regime::Sync, 1).unwrap().seed_mean_over_max;
    let ver = &b.report.row(Regime::Ver, 1).unwrap().seed_mean_over_max;
    let pass = sync.len() == 3 && sync.iter().zip(ver).all(|(s, v)| s < v);
    let fmt = |x: &[f64]| x.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ");
    report(
        3,
        "mean-vs-max gap",
        pass,
        &format!("mean/max per seed: sync [{}] < ver [{}]", fmt(sync), fmt(ver)),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2: no stragglers, no gap

#[test]
fn c02_straggler_control() {
    let _g = lock();
    let cfg = config("homogeneous.toml");
    let opts = BenchOptions {
        seeds: vec![0, 1, 2],
        regimes: Regime::ALL.to_vec(),
        rollouts: 20,
        warmup: 2,
        replicas: None,
    };
    let t = Instant::now();
    let r = bench(&cfg, &opts).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let sps: Vec<f64> = Regime::ALL.iter().map(|&g| r.row(g, 1).unwrap().mean_sps).collect();
    let hi = sps.iter().cloned().fold(f64::MIN, f64::max);
    let lo = sps.iter().cloned().fold(f64::MAX, f64::min);
    let pass = lo >= 0.9 * hi && secs <= 300.0;
    report(
        2,
        "straggler control",
        pass,
        &format!(
            "constant latency SPS sync {:.0} nover {:.0} ver {:.0}; min/max {:.3} (>= 0.9); {secs:.0} s",
            sps[0],
            sps[1],
            sps[2],
            lo / hi
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4: VER accounting

#[test]
fn c04_ver_accounting() {
    let _g = lock();
    let mut cfg = config("heterogeneous.toml");
    cfg.run.clock = Clock::Virtual;
    cfg.rollout.env_slowdown = vec![1.0, 2.0];
    let cap = cfg.rollout.capacity();
    let mut session = Session::new(&cfg).unwrap();
    let (mut fast, mut slow) = (0usize, 0usize);
    let mut exact = true;
    for _ in 0..50 {
        let it = session.step().unwrap();
        let c = &it.collected[0];
        exact &= c.view.len() == cap && c.timing.steps == cap && c.view.num_stale() == 0;
        for (env, &n) in c.timing.per_env_counts.iter().enumerate() {
            if env % 2 == 0 {
                fast += n;
            } else {
                slow += n;
            }
        }
    }
    session.finish().unwrap();
    let ratio = fast as f64 / slow as f64;
    let pass = exact && (1.5..=2.5).contains(&ratio);
    report(
        4,
        "VER accounting",
        pass,
        &format!("50 rollouts of exactly {cap} steps: {exact}; fast/slow count ratio {ratio:.3} (2 +- 25%)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5: mini-batch exactness

const OBS: usize = 3;
const HID: usize = 4;

/// A VER-shaped view: `envs * t` steps spread unevenly over the
/// environments, each environment's steps cut at random episode ends.
fn random_view(rng: &mut ChaCha8Rng, envs: usize, t: usize) -> RolloutView {
    let rates: Vec<f64> = (0..envs).map(|_| rng.random_range(0.2..1.0)).collect();
    let total_rate: f64 = rates.iter().sum();
    let mut counts = vec![0usize; envs];
    for _ in 0..envs * t {
        let mut u = rng.random_range(0.0..total_rate);
        let mut e = 0;
        while u >= rates[e] && e + 1 < envs {
            u -= rates[e];
            e += 1;
        }
        counts[e] += 1;
    }
    let mut steps = Vec::new();
    let mut sequences = Vec::new();
    let mut next_id = 0u64;
    for (env, &n) in counts.iter().enumerate() {
        let mut k = 0;
        let mut episode = 0u64;
        let mut first = true;
        while k < n {
            let len = if rng.random_bool(0.3) { n - k } else { rng.random_range(1..=n - k) };
            let ends_episode = k + len < n || rng.random_bool(0.5);
            let initial_state = if first {
                (0..HID).map(|_| rng.random_range(-0.8..0.8)).collect()
            } else {
                Vec::new()
            };
            sequences.push(SequenceInfo {
                id: next_id,
                env_index: env,
                start: steps.len(),
                len,
                initial_state,
                bootstrap: (!ends_episode).then_some(0.0),
                stale: false,
            });
            for j in 0..len {
                steps.push(StoredStep {
                    env_index: env,
                    episode,
                    t: j,
                    observation: Observation((0..OBS).map(|_| rng.random_range(-1.0..1.0)).collect()),
                    action: Action::Discrete(rng.random_range(0..2)),
                    log_prob: 0.0,
                    value: 0.0,
                    reward: 0.0,
                    done: ends_episode && j + 1 == len,
                    latency: 0.0,
                    snapshot_version: 0,
                    sequence_id: next_id,
                    stale: false,
                    carryover: false,
                });
            }
            next_id += 1;
            episode += 1;
            first = false;
            k += len;
        }
    }
    RolloutView {
        rollout_index: 0,
        capacity: envs * t,
        steps,
        sequences,
        per_env_counts: counts,
        deficit: 0,
    }
}

#[test]
fn c05_minibatch_exactness() {
    let _g = lock();
    let (envs, t, b) = (4usize, 16usize, 2usize);
    let spec = PolicySpec {
        obs_dim: OBS,
        action_space: ActionSpace::Discrete(2),
        encoder_hidden: 5,
        rnn_hidden: HID,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut size_ok, mut roundtrip_ok) = (true, true);
    let mut worst: f64 = 0.0;
    for case in 0..10_000u64 {
        let view = random_view(&mut rng, envs, t);
        let params = PolicyParams::init(spec, case);
        // reference: every sequence run step by step from its stored state
        let mut h_before = vec![Array2::zeros((1, HID)); view.len()];
        let mut head = vec![Vec::new(); view.len()];
        let mut value = vec![0.0; view.len()];
        for seq in &view.sequences {
            let mut h = if seq.initial_state.is_empty() {
                Array2::zeros((1, HID))
            } else {
                Array2::from_shape_vec((1, HID), seq.initial_state.clone()).unwrap()
            };
            for i in seq.range() {
                h_before[i] = h.clone();
                let obs = Array2::from_shape_vec((1, OBS), view.steps[i].observation.0.clone()).unwrap();
                let out = params.step(obs.view(), h.view()).unwrap();
                head[i] = out.head.row(0).to_vec();
                value[i] = out.values[0];
                h = out.hidden;
            }
        }

        let groups = split_minibatches(&view, b, case).unwrap();
        let mut seen = vec![0u8; view.len()];
        for g in &groups {
            size_ok &= g.num_steps() == envs * t / b;
            let p = pack_group(g).unwrap();
            let idx = group_step_index(g, &p);
            let per_slice: Vec<Vec<usize>> = g.slices.iter().map(|sl| sl.range().collect()).collect();
            let flat = p.gather(&per_slice);
            roundtrip_ok &= p.unpack(&flat) == per_slice && flat == idx;
            for &i in &idx {
                seen[i] += 1;
            }
            let mut obs = Array2::zeros((idx.len(), OBS));
            for (r, &i) in idx.iter().enumerate() {
                obs.row_mut(r).assign(&ndarray::ArrayView1::from(&view.steps[i].observation.0));
            }
            let mut h0 = Array2::zeros((p.width(), HID));
            for (j, &input) in p.order.iter().enumerate() {
                h0.row_mut(j).assign(&h_before[g.slices[input].start].row(0));
            }
            let mut tape = Tape::new();
            let graph = params.forward_packed(&mut tape, &obs, &p.batch_sizes, &h0).unwrap();
            let (ph, pv) = (tape.value(graph.head), tape.value(graph.value));
            for (r, &i) in idx.iter().enumerate() {
                worst = worst.max(rel_err(pv[[r, 0]], value[i], 1e-12));
                for (a, e) in ph.row(r).iter().zip(&head[i]) {
                    worst = worst.max(rel_err(*a, *e, 1e-12));
                }
            }
        }
        roundtrip_ok &= seen.iter().all(|&c| c == 1);
    }
    let pass = size_ok && roundtrip_ok && worst <= 1e-6;
    report(
        5,
        "mini-batch exactness",
        pass,
        &format!(
            "10000 rollouts of {}: equal halves {size_ok}, pack/unpack exact {roundtrip_ok}, packed vs chained forward max rel err {worst:.2e} (<= 1e-6)",
            envs * t
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6: GAE oracle

/// Direct sum of discounted TD residuals, cut at the first terminal step.
fn gae_double_sum(r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    let delta = |k: usize| {
        let next = if k + 1 < n { v[k + 1] } else { boot };
        r[k] + if d[k] { 0.0 } else { g * next } - v[k]
    };
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            for k in t..n {
                sum += (g * l).powi((k - t) as i32) * delta(k);
                if d[k] {
                    break;
                }
            }
            sum
        })
        .collect()
}

#[test]
fn c06_gae_oracle() {
    let _g = lock();
    let (gamma, lambda) = (0.99, 0.95);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let boot = rng.random_range(-2.0..2.0);
        let fast = gae_sequence(&r, &v, &d, boot, gamma, lambda);
        let slow = gae_double_sum(&r, &v, &d, boot, gamma, lambda);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    let pass = worst <= 1e-10;
    report(
        6,
        "GAE oracle",
        pass,
        &format!("1000 random sequences, max |recursive - double sum| {worst:.2e} (<= 1e-10)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7: gradient checks

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Largest relative error between tape and central-difference gradients of
/// the scalar `f` with respect to every input element.
fn op_grad_error<F>(inputs: Vec<Array2<f64>>, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let h = 1e-5;
    let eval = |xs: &[Array2<f64>]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &vars);
        t.scalar(out)
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let out = f(&mut t, &vars);
    let grads = t.backward(out);
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], x.dim());
        for idx in 0..x.len() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[k].as_slice_mut().unwrap()[idx] += h;
            minus[k].as_slice_mut().unwrap()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(fd, analytic.as_slice().unwrap()[idx], 1.0));
        }
    }
    worst
}

fn per_op_worst(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 4, 2);
    let c = random(&mut rng, 3, 4);
    let row = random(&mut rng, 1, 4);
    let acts: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let cont = random(&mut rng, 3, 4);
    let checks: Vec<f64> = vec![
        op_grad_error(vec![a.clone(), b.clone()], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let q = t.mul(m, m);
            t.sum(q)
        }),
        op_grad_error(vec![a.clone(), row.clone()], |t, v| {
            let m = t.add_row(v[0], v[1]);
            let q = t.tanh(m);
            t.sum(q)
        }),
        op_grad_error(vec![a.clone(), c.clone()], |t, v| {
            let m = t.add(v[0], v[1]);
            let q = t.sigmoid(m);
            t.mean(q)
        }),
        op_grad_error(vec![a.clone(), c.clone()], |t, v| {
            let m = t.sub(v[0], v[1]);
            let e = t.exp(m);
            let q = t.affine(e, 0.7, -0.2);
            let q = t.scale(q, 1.3);
            let q = t.mul(q, q);
            t.sum(q)
        }),
        op_grad_error(vec![a.clone(), c.clone()], |t, v| {
            let m = t.min(v[0], v[1]);
            let q = t.clamp(m, -0.5, 0.5);
            let q = t.mul(q, m);
            t.sum(q)
        }),
        op_grad_error(vec![a.clone(), c.clone()], |t, v| {
            let x = t.col_slice(v[0], 1, 2);
            let y = t.row_slice(v[1], 1, 2);
            let z = t.concat_rows(&[x, x]);
            let y2 = t.col_slice(y, 0, 2);
            let x0 = t.row_slice(x, 0, 1);
            let w = t.concat_rows(&[y2, x, x0]);
            let m = t.mul(w, w);
            let q = t.mul(z, m);
            t.sum(q)
        }),
        op_grad_error(vec![a.clone()], |t, v| {
            let lp = t.log_softmax_gather(v[0], &acts);
            let h = t.categorical_entropy(v[0]);
            let q = t.mul(lp, h);
            t.sum(q)
        }),
        op_grad_error(vec![a.clone(), row.clone()], |t, v| {
            let lp = t.gaussian_log_prob(v[0], v[1], cont.clone());
            let h = t.gaussian_entropy(v[1], 3);
            let q = t.add(lp, h);
            let q = t.tanh(q);
            t.sum(q)
        }),
    ];
    checks.into_iter().fold(0.0, f64::max)
}

/// Largest relative error of the full loss gradient on one random batch.
fn full_loss_worst(space: ActionSpace, seed: u64) -> f64 {
    let spec = PolicySpec {
        obs_dim: 3,
        action_space: space,
        encoder_hidden: 5,
        rnn_hidden: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = PolicyParams::init(spec, seed);
    params.tensor_mut(Slot::PiW).mapv_inplace(|x| x * 30.0);
    let mut lengths: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(1..=4)).collect();
    lengths.sort_unstable_by(|a, b| b.cmp(a));
    let p = ver_core::packseq::pack(&lengths).unwrap();
    let obs = random(&mut rng, p.len(), 3);
    let h0 = random(&mut rng, p.width(), 4).mapv(|x| 0.5 * x);
    let actions: Vec<Action> = (0..p.len())
        .map(|_| match space {
            ActionSpace::Discrete(n) => Action::Discrete(rng.random_range(0..n)),
            ActionSpace::Continuous(d) => Action::Continuous((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()),
        })
        .collect();
    let batch = ActionBatch::from_actions(actions.iter(), space);
    let mut tape = Tape::new();
    let graph = params.forward_packed(&mut tape, &obs, &p.batch_sizes, &h0).unwrap();
    let lp = graph.log_prob(&mut tape, &batch);
    // behaviour log-probs a little below the current ones keep every ratio
    // inside the clip range, away from the kinks of min and clip
    let behavior: Vec<f64> = tape
        .value(lp)
        .iter()
        .map(|x| x - rng.random_range(0.05..0.15))
        .collect();
    let inputs = LossInputs {
        actions: batch,
        behavior_log_probs: behavior,
        advantages: (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        returns: (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let cfg = LossConfig {
        clip: 0.2,
        value_coef: 0.5,
        is_cap: 1.0,
        alpha: 0.05,
    };
    let loss = |params: &PolicyParams| {
        let mut tape = Tape::new();
        let graph = params.forward_packed(&mut tape, &obs, &p.batch_sizes, &h0).unwrap();
        let t = ppo_loss(&mut tape, &graph, &inputs, &cfg);
        tape.scalar(t.total)
    };
    let mut tape = Tape::new();
    let graph = params.forward_packed(&mut tape, &obs, &p.batch_sizes, &h0).unwrap();
    let terms = ppo_loss(&mut tape, &graph, &inputs, &cfg);
    let grads = tape.backward(terms.total);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (slot, &var) in graph.params.iter().enumerate() {
        let analytic = grads.get_or_zeros(var, params.tensors[slot].dim());
        let cols = params.tensors[slot].ncols();
        for idx in 0..params.tensors[slot].len() {
            let (r, c) = (idx / cols, idx % cols);
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.tensors[slot][[r, c]] += h;
            minus.tensors[slot][[r, c]] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[[r, c]], fd, 1e-3));
        }
    }
    worst
}

#[test]
fn c07_gradient_checks() {
    let _g = lock();
    let ops = (0..5).map(per_op_worst).fold(0.0, f64::max);
    let mut full: f64 = 0.0;
    for seed in 0..5 {
        full = full.max(full_loss_worst(ActionSpace::Discrete(3), seed));
        full = full.max(full_loss_worst(ActionSpace::Continuous(2), 100 + seed));
    }
    let pass = full <= 1e-3 && ops <= 1e-4;
    report(
        7,
        "gradient checks",
        pass,
        &format!("full PPO loss max rel err {full:.2e} (<= 1e-3) over 10 batches; per-op max rel err {ops:.2e} (<= 1e-4)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8: entropy controller

#[test]
fn c08_entropy_controller() {
    let _g = lock();
    // Gaussian policy whose only parameter is its log-std; a quadratic
    // policy loss pulls it below the entropy target.
    let (theta0, k, lr) = (-1.0f64, 0.5, 0.05);
    let target = 1.0;
    let mut ctrl = EntropyController::new(1e-3, target, 1e-4, 1.0, true, 1e-5);
    let mut theta = theta0;
    let entropy = |theta: f64| {
        let mut t = Tape::new();
        let ls = t.leaf(Array2::from_elem((1, 1), theta));
        let h = t.gaussian_entropy(ls, 1);
        let h = t.sum(h);
        let g = t.backward(h);
        (t.scalar(h), g.get(ls).unwrap()[[0, 0]])
    };
    let start = entropy(theta).0;
    let mut monotone = true;
    let mut in_bounds = true;
    let mut reached = None;
    for it in 0..5000 {
        let (h, dh) = entropy(theta);
        if h >= target {
            reached = Some(it);
            break;
        }
        let before = ctrl.alpha;
        ctrl.step(ctrl.alpha_grad(h), 0.01);
        monotone &= ctrl.alpha >= before;
        in_bounds &= (1e-4..=1.0).contains(&ctrl.alpha);
        // d/dtheta of k/2 (theta - theta0)^2 - alpha H
        theta -= lr * (k * (theta - theta0) - ctrl.alpha * dh);
    }
    // keep running past the target: alpha must stay bounded either way
    for _ in 0..2000 {
        let (h, dh) = entropy(theta);
        ctrl.step(ctrl.alpha_grad(h), 0.01);
        in_bounds &= (1e-4..=1.0).contains(&ctrl.alpha);
        theta -= lr * (k * (theta - theta0) - ctrl.alpha * dh);
    }
    let pass = start < target && monotone && in_bounds && reached.is_some();
    report(
        8,
        "entropy controller",
        pass,
        &format!(
            "H0 {start:.3} < target {target}; alpha non-decreasing until H >= target {monotone} (after {reached:?} steps); alpha within [1e-4, 1] {in_bounds}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 9: learning parity

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median over seeds of the smoothed return after each update.
fn median_curve(cfg: &RunConfig, regime: Regime, seeds: &[u64]) -> Vec<f64> {
    let curves: Vec<Vec<f64>> = seeds
        .iter()
        .map(|&seed| {
            let mut c = ver_bench::seeded(cfg, seed, false);
            c.run.regime = regime;
            let records = run_session(&c, false).unwrap();
            smoothed_returns(&records, 5).into_iter().map(|r| r.unwrap_or(0.0)).collect()
        })
        .collect();
    let len = curves.iter().map(Vec::len).min().unwrap();
    (0..len).map(|i| median(curves.iter().map(|c| c[i]).collect())).collect()
}

#[test]
fn c09_learning_parity() {
    let _g = lock();
    let cfg = config("delayedcue_ver.toml");
    assert_eq!(cfg.rollout.capacity(), 1024);
    assert_eq!(cfg.num_updates(), 300);
    let optimal = optimal_return(&cfg.task, cfg.ppo.gamma);
    let seeds = [0, 1, 2, 3, 4];
    let t = Instant::now();
    let sync = median_curve(&cfg, Regime::Sync, &seeds);
    let ver = median_curve(&cfg, Regime::Ver, &seeds);
    let secs = t.elapsed().as_secs_f64();
    let first = |c: &[f64]| c.iter().position(|&r| r >= 0.9 * optimal).map(|i| i + 1);
    let (sync_hit, ver_hit) = (first(&sync), first(&ver));
    let (sync_auc, ver_auc): (f64, f64) = (sync.iter().sum(), ver.iter().sum());
    let pass = sync_hit.is_some() && ver_hit.is_some() && ver_auc >= 0.9 * sync_auc && secs <= 1800.0;
    report(
        9,
        "learning parity",
        pass,
        &format!(
            "median return >= 0.9 x {optimal} at update sync {sync_hit:?} ver {ver_hit:?} (<= 300); AUC ver/sync {:.3} (>= 0.9); {secs:.0} s",
            ver_auc / sync_auc
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 10: preemption optimality

fn merged_yields(m: &PreemptionEstimator) -> Vec<f64> {
    let mut per_replica: Vec<Vec<f64>> = vec![Vec::new(); m.num_replicas()];
    for (i, &tau) in m.step_times.iter().enumerate() {
        if tau.is_finite() && tau > 0.0 {
            for k in 1..=m.replica_cap {
                per_replica[m.replica_of[i]].push(k as f64 * tau);
            }
        }
    }
    let mut all = Vec::new();
    for mut ys in per_replica {
        ys.sort_by(f64::total_cmp);
        ys.truncate(m.replica_cap);
        all.extend(ys);
    }
    all.sort_by(f64::total_cmp);
    all
}

fn exhaustive(m: &PreemptionEstimator) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &t) in merged_yields(m).iter().enumerate() {
        let v = (i + 1) as f64 / (t + m.learn_time);
        if v > best.1 {
            best = (i + 1, v);
        }
    }
    best.0
}

#[test]
fn c10_preemption_optimality() {
    let _g = lock();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut matches = 0;
    for _ in 0..1000 {
        let replicas = rng.random_range(1..=4);
        let per = rng.random_range(1..=8);
        let mut step_times = Vec::new();
        let mut replica_of = Vec::new();
        for r in 0..replicas {
            for _ in 0..per {
                let mut tau = 0.001 * 10f64.powf(rng.random_range(0.0..2.0));
                if rng.random_bool(0.1) {
                    tau *= 10.0;
                }
                step_times.push(tau);
                replica_of.push(r);
            }
        }
        let m = PreemptionEstimator {
            step_times,
            replica_of,
            replica_cap: rng.random_range(1..=128),
            learn_time: 10f64.powf(rng.random_range(-3.0..0.5)),
        };
        if optimal_preempt_steps(&m) == Some(exhaustive(&m)) {
            matches += 1;
        }
    }
    let mut linear_ok = 0;
    for _ in 0..100 {
        let tau = 10f64.powf(rng.random_range(-4.0..-1.0));
        let lt = 10f64.powf(rng.random_range(-3.0..1.0));
        let cap = rng.random_range(1..=4096);
        let m = PreemptionEstimator::new(vec![tau], cap, lt);
        if m.optimal_steps() == Some(m.s_max()) {
            linear_ok += 1;
        }
    }
    let pass = matches == 1000 && linear_ok == 100;
    report(
        10,
        "preemption optimality",
        pass,
        &format!("scan == exhaustive on {matches}/1000 instances; linear Time gives S_max on {linear_ok}/100"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 11: distributed consistency

#[test]
fn c11_distributed_consistency() {
    let _g = lock();
    // parameters stay identical across replicas
    let mut cfg = config("delayedcue_ver.toml");
    cfg.run.replicas = 4;
    cfg.run.max_updates = Some(6);
    let divergence = run_session(&cfg, false)
        .unwrap()
        .iter()
        .map(|r| r.max_divergence)
        .fold(0.0, f64::max);

    // wall-clock scaling on the standard config
    let standard = config("heterogeneous.toml");
    let opts = BenchOptions {
        seeds: vec![0, 1, 2],
        regimes: vec![Regime::Ver],
        rollouts: 20,
        warmup: 2,
        replicas: Some(4),
    };
    let scaling = bench(&standard, &opts).unwrap().row(Regime::Ver, 4).unwrap().scaling.unwrap();

    // rollout-time spread across replicas, per regime
    let mut spread = standard.clone();
    spread.run.clock = Clock::Virtual;
    spread.run.replicas = 4;
    let opts = BenchOptions {
        seeds: vec![0, 1],
        regimes: Regime::ALL.to_vec(),
        rollouts: 20,
        warmup: 1,
        replicas: None,
    };
    let r = bench(&spread, &opts).unwrap();
    let cv = |g| r.row(g, 4).unwrap().replica_time_cv.unwrap();
    let (cs, cn, cv_ver) = (cv(Regime::Sync), cv(Regime::NoVer), cv(Regime::Ver));

    let pass = divergence <= 1e-12 && scaling >= 3.0 && cv_ver < cs && cv_ver < cn;
    report(
        11,
        "distributed consistency",
        pass,
        &format!(
            "R=4 divergence {divergence:.1e} (<= 1e-12); R=4/R=1 SPS {scaling:.2} (>= 3); rollout-time CV ver {cv_ver:.3} < sync {cs:.3}, nover {cn:.3}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 12: stale backfill

#[test]
fn c12_stale_backfill() {
    let _g = lock();
    let mut cfg = config("delayedcue_ver.toml");
    cfg.run.replicas = 4;
    cfg.run.total_steps = 300 * cfg.steps_per_update();
    cfg.distributed.preemption = PreemptionMode::Optimal;
    cfg.distributed.replica_slowdown = vec![2.0, 1.0, 1.0, 1.0];
    let cap = cfg.rollout.capacity();
    let optimal = optimal_return(&cfg.task, cfg.ppo.gamma);
    let mut sizes_ok = true;
    let mut weights_ok = true;
    let mut stale_total = 0;
    let mut reached = Vec::new();
    for seed in [0, 1, 2] {
        let c = ver_bench::seeded(&cfg, seed, false);
        let mut session = Session::new(&c).unwrap();
        let mut records = Vec::new();
        let mut hit = None;
        for u in 0..300 {
            let it = session.step().unwrap();
            for col in &it.collected {
                sizes_ok &= col.view.len() == cap;
                stale_total += col.view.num_stale();
            }
            weights_ok &= it.stats.iter().all(|s| s.max_is_weight <= 1.0);
            records.push(it.record);
            if smoothed_returns(&records, 5).last().copied().flatten().is_some_and(|r| r >= 0.85 * optimal) {
                hit = Some(u + 1);
                break;
            }
        }
        session.finish().unwrap();
        reached.push(hit);
    }
    let pass = sizes_ok && weights_ok && stale_total > 0 && reached.iter().all(Option::is_some);
    report(
        12,
        "stale backfill",
        pass,
        &format!(
            "views of {cap} on every replica {sizes_ok}; {stale_total} stale steps, IS weights <= 1 {weights_ok}; >= 0.85 x optimal at update {reached:?}"
        ),
    );
    assert!(pass);
}

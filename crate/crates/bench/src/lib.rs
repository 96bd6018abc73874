//! Training entry points and the regime comparison harness behind the `ver`
//! command-line tool.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use ver_core::config::Regime;
use ver_core::envsim::optimal_return;
use ver_core::learner::Learner;
use ver_core::metrics::{IterationRecord, Throughput};
use ver_core::nn::PolicyParams;
use ver_core::rollout::{read_dump, replay as replay_dump};
use ver_core::seeding::{stream_key, Stream};
use ver_core::session::Session;
use ver_core::RunConfig;

/// Outcome of one training run.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub regime: Regime,
    pub replicas: usize,
    pub updates: usize,
    pub total_steps: u64,
    pub mean_sps: f64,
    pub max_sps: f64,
    pub final_return: Option<f64>,
    pub optimal_return: f64,
    pub out_dir: PathBuf,
}

/// `cfg` with the seed applied and, when several seeds run, a per-seed
/// output directory.
pub fn seeded(cfg: &RunConfig, seed: u64, suffix: bool) -> RunConfig {
    let mut c = cfg.clone();
    c.run.seed = seed;
    if suffix {
        c.run.out_dir = cfg.run.out_dir.join(format!("seed{seed}"));
    }
    c
}

/// Runs training, keeping every iteration record.
pub fn run_session(cfg: &RunConfig, outputs: bool) -> Result<Vec<IterationRecord>> {
    let mut session = Session::new(cfg)?;
    if outputs {
        session = session.with_outputs()?;
    }
    Ok(session.run()?)
}

/// Trains once per seed, writing metrics, checkpoints and a summary.
pub fn train(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<RunSummary>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let c = seeded(cfg, seed, seeds.len() > 1);
        log::info!("training {} seed {seed} -> {}", c.run.regime, c.run.out_dir.display());
        let records = run_session(&c, true)?;
        let tp = Throughput::from_iterations(&records, 1.min(records.len().saturating_sub(1)), 1);
        let summary = RunSummary {
            seed,
            regime: c.run.regime,
            replicas: c.run.replicas,
            updates: records.len(),
            total_steps: records.last().map_or(0, |r| r.cumulative_steps),
            mean_sps: tp.mean_sps,
            max_sps: tp.max_sps,
            final_return: smoothed_returns(&records, 5).last().copied().flatten(),
            optimal_return: optimal_return(&c.task, c.ppo.gamma),
            out_dir: c.run.out_dir.clone(),
        };
        let path = c.run.out_dir.join("summary.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summary)?)
            .with_context(|| format!("writing {}", path.display()))?;
        out.push(summary);
    }
    Ok(out)
}

/// Per-iteration returns, carried forward through iterations in which no
/// episode finished, then averaged over a trailing window.
pub fn smoothed_returns(records: &[IterationRecord], window: usize) -> Vec<Option<f64>> {
    let mut last = None;
    let filled: Vec<Option<f64>> = records
        .iter()
        .map(|r| {
            if r.mean_return.is_some() {
                last = r.mean_return;
            }
            last
        })
        .collect();
    (0..filled.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window.max(1));
            let vals: Vec<f64> = filled[lo..=i].iter().flatten().copied().collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

/// Settings of a throughput comparison.
#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub seeds: Vec<u64>,
    pub regimes: Vec<Regime>,
    /// Iterations measured per seed after warm-up.
    pub rollouts: usize,
    pub warmup: usize,
    /// Also measure every regime with this many replicas.
    pub replicas: Option<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            seeds: vec![0, 1, 2],
            regimes: Regime::ALL.to_vec(),
            rollouts: 34,
            warmup: 2,
            replicas: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub regime: Regime,
    pub replicas: usize,
    pub seeds: usize,
    pub iterations: usize,
    pub mean_sps: f64,
    pub max_sps: f64,
    pub mean_over_max: f64,
    /// Per-seed mean/max ratios, for seed-wise comparisons.
    #[serde(skip)]
    pub seed_mean_over_max: Vec<f64>,
    pub speedup_vs_sync: Option<f64>,
    pub speedup_vs_nover: Option<f64>,
    /// Relative to the single-replica run of the same regime.
    pub scaling: Option<f64>,
    /// Mean coefficient of variation of rollout time across replicas.
    pub replica_time_cv: Option<f64>,
    pub learn_time: f64,
    pub collect_time: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// (regime, per-env count) -> occurrences over all measured rollouts.
    pub count_histogram: BTreeMap<(Regime, usize), usize>,
}

impl BenchReport {
    pub fn row(&self, regime: Regime, replicas: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.regime == regime && r.replicas == replicas)
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut w = csv::Writer::from_path(dir.join("bench.csv"))?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        let mut h = csv::Writer::from_path(dir.join("env_counts.csv"))?;
        h.write_record(["regime", "count", "occurrences"])?;
        for ((regime, count), n) in &self.count_histogram {
            h.write_record([regime.name().to_string(), count.to_string(), n.to_string()])?;
        }
        h.flush()?;
        Ok(())
    }
}

/// Accumulates one regime/replica cell across seeds.
#[derive(Default)]
struct Measured {
    runs: Vec<Throughput>,
    seed_ratios: Vec<f64>,
    cvs: Vec<f64>,
    learn: f64,
    collect: f64,
    n: usize,
}

impl Measured {
    fn run(
        &mut self,
        cfg: &RunConfig,
        regime: Regime,
        replicas: usize,
        seed: u64,
        opts: &BenchOptions,
        histogram: &mut BTreeMap<(Regime, usize), usize>,
    ) -> Result<()> {
        let mut c = seeded(cfg, seed, false);
        c.run.regime = regime;
        c.run.replicas = replicas;
        c.run.max_updates = Some((opts.warmup + opts.rollouts) as u64);
        let mut session = Session::new(&c)?;
        let mut records = Vec::new();
        for u in 0..opts.warmup + opts.rollouts {
            let it = session.step()?;
            if u >= opts.warmup {
                for col in &it.collected {
                    for &count in &col.timing.per_env_counts {
                        *histogram.entry((regime, count)).or_insert(0) += 1;
                    }
                }
                if replicas > 1 {
                    let times: Vec<f64> = it.collected.iter().map(|c| c.timing.wall_time).collect();
                    let mean = times.iter().sum::<f64>() / times.len() as f64;
                    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64;
                    self.cvs.push(var.sqrt() / mean);
                }
                self.learn += it.record.learn_time;
                self.collect += it.record.collect_time;
                self.n += 1;
            }
            records.push(it.record);
        }
        session.finish()?;
        let tp = Throughput::from_iterations(&records, opts.warmup, 1);
        log::info!(
            "{regime} x{replicas} seed {seed}: mean {:.0} max {:.0} SPS",
            tp.mean_sps,
            tp.max_sps
        );
        self.seed_ratios.push(tp.mean_over_max());
        self.runs.push(tp);
        Ok(())
    }

    fn row(self, regime: Regime, replicas: usize) -> BenchRow {
        let throughput = Throughput::pooled(&self.runs);
        BenchRow {
            regime,
            replicas,
            seeds: self.runs.len(),
            iterations: throughput.iterations,
            mean_sps: throughput.mean_sps,
            max_sps: throughput.max_sps,
            mean_over_max: throughput.mean_over_max(),
            seed_mean_over_max: self.seed_ratios,
            speedup_vs_sync: None,
            speedup_vs_nover: None,
            scaling: None,
            replica_time_cv: (!self.cvs.is_empty()).then(|| self.cvs.iter().sum::<f64>() / self.cvs.len() as f64),
            learn_time: self.learn / self.n.max(1) as f64,
            collect_time: self.collect / self.n.max(1) as f64,
        }
    }
}

/// Measures every regime on every seed. Regimes are interleaved within
/// each seed so that slow drift in machine load hits all of them alike.
pub fn bench(cfg: &RunConfig, opts: &BenchOptions) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    let base_replicas = cfg.run.replicas;
    let mut cells: Vec<(Regime, usize)> = opts.regimes.iter().map(|&g| (g, base_replicas)).collect();
    if let Some(r) = opts.replicas.filter(|&r| r != base_replicas) {
        cells.extend(opts.regimes.iter().map(|&g| (g, r)));
    }
    let mut measured: Vec<Measured> = cells.iter().map(|_| Measured::default()).collect();
    let mut scratch = BTreeMap::new();
    for &seed in &opts.seeds {
        for (&(regime, replicas), m) in cells.iter().zip(&mut measured) {
            let histogram = if replicas == base_replicas {
                &mut report.count_histogram
            } else {
                &mut scratch
            };
            m.run(cfg, regime, replicas, seed, opts, histogram)?;
        }
    }
    report.rows = cells
        .iter()
        .zip(measured)
        .map(|(&(regime, replicas), m)| m.row(regime, replicas))
        .collect();
    let sps = |rows: &[BenchRow], regime: Regime, replicas: usize| {
        rows.iter()
            .find(|x| x.regime == regime && x.replicas == replicas)
            .map(|x| x.mean_sps)
    };
    let snapshot = report.rows.clone();
    for row in &mut report.rows {
        row.speedup_vs_sync = sps(&snapshot, Regime::Sync, row.replicas).map(|s| row.mean_sps / s);
        row.speedup_vs_nover = sps(&snapshot, Regime::NoVer, row.replicas).map(|s| row.mean_sps / s);
        if row.replicas != base_replicas {
            row.scaling = sps(&snapshot, row.regime, base_replicas).map(|s| row.mean_sps / s);
        }
    }
    Ok(report)
}

/// Return-versus-steps curve point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub steps: u64,
    pub seed: u64,
    pub regime: Regime,
    pub mean_return: f64,
}

/// Trains each regime on each seed and records the return curve.
pub fn compare(cfg: &RunConfig, regimes: &[Regime], seeds: &[u64]) -> Result<Vec<CurvePoint>> {
    let mut points = Vec::new();
    for &regime in regimes {
        for &seed in seeds {
            let mut c = seeded(cfg, seed, false);
            c.run.regime = regime;
            let records = run_session(&c, false)?;
            for (r, ret) in records.iter().zip(smoothed_returns(&records, 1)) {
                if let Some(mean_return) = ret {
                    points.push(CurvePoint {
                        steps: r.cumulative_steps,
                        seed,
                        regime,
                        mean_return,
                    });
                }
            }
        }
    }
    Ok(points)
}

pub fn write_curves(points: &[CurvePoint], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Result of re-running one dumped rollout through the learner.
#[derive(Clone, Debug, Serialize)]
pub struct ReplayRow {
    pub rollout: u64,
    pub steps: usize,
    pub sequences: usize,
    pub deficit: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
}

/// Rebuilds the views of a rollout dump and runs one update on each with a
/// fresh learner built from `cfg`.
pub fn replay(cfg: &RunConfig, dump: &Path) -> Result<Vec<ReplayRow>> {
    let entries = read_dump(dump).with_context(|| format!("reading {}", dump.display()))?;
    let views = replay_dump(&entries)?;
    let params = PolicyParams::init(cfg.policy_spec(), stream_key(Stream::Init, &[cfg.run.seed]));
    let mut learner = Learner::new(params, cfg.ppo.clone(), &cfg.entropy, views.len() as u64, cfg.run.seed);
    let mut rows = Vec::new();
    for view in &views {
        let stats = learner.update(view, None)?;
        rows.push(ReplayRow {
            rollout: view.rollout_index,
            steps: view.len(),
            sequences: view.sequences.len(),
            deficit: view.deficit,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
        });
    }
    Ok(rows)
}

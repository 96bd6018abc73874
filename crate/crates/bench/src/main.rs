use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ver_bench::{BenchOptions, ReplayRow};
use ver_core::config::{Clock, Regime};
use ver_core::RunConfig;

#[derive(Parser)]
#[command(name = "ver", version, about = "Rollout-regime experiments for recurrent PPO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and write metrics and checkpoints.
    Train(Common),
    /// Compare throughput of the rollout regimes.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Measured iterations per seed.
        #[arg(long, default_value_t = 34)]
        rollouts: usize,
        /// Iterations discarded before measuring.
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
    /// Write return-versus-steps curves for each regime and seed.
    Compare(Common),
    /// Re-run a dumped rollout trace through packing and one learner update.
    Replay {
        #[command(flatten)]
        common: Common,
        /// Trace written with `run.dump_rollouts = true`.
        #[arg(long)]
        dump: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Comma-separated regimes (sync, nover, ver).
    #[arg(long, value_delimiter = ',')]
    regime: Vec<String>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    virtual_clock: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if self.virtual_clock {
            cfg.run.clock = Clock::Virtual;
        }
        if let Some(dir) = &self.out_dir {
            cfg.run.out_dir = dir.clone();
        }
        Ok(cfg)
    }

    fn regimes(&self) -> Result<Vec<Regime>> {
        Ok(self.regime.iter().map(|s| Regime::parse(s)).collect::<Result<_, _>>()?)
    }

    fn seeds(&self, cfg: &RunConfig) -> Vec<u64> {
        if self.seed.is_empty() {
            vec![cfg.run.seed]
        } else {
            self.seed.clone()
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VER_LOG_LEVEL", "info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let mut cfg = common.load()?;
            match common.regimes()?.as_slice() {
                [] => {}
                [r] => cfg.run.regime = *r,
                _ => bail!("train takes a single --regime"),
            }
            if let Some(r) = common.replicas {
                cfg.run.replicas = r;
            }
            cfg.validate()?;
            for s in ver_bench::train(&cfg, &common.seeds(&cfg))? {
                println!(
                    "seed {} {}: {} updates, {} steps, {:.0} SPS, return {} (optimal {})",
                    s.seed,
                    s.regime.name(),
                    s.updates,
                    s.total_steps,
                    s.mean_sps,
                    s.final_return.map_or("n/a".into(), |r| format!("{r:.3}")),
                    s.optimal_return,
                );
            }
        }
        Command::Bench { common, rollouts, warmup } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let mut opts = BenchOptions {
                rollouts,
                warmup,
                replicas: common.replicas,
                ..Default::default()
            };
            if !common.seed.is_empty() {
                opts.seeds = common.seed.clone();
            }
            let regimes = common.regimes()?;
            if !regimes.is_empty() {
                opts.regimes = regimes;
            }
            let report = ver_bench::bench(&cfg, &opts)?;
            report.write_csv(&cfg.run.out_dir)?;
            println!("regime  replicas  mean_sps  max_sps  mean/max  vs_sync");
            for r in &report.rows {
                println!(
                    "{:<7} {:>8} {:>9.0} {:>8.0} {:>9.3} {:>8}",
                    r.regime.name(),
                    r.replicas,
                    r.mean_sps,
                    r.max_sps,
                    r.mean_over_max,
                    r.speedup_vs_sync.map_or("-".into(), |s| format!("{s:.2}")),
                );
            }
            println!("wrote {}", cfg.run.out_dir.join("bench.csv").display());
        }
        Command::Compare(common) => {
            let mut cfg = common.load()?;
            if let Some(r) = common.replicas {
                cfg.run.replicas = r;
            }
            cfg.validate()?;
            let mut regimes = common.regimes()?;
            if regimes.is_empty() {
                regimes = vec![Regime::Sync, Regime::Ver];
            }
            let points = ver_bench::compare(&cfg, &regimes, &common.seeds(&cfg))?;
            let path = cfg.run.out_dir.join("curves.csv");
            ver_bench::write_curves(&points, &path)?;
            println!("wrote {} points to {}", points.len(), path.display());
        }
        Command::Replay { common, dump } => {
            let cfg = common.load()?;
            let rows: Vec<ReplayRow> =
                ver_bench::replay(&cfg, &dump).with_context(|| format!("replaying {}", dump.display()))?;
            let mut out = csv::Writer::from_writer(std::io::stdout());
            for row in &rows {
                out.serialize(row)?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

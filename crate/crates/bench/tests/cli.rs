use std::path::Path;
use std::process::{Command, Output};

use ver_bench::{bench, compare, BenchOptions};
use ver_core::config::{Clock, Regime};
use ver_core::session::Session;
use ver_core::RunConfig;

const SMALL: &str = r#"
[run]
regime = "ver"
max_updates = 3
checkpoint_every = 1

[task]
kind = "delayed_cue"
horizon = 4

[rollout]
num_envs = 4
steps_per_env = 16

[model]
encoder_hidden = 8
rnn_hidden = 8
"#;

fn ver(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ver"))
        .args(args)
        .env("VER_LOG_LEVEL", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .count()
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}\n[distributed]\nreplica_slowdown = [1.0, 1.5]\n").replace("max_updates = 3", "max_updates = 3\nreplicas = 2"));
    let out = dir.path().join("out");
    let res = ver(&["train", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    // one record per update, one per replica rollout
    assert_eq!(lines(&out.join("iterations.jsonl")), 3);
    assert_eq!(lines(&out.join("updates.jsonl")), 6);
    assert_eq!(lines(&out.join("rollouts.jsonl")), 6);
    for f in ["checkpoint.json", "checkpoint_000001.json", "checkpoint_000003.json", "summary.json", "config.toml"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["updates"], 3);
    assert_eq!(summary["total_steps"], 3 * 2 * 64);
    // cumulative step counter is monotone
    let text = std::fs::read_to_string(out.join("iterations.jsonl")).unwrap();
    let steps: Vec<u64> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["cumulative_steps"].as_u64().unwrap())
        .collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn missing_key_fails_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("regime = \"ver\"", ""));
    let res = ver(&["train", "--config", &cfg]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("regime"), "{err}");
}

#[test]
fn every_violation_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("steps_per_env = 16", "steps_per_env = 5\nenvs_per_worker = 0").replace("rnn_hidden = 8", "rnn_hidden = 0");
    let cfg = write_config(dir.path(), &format!("{text}\n[ppo]\nminibatches = 3\n"));
    let res = ver(&["train", "--config", &cfg]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    for key in ["minibatches", "envs_per_worker", "rnn_hidden"] {
        assert!(err.contains(key), "{key} not named in: {err}");
    }
}

#[test]
fn several_seeds_get_their_own_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("max_updates = 3", "max_updates = 1"));
    let out = dir.path().join("out");
    let res = ver(&["train", "--config", &cfg, "--seed", "1,2,3", "--out-dir", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for s in 1..=3 {
        let summary = out.join(format!("seed{s}")).join("summary.json");
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
        assert_eq!(v["seed"], s);
    }
}

#[test]
fn bench_replicas_flag_adds_scaling_rows() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("kind = \"delayed_cue\"\nhorizon = 4", "kind = \"latency_only\"");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("bench");
    let res = ver(&[
        "bench", "--config", &cfg, "--virtual-clock", "--seed", "0", "--rollouts", "3", "--warmup", "1", "--replicas", "2",
        "--out-dir", out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let mut rdr = csv::Reader::from_path(out.join("bench.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert!(headers.iter().any(|h| h == "speedup_vs_sync"));
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    let replicas = headers.iter().position(|h| h == "replicas").unwrap();
    assert_eq!(rows.iter().filter(|r| &r[replicas] == "2").count(), 3);
    let scaling = headers.iter().position(|h| h == "scaling").unwrap();
    assert!(rows.iter().filter(|r| &r[replicas] == "2").all(|r| !r[scaling].is_empty()));
    assert!(lines(&out.join("env_counts.csv")) > 1);
}

#[test]
fn compare_writes_both_curve_families() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("cmp");
    let res = ver(&["compare", "--config", &cfg, "--seed", "0,1", "--out-dir", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let mut rdr = csv::Reader::from_path(out.join("curves.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["steps", "seed", "regime", "mean_return"]);
    let regimes: std::collections::BTreeSet<String> = rdr.records().map(|r| r.unwrap()[2].to_string()).collect();
    assert_eq!(regimes.into_iter().collect::<Vec<_>>(), vec!["sync", "ver"]);
}

#[test]
fn sync_curves_are_reproducible() {
    let mut cfg = RunConfig::from_toml_str(SMALL).unwrap();
    cfg.run.max_updates = Some(6);
    let a = compare(&cfg, &[Regime::Sync], &[3]).unwrap();
    let b = compare(&cfg, &[Regime::Sync], &[3]).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn replay_runs_dumped_rollouts_through_the_learner() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("checkpoint_every = 1", "dump_rollouts = true"));
    let out = dir.path().join("out");
    let res = ver(&["train", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let dump = out.join("rollouts_r0.jsonl");
    let res = ver(&["replay", "--config", &cfg, "--dump", dump.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let mut rdr = csv::Reader::from_reader(res.stdout.as_slice());
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| &r[1] == "64"));
}

#[test]
fn regimes_see_identical_latency_traces() {
    let mut cfg = RunConfig::from_toml_str(SMALL).unwrap();
    cfg.run.clock = Clock::Virtual;
    cfg.latency = ver_core::envsim::LatencyModel::heterogeneous();
    let trace = |regime| {
        let mut c = cfg.clone();
        c.run.regime = regime;
        let mut s = Session::new(&c).unwrap();
        let it = s.step().unwrap();
        let mut t: Vec<(usize, u64, usize, u64)> = it.collected[0]
            .view
            .steps
            .iter()
            .map(|st| (st.env_index, st.episode, st.t, st.latency.to_bits()))
            .collect();
        t.sort_unstable();
        t
    };
    let sync = trace(Regime::Sync);
    let ver = trace(Regime::Ver);
    let common = sync.iter().filter(|k| ver.binary_search(k).is_ok()).count();
    let same_key = sync
        .iter()
        .filter(|k| ver.iter().any(|v| (v.0, v.1, v.2) == (k.0, k.1, k.2)))
        .count();
    // wherever both regimes took the same step, its latency is identical
    assert_eq!(common, same_key);
    assert!(common > 0);
}

#[test]
fn bench_rows_cover_every_regime() {
    let mut cfg = RunConfig::from_toml_str(&SMALL.replace("kind = \"delayed_cue\"\nhorizon = 4", "kind = \"latency_only\"")).unwrap();
    cfg.run.clock = Clock::Virtual;
    let opts = BenchOptions {
        seeds: vec![0],
        rollouts: 2,
        warmup: 1,
        ..Default::default()
    };
    let r = bench(&cfg, &opts).unwrap();
    assert_eq!(r.rows.len(), 3);
    for row in &r.rows {
        assert!(row.mean_sps > 0.0 && row.mean_sps <= row.max_sps * (1.0 + 1e-12));
    }
    assert_eq!(r.row(Regime::Sync, 1).unwrap().speedup_vs_sync, Some(1.0));
}

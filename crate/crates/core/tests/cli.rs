use std::fs;
use std::path::{Path, PathBuf};

use eftd::cli::{run_cli, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, EXIT_VERIFY_FAILED};
use eftd::env_model::Environment;
use eftd::trace::CsvTable;
use serde_json::{json, Value};

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["eftd"];
    full.extend_from_slice(args);
    run_cli(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_env(dir: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["gen-env", "--n", "30", "--K", "4", "--gamma", "0.6", "--seed", "3", "--out", s(dir)];
    args.extend_from_slice(extra);
    cli(&args)
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn small_config() -> Value {
    json!({
        "schema_version": 1,
        "env": {"path": "env.json"},
        "algorithm": "ef_td",
        "sampler": "markov",
        "compressor": "topk:2",
        "alpha": 0.05,
        "T": 2000,
        "trials": 3,
        "record_every": 20,
        "seed": 5
    })
}

#[test]
fn gen_env_is_deterministic_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(gen_env(&a, &[]), EXIT_OK);
    assert_eq!(gen_env(&b, &[]), EXIT_OK);
    for f in ["env.json", "ground_truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let env = Environment::from_json(&fs::read_to_string(a.join("env.json")).unwrap()).unwrap();
    assert_eq!((env.n(), env.k()), (30, 4));
    let truth: Value = serde_json::from_str(&fs::read_to_string(a.join("ground_truth.json")).unwrap()).unwrap();
    let ss = env.steady_state().unwrap();
    let star: Vec<f64> = serde_json::from_value(truth["theta_star"].clone()).unwrap();
    assert_eq!(star, ss.theta_star.iter().copied().collect::<Vec<_>>());
}

#[test]
fn gen_env_rejects_square_features() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["gen-env", "--n", "10", "--K", "10", "--out", s(tmp.path())]), EXIT_USAGE);
    assert!(!tmp.path().join("env.json").exists());
}

#[test]
fn gen_env_rejects_inverted_reward_range() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gen_env(tmp.path(), &["--reward-lo", "2", "--reward-hi", "1"]), EXIT_USAGE);
}

#[test]
fn corrupted_environment_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gen_env(tmp.path(), &[]), EXIT_OK);
    let path = tmp.path().join("env.json");
    let mut env: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    env["P"][0][0] = json!(env["P"][0][0].as_f64().unwrap() + 0.25);
    fs::write(&path, env.to_string()).unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    assert_eq!(cli(&["run", "--config", s(&cfg), "--out", s(&tmp.path().join("out"))]), EXIT_USAGE);
    assert_eq!(cli(&["verify", "--env", s(&path), "--trials", "100"]), EXIT_USAGE);
}

#[test]
fn run_writes_trials_and_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gen_env(tmp.path(), &[]), EXIT_OK);
    let cfg = write_config(tmp.path(), &small_config());
    let out = tmp.path().join("out");
    assert_eq!(cli(&["run", "--config", s(&cfg), "--out", s(&out)]), EXIT_OK);
    for i in 0..3 {
        let table = CsvTable::parse(&fs::read_to_string(out.join(format!("trial_{i:03}.csv"))).unwrap()).unwrap();
        let t = table.column("t").unwrap();
        assert_eq!(t.len(), 101);
        assert_eq!(*t.last().unwrap(), 2000.0);
        let bits = table.column("bits").unwrap();
        assert!(bits.windows(2).all(|w| w[1] >= w[0]));
    }
    let agg = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert!(agg.lines().count() > 100);
    let again = tmp.path().join("again");
    assert_eq!(cli(&["--workers", "2", "run", "--config", s(&cfg), "--out", s(&again)]), EXIT_OK);
    assert_eq!(fs::read(out.join("aggregate.csv")).unwrap(), fs::read(again.join("aggregate.csv")).unwrap());
}

#[test]
fn seed_override_changes_output() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gen_env(tmp.path(), &[]), EXIT_OK);
    let cfg = write_config(tmp.path(), &small_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(cli(&["run", "--config", s(&cfg), "--out", s(&a)]), EXIT_OK);
    assert_eq!(cli(&["run", "--config", s(&cfg), "--seed", "6", "--out", s(&b)]), EXIT_OK);
    assert_ne!(fs::read(a.join("trial_000.csv")).unwrap(), fs::read(b.join("trial_000.csv")).unwrap());
}

#[test]
fn unknown_key_and_bad_values_exit_with_usage() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gen_env(tmp.path(), &[]), EXIT_OK);
    let mut cfg = small_config();
    cfg["stepsize"] = json!(0.1);
    let path = write_config(tmp.path(), &cfg);
    assert_eq!(cli(&["run", "--config", s(&path)]), EXIT_USAGE);

    let mut cfg = small_config();
    cfg["alpha"] = json!(1.5);
    let path = write_config(tmp.path(), &cfg);
    assert_eq!(cli(&["run", "--config", s(&path)]), EXIT_USAGE);

    let mut cfg = small_config();
    cfg["compressor"] = json!("topk:9");
    let path = write_config(tmp.path(), &cfg);
    assert_eq!(cli(&["run", "--config", s(&path), "--out", s(&tmp.path().join("o"))]), EXIT_USAGE);

    assert_eq!(cli(&["run", "--preset", "fig9"]), EXIT_USAGE);
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gen_env(tmp.path(), &[]), EXIT_OK);
    let mut cfg = small_config();
    cfg["theta0"] = json!([1e7, 1e7, 1e7, 1e7]);
    let path = write_config(tmp.path(), &cfg);
    assert_eq!(cli(&["run", "--config", s(&path), "--out", s(&tmp.path().join("out"))]), EXIT_DIVERGED);
}

#[test]
fn verify_passes_on_generated_environment() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gen_env(tmp.path(), &[]), EXIT_OK);
    let code = cli(&["verify", "--env", s(&tmp.path().join("env.json")), "--trials", "500"]);
    assert_eq!(code, EXIT_OK);
    assert_ne!(code, EXIT_VERIFY_FAILED);
}

#[test]
fn sweep_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gen_env(tmp.path(), &[]), EXIT_OK);
    let mut cfg = small_config();
    cfg["sampler"] = json!("mean_path");
    cfg["trials"] = json!(1);
    cfg["T"] = json!(3000);
    let path = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("sweep");
    assert_eq!(cli(&["sweep", "--config", s(&path), "--axis", "k", "--values", "1,2,4", "--out", s(&out)]), EXIT_OK);
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.iter().map(|r| r[1]).collect::<Vec<_>>(), ["1", "2", "4"]);
    assert!(rows.iter().all(|r| r[0] == "k" && r[7] == "false"));
    let rates: Vec<f64> = rows.iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(rates.iter().all(|r| *r > 0.0 && *r <= 1.0));

    let report = tmp.path().join("report.csv");
    assert_eq!(cli(&["report", s(&out.join("k_4")), "--out", s(&report)]), EXIT_OK);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 3, "{text}");
    assert_eq!(cli(&["report", s(&tmp.path().join("missing"))]), EXIT_USAGE);
}

#[test]
fn sweep_rejects_delta_that_does_not_divide() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gen_env(tmp.path(), &[]), EXIT_OK);
    let path = write_config(tmp.path(), &small_config());
    assert_eq!(cli(&["sweep", "--config", s(&path), "--axis", "delta", "--values", "3"]), EXIT_USAGE);
}

#[test]
fn multi_agent_config_runs() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gen_env(tmp.path(), &[]), EXIT_OK);
    let mut cfg = small_config();
    cfg["algorithm"] = json!("multi_agent");
    cfg["sampler"] = json!("iid");
    cfg["M"] = json!(4);
    cfg["averaging"] = json!({"enabled": true});
    let path = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("out");
    assert_eq!(cli(&["run", "--config", s(&path), "--out", s(&out)]), EXIT_OK);
    let table = CsvTable::parse(&fs::read_to_string(out.join("trial_000.csv")).unwrap()).unwrap();
    assert!(table.column("M").unwrap().iter().all(|m| *m == 4.0));
    let bits = table.column("uplink_bits_cum").unwrap();
    assert_eq!(*bits.last().unwrap(), (2000 * 4 * 2 * (32 + 2)) as f64);
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kdqn(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_kdqn")).args(args).output().unwrap();
    assert!(out.status.success(), "kdqn {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg: serde_json::Value = serde_json::from_str(&stdout(&kdqn(&["config", "--preset", "desk"]))).unwrap();
    cfg["kan"]["hidden"] = serde_json::json!([8, 8]);
    cfg["train"]["warmup"] = serde_json::json!(50);
    cfg["trace_last_episode"] = serde_json::json!(true);
    let path = dir.join("small.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn presets_differ_only_where_expected() {
    let parse = |p: &str| serde_json::from_str::<serde_json::Value>(&stdout(&kdqn(&["config", "--preset", p]))).unwrap();
    let (default, desk, full) = (parse("default"), parse("desk"), parse("full"));
    assert_eq!(default["kan"]["hidden"], serde_json::json!([64, 64]));
    assert_eq!(desk["kan"]["hidden"], serde_json::json!([32, 32]));
    assert_eq!(full["train"]["total_episodes"], serde_json::json!(10_000));
    assert_eq!(default["mpc"], desk["mpc"]);
}

#[test]
fn train_eval_report_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let runs = tmp.path().join("runs");
    let out = kdqn(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--seeds",
        "0,1",
        "--episodes",
        "3",
        "--output",
        runs.to_str().unwrap(),
    ]);
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 2, "{text}");
    assert!(text.contains("full seed 0") && text.contains("full seed 1"));

    let seed0 = runs.join("full").join("seed_0");
    for f in ["metrics.csv", "checkpoint.json", "trace.jsonl"] {
        assert!(seed0.join(f).exists(), "missing {f}");
    }
    assert!(runs.join("full").join("manifest.json").exists());
    let rows = fs::read_to_string(seed0.join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);

    let ck = seed0.join("checkpoint.json");
    let metrics: serde_json::Value =
        serde_json::from_str(&stdout(&kdqn(&["eval", "--checkpoint", ck.to_str().unwrap(), "--scenario", "hard", "--episodes", "2"])))
            .unwrap();
    let rate = metrics["collision_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    let eval_csv = seed0.join("eval_hard").join("metrics.csv");
    assert_eq!(fs::read_to_string(&eval_csv).unwrap().lines().count(), 3);

    let plots = tmp.path().join("plots");
    let listed = stdout(&kdqn(&["report", "--in", runs.to_str().unwrap(), "--out", plots.to_str().unwrap()]));
    for f in ["return.svg", "speed.svg", "collision_rate.svg", "collision_rates.csv", "performance.csv"] {
        assert!(plots.join(f).exists(), "missing {f}");
        assert!(listed.contains(f));
    }
    assert!(fs::read_to_string(plots.join("return.svg")).unwrap().starts_with("<svg"));

    let table = stdout(&kdqn(&["replay", "--trace", seed0.join("trace.jsonl").to_str().unwrap()]));
    let trace_lines = fs::read_to_string(seed0.join("trace.jsonl")).unwrap().lines().filter(|l| !l.trim().is_empty()).count();
    assert_eq!(table.lines().count(), trace_lines + 1);
    assert!(table.lines().next().unwrap().contains("executed"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = Command::new(env!("CARGO_BIN_EXE_kdqn")).args(["train", "--config", missing.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));

    let config = small_config(tmp.path());
    let out = Command::new(env!("CARGO_BIN_EXE_kdqn"))
        .args(["train", "--config", config.to_str().unwrap(), "--ablation", "bogus"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn safeal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safeal"))
        .args(args)
        .env("SAFEAL_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const TINY_TRAIN: &str = r#"
seeds = [3]
[train]
objective = "I"
dim = 1
budget = 3
n_init = 1
n_k = 1
n_fq = 1
b = 1
n_grid = 10
n_features = 20
embed_dim = 8
hidden = 8
mode = "deep-set"
total_steps = 4
epoch_length = 2
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn gradcheck_passes_and_catches_sign_flips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let ok = safeal(&["gradcheck", "--out", out]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 14);
    let bad = safeal(&["gradcheck", "--out", out, "--set", "gradcheck.flip_sign=true"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn train_refuses_overwrite_and_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_TRAIN);
    let before = std::fs::read(&cfg).unwrap();
    let full = dir.path().join("full.ckpt");
    let full_s = full.to_str().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let r = safeal(&["train", "--config", &cfg, "--out", out_s, "--checkpoint", full_s]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(std::fs::read(&cfg).unwrap(), before);

    let again = safeal(&["train", "--config", &cfg, "--out", out_s, "--checkpoint", full_s]);
    assert_eq!(again.status.code(), Some(1));
    let forced = safeal(&["train", "--config", &cfg, "--out", out_s, "--checkpoint", full_s, "--force"]);
    assert!(forced.status.success());

    let half = dir.path().join("half.ckpt");
    let half_s = half.to_str().unwrap();
    let r = safeal(&["train", "--config", &cfg, "--out", out_s, "--checkpoint", half_s, "--set", "train.total_steps=2"]);
    assert!(r.status.success());
    let resumed = dir.path().join("resumed.ckpt");
    let r = safeal(&[
        "train",
        "--out",
        out_s,
        "--seed",
        "3",
        "--checkpoint",
        resumed.to_str().unwrap(),
        "--set",
        &format!("train.resume_from=\"{half_s}\""),
        "--set",
        "train.total_steps=4",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(std::fs::read(&resumed).unwrap(), std::fs::read(&full).unwrap());

    let summary = lines(&out.join("train.jsonl"));
    assert_eq!(summary[0]["kind"], "train");
    assert_eq!(summary[0]["steps"], 4);
    assert_eq!(summary[0]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn deploy_records_are_reproducible_and_report_matches() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let args = [
        "deploy", "--out", out_s, "--problem", "sin", "--method", "gp_al,random", "--budget", "4",
        "--set", "seeds=[0, 1]", "--set", "deploy.discretization=300",
    ];
    let r = safeal(&args);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let first = lines(&out.join("deploy.jsonl"));
    assert_eq!(first.len(), 4);
    let r = safeal(&args);
    assert!(r.status.success());
    let second = lines(&out.join("deploy.jsonl"));
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a["config_hash"], b["config_hash"]);
        assert_eq!(a["payload"], b["payload"]);
        assert_eq!(a["payload"]["queries"].as_array().unwrap().len(), 4);
    }

    let r = safeal(&["report", out.join("deploy.jsonl").to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rows = lines(&out.join("report.jsonl"));
    assert_eq!(rows.len(), 2);
    for row in &rows {
        let runs: Vec<&Value> = first.iter().filter(|r| r["method"] == row["method"]).collect();
        let mean = runs.iter().map(|r| r["payload"]["rmse"].as_f64().unwrap()).sum::<f64>() / 2.0;
        assert!((row["rmse_mean"].as_f64().unwrap() - mean).abs() < 1e-15);
        let t = |m: &str| rows.iter().find(|r| r["method"] == m).unwrap()["mean_query_seconds"].as_f64().unwrap();
        let ratio = row["time_ratio"].as_f64().unwrap();
        assert_eq!(ratio, t(row["method"].as_str().unwrap()) / t("gp_al"));
    }
}

#[test]
fn policy_deploys_from_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_TRAIN);
    let ck = dir.path().join("p.ckpt");
    let out = dir.path().join("out");
    let r = safeal(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()]);
    assert!(r.status.success());
    let r = safeal(&[
        "bench", "--out", out.to_str().unwrap(), "--problem", "sin", "--method", "policy,random",
        "--checkpoint", ck.to_str().unwrap(), "--budget", "5",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let table = std::fs::read_to_string(out.join("bench.txt")).unwrap();
    assert!(table.contains("policy") && table.contains("random"));
    let wrong_dim = safeal(&[
        "deploy", "--out", out.to_str().unwrap(), "--problem", "branin", "--method", "policy",
        "--checkpoint", ck.to_str().unwrap(),
    ]);
    assert_eq!(wrong_dim.status.code(), Some(1));
}

#[test]
fn pool_problems_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("x1,y\n");
    for i in 0..60 {
        let x = i as f64 / 59.0;
        csv.push_str(&format!("{x},{}\n", (6.0 * x).sin()));
    }
    let data = dir.path().join("toy.csv");
    std::fs::write(&data, &csv).unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            "seeds = [0]\n[deploy]\nproblems = [\"toy\"]\nmethods = [\"gp_al\"]\nbudget = 6\n[pool.toy]\npath = \"{}\"\ndim = 1\nn_test = 10\n",
            data.display()
        ),
    );
    let out = dir.path().join("out");
    let r = safeal(&["deploy", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rec = &lines(&out.join("deploy.jsonl"))[0];
    let idx = rec["payload"]["pool_indices"].as_array().unwrap();
    assert_eq!(idx.len(), 6);
    assert_eq!(std::fs::read_to_string(&data).unwrap(), csv);
}

#[test]
fn sample_tasks_writes_one_record_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let r = safeal(&[
        "sample-tasks", "--out", out.to_str().unwrap(), "--set", "seeds=[0, 1]", "--set", "sample_tasks.count=3",
        "--set", "sample_tasks.safe=true", "--set", "sample_tasks.dim=2",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let tasks = lines(&out.join("tasks.jsonl"));
    assert_eq!(tasks.len(), 6);
    assert!(tasks.iter().all(|t| t["task"]["initial"]["outputs"].as_array().unwrap().len() == 5));
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["deploy", "--out", out, "--problem", "sin", "--method", "bogus"],
        vec!["deploy", "--out", out, "--problem", "nowhere", "--method", "gp_al"],
        vec!["deploy", "--out", out, "--problem", "sin", "--method", "policy"],
        vec!["train", "--out", out, "--set", "train.nonsense=1"],
        vec!["train", "--out", out, "--set", "whatever=1"],
        vec!["train", "--config", "/nonexistent/config.toml"],
        vec!["deploy", "--no-such-flag"],
    ];
    for args in cases {
        let r = safeal(&args);
        assert_eq!(r.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(safeal(&["--help"]).status.code(), Some(0));
}

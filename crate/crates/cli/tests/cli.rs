//! End-to-end runs of the `andft` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Small config; `extra` keys override the defaults.
    fn config(&self, name: &str, extra: Value) -> PathBuf {
        let mut cfg = json!({
            "seed": 1,
            "data_seed": 1,
            "dataset_dir": self.path("data"),
            "output_dir": self.path(&format!("out_{name}")),
            "H": 8, "W": 8, "M_train": 500, "M_test": 100,
            "iterations": 40,
            "eval_every": 20,
        });
        for (k, v) in extra.as_object().unwrap() {
            cfg[k] = v.clone();
        }
        let path = self.path(&format!("{name}.json"));
        std::fs::write(&path, cfg.to_string()).unwrap();
        path
    }
}

fn andft(args: &[&Path]) -> Output {
    andft_env(args, &[])
}

fn andft_env(args: &[&Path], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_andft"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn sub(name: &str) -> &Path {
    Path::new(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), stderr(&o));
    o
}

fn without_last_column(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(h, _)| h).to_string()).collect()
}

#[test]
fn gen_data_is_deterministic() {
    let ws = Workspace::new();
    let cfg = ws.config("gen", json!({}));
    ok(andft(&[sub("gen-data"), &cfg]));
    let meta: Value = serde_json::from_slice(&std::fs::read(ws.path("data/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["M_train"], 500);
    assert_eq!(meta["k"], 3);
    let first = std::fs::read(ws.path("data/samples.bin")).unwrap();
    ok(andft(&[sub("gen-data"), &cfg]));
    assert_eq!(first, std::fs::read(ws.path("data/samples.bin")).unwrap());
}

#[test]
fn config_errors_exit_with_code_2() {
    let ws = Workspace::new();
    let mut nuisances = serde_json::to_value(andft_core::data_synth::default_nuisances()).unwrap();
    nuisances[1]["train_marginal"] = json!([0.5, 0.6, 0.1]);
    let cfg = ws.config("bad_marginal", json!({ "nuisances": nuisances }));
    let o = andft(&[sub("gen-data"), &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nuisances[1].train_marginal"), "{}", stderr(&o));

    let cfg = ws.config("unknown_key", json!({ "learning_rate": 0.1 }));
    let o = andft(&[sub("train"), &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let cfg = ws.config("bad_beta", json!({ "trainer": "andft", "beta": 1.0 }));
    let o = andft(&[sub("train"), &cfg]);
    assert!(!o.status.success());
}

#[test]
fn missing_dataset_exits_with_code_3() {
    let ws = Workspace::new();
    let cfg = ws.config("nodata", json!({}));
    let o = andft(&[sub("train"), &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));
}

#[test]
fn baseline_train_eval_round_trip() {
    let ws = Workspace::new();
    let cfg = ws.config("base", json!({ "trainer": "baseline" }));
    ok(andft(&[sub("gen-data"), &cfg]));
    let o = ok(andft(&[sub("train"), &cfg]));
    let last = stdout(&o).lines().last().unwrap().to_string();
    assert!(last.ends_with("backbone_forwards=40"), "{last}");

    let metrics = std::fs::read_to_string(ws.path("out_base/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,loss_o,adv_loss,acc_n_1,acc_n_2,acc_n_3,backbone_forwards,elapsed_seconds"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 40);
    assert!(rows[39].starts_with("40,"));

    let report = std::fs::read_to_string(ws.path("out_base/report.csv")).unwrap();
    let o = ok(andft(&[sub("eval"), &cfg, &ws.path("out_base/checkpoint")]));
    assert_eq!(stdout(&o), report);
}

#[test]
fn inner_cap_is_reported_on_stderr() {
    let ws = Workspace::new();
    let cfg = ws.config("cap", json!({ "trainer": "ndft", "alpha": 0.99, "max_inner_iters": 1, "iterations": 5 }));
    ok(andft(&[sub("gen-data"), &cfg]));
    let o = ok(andft(&[sub("train"), &cfg]));
    assert!(stderr(&o).contains("after 1 inner iterations"), "{}", stderr(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    let forwards: u64 = last.rsplit('=').next().unwrap().parse().unwrap();
    assert!((5..=10).contains(&forwards), "{last}");
}

#[test]
fn divergent_run_exits_with_code_4_and_keeps_partial_metrics() {
    let ws = Workspace::new();
    let cfg = ws.config("nan", json!({ "trainer": "baseline", "eta_u": 1e150 }));
    ok(andft(&[sub("gen-data"), &cfg]));
    let o = andft(&[sub("train"), &cfg]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(ws.path("out_nan/metrics.csv")).unwrap();
    assert!(metrics.lines().count() < 41);
}

fn forwards_ratio(o: &Output) -> f64 {
    let line = stdout(o).lines().find(|l| l.starts_with("forwards_ratio")).unwrap().to_string();
    line.rsplit('=').next().unwrap().parse().unwrap()
}

#[test]
fn compare_reports_forward_ratio() {
    let ws = Workspace::new();
    let cfg = ws.config("cmp", json!({}));
    ok(andft(&[sub("gen-data"), &cfg]));
    let o = ok(andft(&[sub("compare"), &cfg]));
    assert!(forwards_ratio(&o) >= 2.0, "{}", stdout(&o));
    for f in ["compare.csv", "report.csv", "probe.csv", "metrics_baseline.csv", "metrics_ndft.csv", "metrics_andft.csv"] {
        assert!(ws.path("out_cmp").join(f).exists(), "{f}");
    }
    let compare = std::fs::read_to_string(ws.path("out_cmp/compare.csv")).unwrap();
    assert_eq!(compare.lines().next().unwrap(), "trainer,t,elapsed_seconds,backbone_forwards,test_accuracy");
    // evaluations at t = 20 and 40 for each trainer
    assert_eq!(compare.lines().count(), 1 + 3 * 2);

    let cfg = ws.config("cmp_off", json!({ "alpha": -1.0 }));
    let o = ok(andft(&[sub("compare"), &cfg]));
    assert_eq!(forwards_ratio(&o), 1.0);
}

#[test]
fn compare_is_independent_of_thread_count() {
    let ws = Workspace::new();
    let one = ws.config("t1", json!({}));
    let four = ws.config("t4", json!({}));
    ok(andft(&[sub("gen-data"), &one]));
    ok(andft_env(&[sub("compare"), &one], &[("ANDFT_THREADS", "1")]));
    ok(andft_env(&[sub("compare"), &four], &[("ANDFT_THREADS", "4")]));
    for f in ["metrics_baseline.csv", "metrics_ndft.csv", "metrics_andft.csv"] {
        let a = std::fs::read_to_string(ws.path("out_t1").join(f)).unwrap();
        let b = std::fs::read_to_string(ws.path("out_t4").join(f)).unwrap();
        assert_eq!(without_last_column(&a), without_last_column(&b), "{f}");
    }
    for f in ["report.csv", "probe.csv"] {
        assert_eq!(
            std::fs::read_to_string(ws.path("out_t1").join(f)).unwrap(),
            std::fs::read_to_string(ws.path("out_t4").join(f)).unwrap(),
            "{f}"
        );
    }
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_duality-nets"));
    c.env_remove("DUALITY_NETS_THREADS");
    c
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(experiment: &str, config: Option<&Path>, out: &Path, extra: &[&str]) -> Output {
    let mut c = bin();
    c.arg(experiment).arg("--out").arg(out);
    if let Some(cfg) = config {
        c.arg("--config").arg(cfg);
    }
    c.args(extra).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config_error(body: &str) -> String {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", body);
    let o = run("train", Some(&cfg), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists(), "no artifacts on config errors");
    stderr(&o)
}

#[test]
fn config_errors_carry_json_pointers() {
    assert!(config_error(r#"{"experiment":"train","arch":{"widths":[4,"x"]}}"#).contains("/arch/widths/1"));
    assert!(config_error(r#"{"experiment":"train","train":{"learning_rate":-1}}"#).contains("/train/learning_rate"));
    assert!(config_error(r#"{"experiment":"train","dataset":{"csv":"missing.csv"}}"#).contains("/dataset/csv"));
    assert!(config_error(r#"{"experiment":"train","arch":{"depth":3,"widths":[2]}}"#).contains("/arch/widths"));
    assert!(config_error(r#"{"experiment":"train","dataset":{"n":10,"colour":1}}"#).contains("/dataset"));
    assert!(config_error(r#"{"experiment":"fig1_spline"}"#).contains("/experiment"));
    assert!(config_error(r#"{"experiment":"train","beta_sweep":{"from":1,"to":2}}"#).contains("/beta_sweep"));
    assert!(config_error("{not json").contains("config error"));
}

#[test]
fn bad_arguments_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("fig9", None, dir.path(), &[]).status.code(), Some(2));
    let o = bin().env("DUALITY_NETS_THREADS", "lots").args(["train", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("DUALITY_NETS_THREADS"));
}

#[test]
fn report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nc");
    let o = run("neural_collapse", None, &out, &["--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["experiment"], "neural_collapse");
    assert_eq!(report["pass"], true);
    assert_eq!(report["config_echo"]["seed"], 4);
    assert!(report["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(report["metrics"].as_object().unwrap().contains_key("alpha_error_n60_k10"));
    let asserts = report["assertions"].as_array().unwrap();
    assert_eq!(asserts.len(), 9);
    for a in asserts {
        for key in ["name", "relation", "expected", "actual", "tol", "pass"] {
            assert!(a.get(key).is_some(), "assertion lacks {key}: {a}");
        }
    }
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("experiment,x,metric,value"));
    assert!(lines.all(|l| l.starts_with("neural_collapse,") && l.split(',').count() == 4));
    let svg = std::fs::read_to_string(out.join("plot.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn failing_assertion_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // One step cannot align the first layer with the singular directions.
    let cfg = write_config(dir.path(), "c.json", r#"{"experiment":"fig6_projections","train":{"steps":1,"probe_every":1}}"#);
    let out = dir.path().join("o");
    let o = run("fig6_projections", Some(&cfg), &out, &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], false);
    assert!(report["assertions"].as_array().unwrap().iter().any(|a| a["pass"] == false));
}

#[test]
fn runtime_errors_exit_three_with_the_library_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"experiment":"construct","construction":"rank_one_relu","dataset":{"generator":"gaussian"}}"#,
    );
    let o = run("construct", Some(&cfg), &dir.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("precondition violated"), "{}", stderr(&o));
}

#[test]
fn constructions_are_certified() {
    let dir = tempfile::tempdir().unwrap();
    for c in ["two_layer_linear", "deep_linear", "whitened_relu", "rank_one_relu", "bn_head"] {
        let cfg = write_config(dir.path(), &format!("{c}.json"), &format!(r#"{{"experiment":"construct","construction":"{c}"}}"#));
        let out = dir.path().join(c);
        let o = run("construct", Some(&cfg), &out, &[]);
        assert_eq!(o.status.code(), Some(0), "{c}: {}", stderr(&o));
        assert!(out.join("params.json").is_file() && out.join("certificate.json").is_file());
    }
    let cfg = write_config(
        dir.path(),
        "biased.json",
        r#"{"experiment":"construct","construction":"rank_one_relu","arch":{"depth":2,"bias":true}}"#,
    );
    let o = run("construct", Some(&cfg), &dir.path().join("biased"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

const SMALL_FIG4: &str = r#"{
  "experiment": "fig4_whitened",
  "dataset": {"n": 12, "d": 20, "k": 3},
  "arch": {"widths": [6]},
  "depths": [3],
  "seeds": [1, 2, 3],
  "train": {"steps": 300, "batch_size": 4, "probe_every": 100}
}"#;

#[test]
fn seed_sweeps_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL_FIG4);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = run("fig4_whitened", Some(&cfg), &a, &["--threads", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = bin().env("DUALITY_NETS_THREADS", "3").args(["fig4_whitened", "--threads", "1", "--config"]).arg(&cfg).arg("--out").arg(&b).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(a.join("results.csv")).unwrap(), std::fs::read(b.join("results.csv")).unwrap());
}

#[test]
fn csv_datasets_feed_the_whitened_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("f0,f1,f2,f3,f4,f5,f6,f7,label\n");
    for i in 0..6 {
        let row: Vec<String> = (0..8).map(|j| format!("{}", ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0 + (i == j) as u8 as f64)).collect();
        text.push_str(&format!("{},{}\n", row.join(","), i % 2));
    }
    std::fs::write(dir.path().join("data.csv"), text).unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"experiment":"fig4_whitened","dataset":{"csv":"data.csv"},"arch":{"widths":[4]},"depths":[3],"seeds":[1],
            "train":{"steps":200,"batch_size":3,"probe_every":50}}"#,
    );
    let o = run("fig4_whitened", Some(&cfg), &dir.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stderr(&o), String::from_utf8_lossy(&o.stdout));
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"experiment":"train","train":{"steps":500,"batch_size":5}}"#);
    let read = |p: PathBuf| std::fs::read(p.join("results.csv")).unwrap();
    for (name, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        assert_eq!(run("train", Some(&cfg), &dir.path().join(name), &["--seed", seed]).status.code(), Some(0));
    }
    assert_eq!(read(dir.path().join("a")), read(dir.path().join("b")));
    assert_ne!(read(dir.path().join("a")), read(dir.path().join("c")));
}

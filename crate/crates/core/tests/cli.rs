//! The binary's exit codes and the files its stages write, on a
//! configuration small enough to run in seconds.

use std::path::Path;
use std::process::{Command, Output};

use steerscope::report::{schema, Table};

const TINY: &str = r#"
n_layers = 4
d_model = 32
d_head = 8
d_ff = 64
train_per_class = 32
val_per_class = 8
test_per_class = 8
train_steps = 600
fit_epochs = 2
ig_steps = 2
random_circuit_seeds = 1
taus = [0.0, 0.5]
dropout_seeds = 1
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steerscope"))
        .args(["--out", dir.to_str().unwrap()])
        .args(args)
        .output()
        .unwrap()
}

fn tiny(dir: &Path, alpha: f64) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, format!("{TINY}alpha = {alpha:?}\n")).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn unknown_command_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["exit"], 2);
}

#[test]
fn bad_configuration_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "n_layers = \"four\"\n").unwrap();
    for cfg in [bad.to_str().unwrap(), "/nonexistent/run.toml"] {
        let out = run(dir.path(), &["--config", cfg, "config"]);
        assert_eq!(out.status.code(), Some(3), "{cfg}");
        assert_eq!(stderr_json(&out)["error"], "config");
    }
}

#[test]
fn config_prints_a_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 4.0);
    let out = run(dir.path(), &["--config", &cfg, "config"]);
    assert!(out.status.success());
    let parsed = steerscope::config::RunConfig::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(parsed.train_steps, 600);
}

#[test]
fn zero_alpha_patch_gives_zero_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 0.0);
    let out = run(dir.path(), &["--config", &cfg, "patch", "--vector", "dim"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = Table::read(&dir.path().join("edges-dim.csv")).unwrap();
    assert_eq!(header, schema::EDGES);
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap() == 0.0));
}

#[test]
fn full_report_writes_every_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 4.0);
    let out = run(dir.path(), &["--config", &cfg, "report"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let d = dir.path();
    for (name, header) in [
        ("selection.csv", schema::SELECTION),
        ("train-loss.csv", schema::TRAIN_LOSS),
        ("behaviour.csv", schema::BEHAVIOUR),
        ("edges-dim.csv", schema::EDGES),
        ("nodes-po.csv", schema::NODES),
        ("dims-ntp.csv", schema::DIMS),
        ("faithfulness.csv", schema::FAITH_CURVE),
        ("circuits.csv", schema::CIRCUIT_SUMMARY),
        ("overlap.csv", schema::OVERLAP),
        ("interchange.csv", schema::INTERCHANGE),
        ("edge-dist.csv", schema::EDGE_DIST),
        ("svv-dim.csv", schema::SVV),
        ("ablation.csv", schema::ABLATION),
        ("sweep.csv", schema::SWEEP),
        ("iou.csv", schema::IOU),
    ] {
        let (got, _) = Table::read(&d.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(got, header, "{name}");
    }
    for svg in ["faithfulness.svg", "overlap.svg", "sparsity.svg", "iou.svg", "svv-dim.svg"] {
        let text = std::fs::read_to_string(d.join(svg)).unwrap();
        roxmltree::Document::parse(&text).unwrap();
    }

    // later stages reuse the saved artifacts
    let out = run(d, &["--config", &cfg, "circuit", "faith", "--full", "--vector", "dim"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let full: Vec<&str> = text.lines().filter(|l| l.contains("full graph")).collect();
    assert_eq!(full.len(), 2, "{text}");
    for line in full {
        if let Some(v) = line.rsplit_once("Some(").map(|x| x.1.trim_end_matches(')')) {
            assert!((v.parse::<f64>().unwrap() - 1.0).abs() < 1e-8, "{line}");
        }
    }
}

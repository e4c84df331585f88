use std::path::Path;
use std::process::{Command, Output};

use evacflow::training::MetricReport;
use evacflow::workflow::Manifest;

fn evacflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evacflow")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = evacflow(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(out: &Path, config: Option<&Path>, last: &str) {
    let steps = ["synth", "ingest-detectors", "ingest-movement", "build-features", "train", "transfer", "evaluate"];
    let out = out.to_str().unwrap();
    for step in steps {
        let mut args = vec![step, "--out", out];
        if let Some(c) = config {
            args.extend(["--config", c.to_str().unwrap()]);
        }
        ok(&args);
        if step == last {
            return;
        }
    }
}

fn read_report(path: &Path) -> MetricReport {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn default_config_pipeline_writes_metric_reports_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), None, "evaluate");
    for name in ["regular", "regular_on_evacuation", "transfer"] {
        let r = read_report(&dir.path().join("eval").join(format!("{name}.json")));
        assert_eq!(r.run_count, 1);
        assert_eq!(r.runs.len(), 1);
        assert!(!r.partial);
        assert_eq!(r.per_horizon_mean.len(), 6);
        assert!(r.mean.rmse > 0.0 && r.mean.r2.is_finite());
    }
    for sub in ["data", "clean", "movement", "features", "model", "transfer", "eval"] {
        let m: Manifest = serde_json::from_slice(&std::fs::read(dir.path().join(sub).join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.config_sha256, m.config.hash().unwrap());
        assert_eq!(m.seed, 42);
        for (path, sha) in &m.inputs {
            assert_eq!(&evacflow::workflow::file_sha256(Path::new(path)).unwrap(), sha);
        }
        for path in &m.outputs {
            assert!(Path::new(path).exists(), "{path}");
        }
    }
}

#[test]
fn identical_config_and_seed_give_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), None, "evaluate");
    pipeline(b.path(), None, "evaluate");
    for file in ["model/metric_report.json", "eval/regular.json", "eval/transfer.json"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs");
    }

    // The train manifest alone reproduces the run.
    let m: Manifest = serde_json::from_slice(&std::fs::read(a.path().join("model/manifest.json")).unwrap()).unwrap();
    let cfg = a.path().join("rerun.json");
    std::fs::write(&cfg, serde_json::to_string(&m.config).unwrap()).unwrap();
    std::fs::remove_dir_all(a.path().join("model")).unwrap();
    ok(&["train", "--config", cfg.to_str().unwrap()]);
    let again = std::fs::read(a.path().join("model/metric_report.json")).unwrap();
    assert!(again == std::fs::read(b.path().join("model/metric_report.json")).unwrap());
}

#[test]
fn evaluate_with_mismatched_checkpoint_reports_shape_error() {
    let a = tempfile::tempdir().unwrap();
    pipeline(a.path(), None, "train");

    let b = tempfile::tempdir().unwrap();
    let cfg = b.path().join("small.json");
    std::fs::write(&cfg, r#"{ "scenario": { "nodes_per_corridor": 4 } }"#).unwrap();
    pipeline(b.path(), Some(&cfg), "build-features");
    let model = b.path().join("model/run_0");
    std::fs::create_dir_all(&model).unwrap();
    std::fs::copy(a.path().join("model/run_0/forecaster.ckpt"), model.join("forecaster.ckpt")).unwrap();

    let out = evacflow(&["evaluate", "--config", cfg.to_str().unwrap(), "--out", b.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("shape mismatch") && err.contains("15 nodes"), "{err}");
}

#[test]
fn malformed_config_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"seed\": 1,\n  \"runs\": \"two\"\n}\n").unwrap();
    let out = evacflow(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json:3:"), "{err}");

    std::fs::write(&cfg, "{ \"sed\": 1 }").unwrap();
    let out = evacflow(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field `sed`"));
}

#[test]
fn missing_upstream_artifact_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = evacflow(&["train", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing upstream artifact") && err.contains("clean"), "{err}");
}

#[test]
fn overrides_replace_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = evacflow(&["config", "--seed", "9", "--runs", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["runs"], 3);
    assert_eq!(cfg["out_dir"], dir.path().to_str().unwrap());
    let out = evacflow(&["config", "--runs", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn diverging_training_exits_with_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("diverge.json");
    std::fs::write(
        &cfg,
        r#"{ "scenario": { "nodes_per_corridor": 2, "regular_days": 7, "evacuation_days": 2, "landfall_offset_hours": 30,
             "orders": [] },
           "model": { "hidden_size": 4, "training": { "max_epochs": 3, "adam": { "learning_rate": 1e300 } } } }"#,
    )
    .unwrap();
    pipeline(dir.path(), Some(&cfg), "build-features");
    let out = evacflow(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bundled_configs_load() {
    let dir = env!("CARGO_MANIFEST_DIR");
    for name in ["default.json", "full.json"] {
        let out = evacflow(&["config", "--config", &format!("{dir}/configs/{name}")]);
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

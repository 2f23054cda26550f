use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "dataset": { "image_size": 16, "n_train_per_class": 12, "n_val_per_class": 6,
               "n_test_per_class": 6, "patch_size": 3 },
  "train": { "epochs": 2, "batch_size": 8, "widths": [4, 4] },
  "n_runs": 1
}"#;

fn dfr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfr"))
        .args(args)
        .arg("--config")
        .arg(dir.join("config.json"))
        .arg("--out")
        .arg(dir.join("out"))
        .env("DFR_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dfr(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("config.json"), SMALL).unwrap();
    let out = dir.join("out");
    let s = |p: &str| out.join(p).to_string_lossy().into_owned();

    let text = ok(dir, &["generate"]);
    assert!(text.contains("train ["), "{text}");
    assert!(out.join("dataset.dfrt").exists() && out.join("dataset.json").exists());

    ok(dir, &["train", "--dataset", &s("dataset.dfrt")]);
    ok(dir, &["dfr", "--model", &s("erm_model.dfrt"), "--dataset", &s("dataset.dfrt")]);
    let text = ok(
        dir,
        &["eval", "--model", &s("erm_model.dfrt"), "--head", &s("dfr_head.dfrt"), "--dataset", &s("dataset.dfrt")],
    );
    assert!(text.contains("average"), "{text}");

    ok(dir, &["cam", "--model", &s("erm_model.dfrt"), "--dataset", &s("dataset.dfrt"), "--index", "0,7"]);
    assert!(out.join("test0000_class0_no_patch_cam.ppm").exists());

    let text = ok(
        dir,
        &["neurons", "--model", &s("erm_model.dfrt"), "--head", &s("dfr_head.dfrt"), "--dataset", &s("dataset.dfrt")],
    );
    assert!(text.contains("SpuriousOnly="), "{text}");
    let csv = std::fs::read_to_string(out.join("neurons.csv")).unwrap();
    assert!(csv.starts_with("k,w_erm,w_dfr,core_score,spurious_score,taxonomy"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn pipeline_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("config.json"), SMALL).unwrap();
    let text = ok(dir, &["pipeline", "--seed", "3", "--runs", "2"]);
    assert!(text.contains("run 1:"), "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["report_version"], 1);
    assert_eq!(report["runs"][1]["seeds"]["train"], 4);

    let summary = std::fs::read_to_string(dir.join("out/summary.txt")).unwrap();
    std::fs::remove_file(dir.join("out/summary.txt")).unwrap();
    ok(dir, &["report"]);
    assert_eq!(std::fs::read_to_string(dir.join("out/summary.txt")).unwrap(), summary);
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("config.json"), r#"{ "n_runs": 0 }"#).unwrap();
    let out = dfr(dir, &["pipeline"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_runs"));

    std::fs::write(dir.join("config.json"), r#"{ "unknown_field": 1 }"#).unwrap();
    assert!(!dfr(dir, &["generate"]).status.success());

    std::fs::write(dir.join("config.json"), SMALL).unwrap();
    let out = dfr(dir, &["eval", "--model", "/nonexistent/model.dfrt"]);
    assert!(!out.status.success());
}

use std::path::Path;

use dfr_core::datagen::DatasetSpec;
use dfr_core::io::{self, pnm::parse_pnm};
use dfr_core::nn::TrainConfig;
use dfr_core::pipeline::{run_pipeline, PipelineConfig, FAILURE_MARKER};

fn small_config(out: &Path) -> PipelineConfig {
    PipelineConfig {
        dataset: DatasetSpec {
            image_size: 16,
            n_train_per_class: 20,
            n_val_per_class: 10,
            n_test_per_class: 10,
            patch_size: 3,
            seed: 5,
            ..DatasetSpec::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 8,
            widths: vec![4, 6],
            ..TrainConfig::default()
        },
        n_runs: 1,
        output_dir: out.to_path_buf(),
        ..PipelineConfig::default()
    }
}

fn without_timestamp(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = io::read_json(path).unwrap();
    v.as_object_mut().unwrap().remove("timestamp");
    v
}

#[test]
fn single_run_report_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&small_config(dir.path())).unwrap();
    assert_eq!(report.report_version, 1);
    assert_eq!(report.runs.len(), 1);
    assert!(report.summary.single_run);
    assert_eq!(report.summary.table().lines().count(), 6);

    let json = without_timestamp(&dir.path().join("report.json"));
    assert_eq!(json["report_version"], 1);
    assert_eq!(json["runs"][0]["erm"]["n_per_group"], serde_json::json!([5, 5, 5, 5]));

    let mut files = report.files.clone();
    files.extend(report.runs[0].files.iter().cloned());
    for f in &files {
        let p = dir.path().join(f);
        assert!(p.exists(), "{f} missing");
        if f.ends_with(".pgm") || f.ends_with(".ppm") {
            parse_pnm(&std::fs::read(&p).unwrap()).unwrap();
        }
        if f.ends_with(".dfrt") {
            io::load_container(&p).unwrap();
        }
    }
    let cams = files.iter().filter(|f| f.contains("_cam_erm")).count();
    assert_eq!(cams, 8);
    assert!(!dir.path().join(FAILURE_MARKER).exists());
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "report.json" {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = small_config(a.path());
    cfg.n_runs = 2;
    run_pipeline(&cfg).unwrap();
    cfg.output_dir = b.path().to_path_buf();
    run_pipeline(&cfg).unwrap();

    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), tb.len());
    for ((na, ba), (nb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs");
    }
    let mut ja = without_timestamp(&a.path().join("report.json"));
    let mut jb = without_timestamp(&b.path().join("report.json"));
    // The echoed output directory is the only intended difference.
    ja["config"]["output_dir"] = serde_json::Value::Null;
    jb["config"]["output_dir"] = serde_json::Value::Null;
    assert_eq!(ja, jb);
}

#[test]
fn failing_stage_leaves_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.train.learning_rate = 1e300;
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().contains("train"), "{err}");
    let marker = std::fs::read_to_string(dir.path().join(FAILURE_MARKER)).unwrap();
    assert!(marker.contains("stage: train"), "{marker}");
}

#[test]
fn invalid_config_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("never"));
    cfg.n_runs = 0;
    assert!(run_pipeline(&cfg).is_err());
    assert!(!dir.path().join("never").exists());
}

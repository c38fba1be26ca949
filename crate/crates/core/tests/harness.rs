use std::path::Path;

use expfit::config::KeyValues;
use expfit::error::ErrorKind;
use expfit::harness::{
    compare_timing, run_pipeline, sha256_file, Latency, PipelineConfig, RunManifest, Stage, StageRecord, StageStatus,
    MANIFEST_FILE,
};

const SMALL: &str = "
synth.num_vertices = 120
synth.n_identity = 20
synth.n_expression = 10
synth.num_videos = 4
synth.frames_per_video = 40
synth.samples_per_class = 20
synth.num_subjects = 10
classify.k = 3
classify.inner_k = 2
classify.c_grid = 0.1,1
timing.frames = 50
";

fn config(extra: &str, seed: u64) -> PipelineConfig {
    let overridden: Vec<&str> = extra.lines().filter_map(|l| l.split('=').next()).map(str::trim).collect();
    let base: String = SMALL
        .lines()
        .filter(|l| !overridden.contains(&l.split('=').next().unwrap_or("").trim()))
        .map(|l| format!("{l}\n"))
        .collect();
    let kv = KeyValues::parse(&format!("{base}{extra}"), "test").unwrap();
    PipelineConfig::from_key_values(&kv, Some(seed)).unwrap()
}

fn files_under(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path.display().to_string());
        }
    }
    out
}

#[test]
fn small_run_records_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let manifest = run_pipeline(&config("", 5), &out, &["expfit".into(), "pipeline".into()]).unwrap();
    assert!(manifest.all_ok());
    assert_eq!(manifest.stages.iter().map(|s| s.stage).collect::<Vec<_>>(), Stage::ALL.to_vec());
    for (rel, digest) in &manifest.outputs {
        assert_eq!(&sha256_file(&out.join(rel)).unwrap(), digest, "{rel}");
    }
    for required in ["model.bin", "annotations.txt", "regressor.bin", "cv_report.txt", "confusion.csv", "classifier.bin"] {
        assert!(manifest.outputs.contains_key(required), "{required}");
    }
    assert!(manifest.latency.unwrap().within_budget());
    assert_eq!(RunManifest::load(&out.join(MANIFEST_FILE)).unwrap(), manifest);
    assert!(files_under(&out).iter().all(|f| !f.ends_with(".tmp")));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_pipeline(&config("", 9), &dir.path().join("a"), &[]).unwrap();
    let b = run_pipeline(&config("", 9), &dir.path().join("b"), &[]).unwrap();
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.outputs_digest(), b.outputs_digest());
    let c = run_pipeline(&config("stages = synth", 10), &dir.path().join("c"), &[]).unwrap();
    assert_ne!(a.outputs["model.bin"], c.outputs["model.bin"]);
}

#[test]
fn missing_model_fails_before_creating_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let cfg = config("stages = annotate\nmodel = /does/not/exist.bin\ntracks = /nor/this", 1);
    let err = run_pipeline(&cfg, &out, &[]).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
    assert!(!out.exists());
}

#[test]
fn annotate_without_a_model_source_is_rejected() {
    let kv = KeyValues::parse("stages = annotate,regressor", "test").unwrap();
    let err = PipelineConfig::from_key_values(&kv, None).and_then(|c| c.validate()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
}

#[test]
fn later_stages_can_consume_an_earlier_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    run_pipeline(&config("stages = synth", 3), &first, &[]).unwrap();
    let extra = format!(
        "stages = annotate,regressor\nmodel = {}\ntracks = {}",
        first.join("model.bin").display(),
        first.join("tracks").display()
    );
    let second = run_pipeline(&config(&extra, 3), &dir.path().join("second"), &[]).unwrap();
    assert!(second.all_ok());
    let model_input = second.inputs.iter().find(|(k, _)| k.starts_with("model:")).unwrap();
    assert_eq!(model_input.1, &sha256_file(&first.join("model.bin")).unwrap());
    assert!(second.outputs.contains_key("regressor.bin"));
}

#[test]
fn failing_stage_is_recorded_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    // One short video cannot feed a regressor with ten outputs.
    let cfg = config("stages = synth,annotate,regressor\nsynth.num_videos = 1", 2);
    let err = run_pipeline(&cfg, &out, &[]).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    assert!(err.to_string().contains("regressor"));
    let manifest = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    let last = manifest.stages.last().unwrap();
    assert_eq!((last.stage, last.status), (Stage::Regressor, StageStatus::Failed));
    assert!(!manifest.all_ok());
}

fn fixture(times: &[(Stage, f64)], total_ms: Option<f64>) -> RunManifest {
    RunManifest {
        stages: times
            .iter()
            .map(|&(stage, seconds)| StageRecord { stage, status: StageStatus::Ok, seconds, outputs: vec![], notes: vec![] })
            .collect(),
        latency: total_ms.map(|t| Latency { frames: 1000, regress_ms: t / 2.0, classify_ms: t / 2.0, total_ms: t }),
        ..RunManifest::default()
    }
}

#[test]
fn timing_comparison_table() {
    let a = fixture(&[(Stage::Synth, 1.0), (Stage::Annotate, 10.0)], Some(0.004));
    let b = fixture(&[(Stage::Synth, 2.0), (Stage::Classify, 3.0)], Some(0.002));
    let want = "\
stage             a (s)      b (s)      b/a
synth             1.000      2.000    2.00x
annotate         10.000          -        -
classify              -      3.000        -
frame (ms)       0.0040     0.0020    0.50x
";
    assert_eq!(compare_timing(&a, &b).to_string(), want);
}

#[test]
fn over_budget_latency_is_flagged() {
    let report = expfit::harness::timing_report(&fixture(&[(Stage::Timing, 0.5)], Some(25.0)));
    assert!(report.over_budget());
    assert!(report.to_string().contains("OVER BUDGET"));
}

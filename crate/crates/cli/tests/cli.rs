use std::path::{Path, PathBuf};
use std::process::Command;

use stemsim::dataset::Dataset;
use stemsim::evaluation::ListeningBundle;
use stemsim_cli::commands::stage_manifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stemsim"))
}

fn run_in(run: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["stemsim".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    argv.extend(["--run-dir".into(), run.display().to_string()]);
    stemsim_cli::run(argv)
}

#[test]
fn gen_data_writes_the_requested_piece_count() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    assert_eq!(run_in(&run, &["gen-data", "--pieces", "12", "--seed", "7", "--duration", "12"]), 0);
    let data = Dataset::load(&run.join("data/manifest.json")).unwrap();
    assert_eq!(data.pieces.len(), 12);
    assert_eq!(data.seed, 7);
    let m = stage_manifest(&run, "data").unwrap();
    assert_eq!(m.config["synth.seed"], 7);
    m.verify(&run.join("data")).unwrap();
}

#[test]
fn rerunning_a_stage_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    let args = ["gen-data", "--pieces", "4", "--duration", "12"];
    assert_eq!(run_in(&run, &args), 0);
    let before = std::fs::read(run.join("data/run_manifest.json")).unwrap();
    assert_eq!(run_in(&run, &args), 2);
    assert_eq!(std::fs::read(run.join("data/run_manifest.json")).unwrap(), before);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(run_in(&run, &forced), 0);
    assert!(!run.join("data.partial").exists());
    assert!(!run.join(".lock").exists());
}

#[test]
fn unknown_flag_exits_with_usage() {
    let out = bin().args(["gen-data", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train.lamda": 0.1}"#).unwrap();
    let code = run_in(&dir.path().join("r"), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(!dir.path().join("r/data").exists());
}

#[test]
fn missing_upstream_stage_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(&dir.path().join("r"), &["train"]), 2);
    assert!(!dir.path().join("r/train").exists());
    assert!(!dir.path().join("r/train.partial").exists());
}

#[test]
fn default_run_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["gen-data", "--pieces", "2", "--duration", "12", "--seed", "3"])
        .env("STEMSIM_RUN_ROOT", dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<PathBuf> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].file_name().unwrap().to_string_lossy().ends_with("-seed3"));
}

#[test]
fn full_pipeline_through_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    let cfg = dir.path().join("tiny.json");
    std::fs::write(
        &cfg,
        r#"{
            "train.epochs": 1,
            "train.pretrain_epochs": 1,
            "train.individual_epochs": 1,
            "train.n_triplets": 40,
            "tsne.iterations": 50
        }"#,
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let steps: [&[&str]; 11] = [
        &["gen-data", "--seed", "5"],
        &["make-pseudomix", "--split", "train"],
        &["make-pseudomix", "--split", "test"],
        &["pretrain-individual"],
        &["pretrain-main"],
        &["build-triplets"],
        &["train"],
        &["eval-knn"],
        &["eval-subspace"],
        &["export-viz", "--method", "pca", "--subspace", "drums"],
        &["export-listening"],
    ];
    for step in steps {
        let mut args = step.to_vec();
        args.extend(["--config", c]);
        assert_eq!(run_in(&run, &args), 0, "{step:?}");
    }
    for stage in [
        "data",
        "pseudomix-train",
        "pseudomix-test",
        "individual",
        "pretrain-main",
        "triplets",
        "train",
        "eval-knn",
        "eval-subspace",
        "viz",
        "listening",
    ] {
        let m = stage_manifest(&run, stage).unwrap();
        m.verify(&run.join(stage)).unwrap();
        assert_eq!(m.config["train.n_triplets"], 40, "{stage}");
    }
    let train = stage_manifest(&run, "train").unwrap();
    for upstream in ["pseudomix-train", "triplets", "data", "individual", "pretrain-main"] {
        let up = stage_manifest(&run, upstream).unwrap();
        assert_eq!(train.inputs[upstream], up.content_hash().unwrap());
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("eval-subspace/report.json")).unwrap()).unwrap();
    assert_eq!(report["exclusion_violations"], 0);
    let bundle: ListeningBundle =
        serde_json::from_slice(&std::fs::read(run.join("listening/answer_key.json")).unwrap()).unwrap();
    assert_eq!(bundle.sets.len(), 64);
    assert!(run.join("viz/scatter.png").exists());
}

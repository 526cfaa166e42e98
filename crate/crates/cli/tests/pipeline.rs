use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fairicl_cli::config::ExperimentConfig;
use fairicl_cli::pipeline::{Pipeline, Policy};
use fairicl_cli::PipelineError;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic")
}

fn small(output: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut sets = vec![
        format!("output=\"{}\"", output.display()),
        "runs=2".into(),
        "data.train_size=80".into(),
        "data.test_per_cell=4".into(),
        "data.synthetic.n=300".into(),
    ];
    sets.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::load(configs().join("experiment.toml"), &sets).unwrap()
}

#[test]
fn load_without_build_reports_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small(dir.path(), &[])).unwrap();
    match p.prepare(Policy::Load) {
        Err(PipelineError::MissingArtifact { stage, .. }) => assert_eq!(stage, "prepare"),
        other => panic!("expected a missing artifact, got {:?}", other.map(|_| ())),
    }
    let p = p.with_upstream(Policy::Load);
    assert!(matches!(p.augment(Policy::Build), Err(PipelineError::MissingArtifact { .. })));
}

#[test]
fn complete_stages_are_reused() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small(dir.path(), &[])).unwrap();
    let first = p.prepare(Policy::Build).unwrap();
    let train = first.stage.path("train.csv");
    let before = fs::metadata(&train).unwrap().modified().unwrap();
    let again = p.prepare(Policy::Build).unwrap();
    assert_eq!(again.stage.dir, first.stage.dir);
    assert_eq!(fs::metadata(&train).unwrap().modified().unwrap(), before);
    assert_eq!(again.train, first.train);

    let reseeded = Pipeline::new(small(dir.path(), &["seed=8"])).unwrap();
    assert_ne!(reseeded.prepare_stage().unwrap().dir, first.stage.dir);
}

#[test]
fn augment_sets_have_requested_size() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small(dir.path(), &["generation.n_tilde=50"])).unwrap();
    let a = p.augment(Policy::Build).unwrap();
    assert_eq!(a.hierarchical.size(), 50);
    assert_eq!(a.random.size(), 50);
}

#[test]
fn edited_artifact_fails_fingerprint_check() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small(dir.path(), &[])).unwrap();
    let s = p.prepare(Policy::Build).unwrap().stage;
    let train = s.path("train.csv");
    let text = fs::read_to_string(&train).unwrap();
    let (_, rest) = text.split_once('\n').unwrap();
    fs::write(&train, format!("#fingerprint=000000000000\n{rest}")).unwrap();
    let err = p.prepare(Policy::Load).map(|_| ()).unwrap_err();
    assert!(
        matches!(err, PipelineError::Core(fairicl::Error::FingerprintMismatch { .. })),
        "{err}"
    );
}

#[test]
fn binary_prepares_a_csv_written_by_synth() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("table.csv");
    let exe = env!("CARGO_BIN_EXE_fairicl");
    let status = Command::new(exe)
        .args(["synth", "--n", "200", "--data-seed", "5"])
        .arg("--schema")
        .arg(configs().join("schema.toml"))
        .arg("--out")
        .arg(&csv)
        .status()
        .unwrap();
    assert!(status.success());

    let config = dir.path().join("experiment.toml");
    let toml = format!(
        "output = \"out\"\nruns = 1\nstrategies = [\"random\"]\n\n[data]\nschema = \"{}\"\ntemplate = \"{}\"\ncsv = \"table.csv\"\ntrain_size = 60\ntest_per_cell = 3\n",
        configs().join("schema.toml").display(),
        configs().join("template.toml").display(),
    );
    fs::write(&config, toml).unwrap();
    let out = Command::new(exe).arg("-c").arg(&config).arg("prepare").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/prepare").is_dir());

    let out = Command::new(exe)
        .arg("-c")
        .arg(&config)
        .args(["--set", "data.csv=\"missing.csv\"", "prepare"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

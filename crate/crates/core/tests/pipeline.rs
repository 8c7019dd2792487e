use std::fs;
use std::path::Path;

use tfm_core::checkpoint;
use tfm_core::error::ErrorKind;
use tfm_core::experiment::{
    run_eval, run_plot, run_sample, run_train, ExperimentConfig, Metric, SampleRequest, CHECKPOINT_FILE, LOSS_FILE,
    MANIFEST_FILE, METRICS_FILE, RESIDUAL_FILE,
};
use tfm_core::sampling::TimeGrid;

const SMALL: &str = r#"
seed = 4

[dataset]
name = "MOONS"
n_points = 400

[model]
hidden_sizes = [16, 16]
time_embed = { dim = 8 }

[optimizer]
steps = 20
batch = 32
log_every = 10

[eval]
steps = [1, 2]
n_samples = 200
n_projections = 16
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let manifest = run_train(&cfg_path, &out).unwrap();

    assert_eq!(lines(&out.join(LOSS_FILE)), 1 + 20);
    assert_eq!(lines(&out.join(METRICS_FILE)), 1 + 2);
    assert_eq!(manifest.config_hash, ExperimentConfig::load(&cfg_path).unwrap().hash().unwrap());
    assert_eq!(manifest.metrics.len(), 2);
    assert!(out.join(MANIFEST_FILE).exists());
    assert!(!out.join(".tfm.lock").exists(), "lock must be released");
    let ckpt = checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert!(!ckpt.params.is_empty());
}

#[test]
fn zero_steps_writes_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &SMALL.replace("steps = 20", "steps = 0"));
    let out = dir.path().join("run");
    run_train(&cfg_path, &out).unwrap();
    assert_eq!(lines(&out.join(LOSS_FILE)), 1);
    assert!(out.join(CHECKPOINT_FILE).exists());
}

#[test]
fn sampling_honours_count_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_train(&write_config(dir.path(), SMALL), &out).unwrap();
    let ckpt = out.join(CHECKPOINT_FILE);

    let uniform =
        SampleRequest { grid: Some(TimeGrid::uniform(1).unwrap()), n: Some(37), seed: 2, ..Default::default() };
    let a = run_sample(&ckpt, &uniform, &dir.path().join("a")).unwrap();
    let explicit = SampleRequest { grid: Some(TimeGrid::parse("0,1").unwrap()), ..uniform.clone() };
    let b = run_sample(&ckpt, &explicit, &dir.path().join("b")).unwrap();
    assert_eq!(lines(&a.samples), 1 + 37);
    assert_eq!(fs::read(&a.samples).unwrap(), fs::read(&b.samples).unwrap());
    assert_eq!(fs::read(&a.panel).unwrap(), fs::read(&b.panel).unwrap());

    let five = SampleRequest { grid: Some(TimeGrid::uniform(5).unwrap()), n: Some(10), seed: 2, ..Default::default() };
    let c = run_sample(&ckpt, &five, &dir.path().join("c")).unwrap();
    // Header plus one row per point per knot.
    assert_eq!(lines(&c.trajectory), 1 + 10 * 6);

    let fig = dir.path().join("fig.svg");
    run_plot(&ckpt, &[1, 2, 5], 20, 0, &fig).unwrap();
    let svg = fs::read_to_string(&fig).unwrap();
    for title in ["steps=1", "steps=2", "steps=5"] {
        assert!(svg.contains(title), "{title} panel missing");
    }
}

#[test]
fn evaluation_reports_both_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_train(&write_config(dir.path(), SMALL), &out).unwrap();
    let ckpt = out.join(CHECKPOINT_FILE);

    let w2 = run_eval(&ckpt, Metric::SlicedW2, &[1, 2, 5], None, 0, None).unwrap();
    assert_eq!(w2.iter().map(|m| m.name.as_str()).collect::<Vec<_>>(), ["sliced_w2@1", "sliced_w2@2", "sliced_w2@5"]);
    assert!(w2.iter().all(|m| m.value.is_finite() && m.value >= 0.0));

    let eval_dir = dir.path().join("eval");
    let res = run_eval(&ckpt, Metric::IdentityResidual, &[], None, 0, Some(&eval_dir)).unwrap();
    assert_eq!(res.len(), 2);
    assert!(res[0].value > 0.0);
    assert_eq!(lines(&eval_dir.join(RESIDUAL_FILE)), 1 + 100);
}

#[test]
fn corrupt_checkpoints_are_rejected_with_an_offset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_train(&write_config(dir.path(), SMALL), &out).unwrap();
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = dir.path().join("bad.tfm1");
    fs::write(&bad, &bytes).unwrap();
    let err = run_sample(&bad, &SampleRequest::default(), &dir.path().join("s")).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Io);
    assert!(err.to_string().contains("offset"), "{err}");

    fs::write(&bad, &bytes[..mid]).unwrap();
    assert_eq!(run_sample(&bad, &SampleRequest::default(), &dir.path().join("s")).unwrap_err().kind(), ErrorKind::Io);
}

#[test]
fn bad_configs_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write_config(dir.path(), &SMALL.replace("batch = 32", "btach = 32"));
    let err = run_train(&typo, &dir.path().join("x")).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Validation);
    assert!(err.to_string().contains("optimizer"), "{err}");

    let bad_p = write_config(dir.path(), &format!("{SMALL}\n[loss]\nstabilizer_c = 0.0\n"));
    let err = run_train(&bad_p, &dir.path().join("y")).unwrap_err();
    assert!(err.to_string().contains("loss.stabilizer_c"), "{err}");
}

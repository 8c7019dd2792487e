use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 1

[dataset]
name = "MOONS"
n_points = 300

[model]
hidden_sizes = [16, 16]
time_embed = { dim = 8 }

[optimizer]
steps = 10
batch = 16

[eval]
steps = [1]
n_samples = 100
n_projections = 8
"#;

fn tfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfm")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = dir.join("exp.toml");
    fs::write(&cfg, SMALL).unwrap();
    let run = dir.join("run");
    let out = tfm(&["train", "--config", arg(&cfg), "--out", arg(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    run.join("model.tfm1")
}

#[test]
fn sample_writes_the_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let a = dir.path().join("a");
    let out = tfm(&["sample", "--ckpt", arg(&ckpt), "--steps", "1", "--n", "23", "--out", arg(&a)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(a.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 23);

    let b = dir.path().join("b");
    let out = tfm(&["sample", "--ckpt", arg(&ckpt), "--grid", "0,1", "--n", "23", "--out", arg(&b)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(a.join("samples.csv")).unwrap(), fs::read(b.join("samples.csv")).unwrap());
}

#[test]
fn steps_and_grid_are_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let out = tfm(&["sample", "--ckpt", arg(&ckpt), "--steps", "2", "--grid", "0,1", "--out", arg(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, SMALL.replace("batch = 16", "batch = 0")).unwrap();
    let out = tfm(&["train", "--config", arg(&cfg), "--out", arg(&dir.path().join("run"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(code(&tfm(&["check", "--suite", "NOPE"])), 2);

    let ckpt = trained(dir.path());
    let out = tfm(&["sample", "--ckpt", arg(&ckpt), "--grid", "0,0.7,0.5,1", "--out", arg(&dir.path().join("s"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.toml");
    let text = SMALL.replace("steps = 10\n", "steps = 200\nlr = 1e8\n") + "\n[loss]\npower_p = 0.0\n";
    fs::write(&cfg, text).unwrap();
    let out = tfm(&["train", "--config", arg(&cfg), "--out", arg(&dir.path().join("run"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn unreadable_inputs_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.tfm1");
    assert_eq!(code(&tfm(&["sample", "--ckpt", arg(&missing), "--out", arg(dir.path())])), 4);

    let ckpt = trained(dir.path());
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    let bad = dir.path().join("bad.tfm1");
    fs::write(&bad, &bytes).unwrap();
    let out = tfm(&["eval", "--ckpt", arg(&bad)]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset"));
}

#[test]
fn sampler_suite_passes() {
    let out = tfm(&["check", "--suite", "SAMPLER"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
}

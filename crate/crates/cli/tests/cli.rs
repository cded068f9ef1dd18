use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
image_size = 32
train_count = 16
test_count = 8
backbone_init = he
components = 2
descriptor_dim = 4
patch_scales = 16
iterations = 4
checkpoint_every = 2
gmm_max_iters = 5
eval_scales = 32
train_scales = 32
bench_image_size = 40
bench_repeats = 1
";

fn fishernet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fishernet"))
        .arg("--config")
        .arg(dir.join("tiny.cfg"))
        .arg("--out")
        .arg(dir.join("run"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fishernet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn read_map(csv: &str) -> f64 {
    let line = csv.lines().find(|l| l.starts_with("mAP,")).expect("mAP row");
    line[4..].parse().unwrap()
}

#[test]
fn full_pipeline_produces_artifacts() {
    let dir = setup();
    let d = dir.path();
    let run = d.join("run");
    ok(d, &["gen-data"]);
    assert!(run.join("data/train/labels.csv").exists());

    ok(d, &["--regime", "finetune", "train"]);
    assert!(run.join("checkpoint.fnc").exists());
    assert!(run.join("checkpoint_000002.fnc").exists());
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("iter,loss,lr"));
    assert_eq!(log.lines().count(), 5);

    let ck = run.join("checkpoint.fnc");
    ok(d, &["--checkpoint", ck.to_str().unwrap(), "fit-gmm"]);
    let codebook = run.join("codebook.fnc");
    ok(d, &["--checkpoint", codebook.to_str().unwrap(), "encode"]);
    let ap = ok(d, &["eval", "--features", run.to_str().unwrap()]);
    let map = read_map(&ap);
    assert!((0.0..=1.0).contains(&map), "{map}");
    assert_eq!(fs::read_to_string(run.join("ap.csv")).unwrap(), ap);
    assert!(run.join("svm.fnc").exists());

    ok(d, &["--checkpoint", codebook.to_str().unwrap(), "--regime", "full", "train"]);
    let ap = ok(d, &["--checkpoint", ck.to_str().unwrap(), "--regime", "full", "eval"]);
    assert!((0.0..=1.0).contains(&read_map(&ap)));
}

#[test]
fn same_seed_same_checkpoint() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["gen-data"]);
    ok(d, &["--seed", "5", "--regime", "finetune", "train"]);
    let a = fs::read(d.join("run/checkpoint.fnc")).unwrap();
    ok(d, &["--seed", "5", "--regime", "finetune", "train"]);
    assert_eq!(a, fs::read(d.join("run/checkpoint.fnc")).unwrap());
}

#[test]
fn gradcheck_passes() {
    let dir = setup();
    let out = ok(dir.path(), &["gradcheck"]);
    assert!(out.starts_with("check,max_rel_err"));
    assert!(!out.contains("FAIL"));
    assert!(dir.path().join("run/gradcheck.csv").exists());
}

#[test]
fn bench_writes_csv() {
    let dir = setup();
    ok(dir.path(), &["bench"]);
    let csv = fs::read_to_string(dir.path().join("run/bench.csv")).unwrap();
    assert!(csv.starts_with("patches,shared_secs,per_patch_secs,speedup\n"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), "no_such_key = 1\n").unwrap();
    let out = fishernet(d, &["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(d, &["gen-data"]);
    let out = fishernet(d, &["--regime", "fisher-only", "train"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fishernet(d, &["--regime", "sideways", "train"]);
    assert_eq!(out.status.code(), Some(2));
}

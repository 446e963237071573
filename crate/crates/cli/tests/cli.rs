use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

use tiltflow::checkpoint::read_checkpoint;
use tiltflow::net::Arch;
use tiltflow::rng::{stream, Role};
use tiltflow::{ModelParams, SampleBatch};

fn tiltflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tiltflow"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = tiltflow(dir, args);
    assert!(
        out.status.success(),
        "tiltflow {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn sha(path: &Path) -> String {
    format!("{:x}", Sha256::digest(std::fs::read(path).unwrap()))
}

const TINY: [&str; 14] = [
    "--epochs", "3", "--dataset-size", "1024", "--batch-size", "128", "--depth", "3", "--hidden", "12", "--tap", "2",
    "--head-hidden", "6",
];

fn train_tiny(dir: &Path, out: &str) {
    let mut args = vec!["train", "--seed", "1", "--out", out];
    args.extend(TINY);
    ok(dir, &args);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = tiltflow(d, &["train", "--config", "missing.cfg"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cfg"));

    std::fs::write(d.join("bad.cfg"), "epochs = 3\nbogus_key = 1\n").unwrap();
    let out = tiltflow(d, &["train", "--config", "bad.cfg"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.cfg") && err.contains('2'), "{err}");

    assert_eq!(code(&tiltflow(d, &["oracle", "--lambda", "-1", "--feature", "1,0", "--out", "o.csv"])), 2);
    assert_eq!(code(&tiltflow(d, &["oracle", "--lambda", "1", "--feature", "0,0", "--out", "o.csv"])), 2);
    assert_eq!(code(&tiltflow(d, &["oracle", "--lambda", "1", "--out", "o.csv"])), 2);
    assert_eq!(code(&tiltflow(d, &["sample", "--mode", "guided_sde", "--ckpt", "m.ckpt"])), 2);
    assert_eq!(code(&tiltflow(d, &["guide", "--mode", "ode", "--ckpt", "m.ckpt", "--feature", "1,0"])), 2);
    assert_eq!(code(&tiltflow(d, &["sample", "--steps", "0", "--ckpt", "m.ckpt"])), 2);
    assert_eq!(code(&tiltflow(d, &["eval", "--metric", "wasserstein", "--a", "a.csv"])), 2);
    assert_eq!(code(&tiltflow(d, &["frobnicate"])), 2);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&tiltflow(d, &["sample", "--ckpt", "junk.ckpt", "--out", "s.csv"])), 1);
    assert_eq!(code(&tiltflow(d, &["sample", "--ckpt", "absent.ckpt", "--out", "s.csv"])), 1);
    assert_eq!(code(&tiltflow(d, &["eval", "--metric", "coverage", "--a", "absent.csv"])), 1);
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["train", "--seed", "4", "--out", "init.ckpt", "--epochs", "0"];
    args.extend(&TINY[2..]);
    ok(d, &args);
    let (params, header) = read_checkpoint(d.join("init.ckpt")).unwrap();
    let arch = Arch {
        depth: 3,
        hidden: 12,
        tap: 2,
        head_hidden: 6,
        ..Arch::default()
    };
    assert_eq!(params, ModelParams::init(arch, &mut stream(4, Role::Init, 0)).unwrap());
    assert_eq!(header.config.unwrap().get("epochs").map(String::as_str), Some("0"));
    let loss = std::fs::read_to_string(d.join("init.ckpt.loss.csv")).unwrap();
    assert_eq!(loss.trim(), "epoch,loss_diff,loss_align");
}

#[test]
fn artifacts_carry_their_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train_tiny(d, "m.ckpt");
    std::fs::write(d.join("run.cfg"), "# guided run\nsteps = 30\nn = 64\nlambda = 1.5\nfeature = 0,-1\n").unwrap();
    ok(d, &["guide", "--config", "run.cfg", "--ckpt", "m.ckpt", "--lambda", "2", "--seed", "9", "--out", "g.csv"]);
    let sidecar = std::fs::read_to_string(d.join("g.csv.cfg")).unwrap();
    for line in ["steps = 30", "n = 64", "lambda = 2.0", "seed = 9", "ckpt = m.ckpt"] {
        assert!(sidecar.lines().any(|l| l == line), "missing {line:?} in\n{sidecar}");
    }
    let batch = SampleBatch::read_csv(d.join("g.csv")).unwrap();
    assert_eq!(batch.len(), 64);

    // The sidecar is itself a valid config reproducing the artifact.
    std::fs::rename(d.join("g.csv"), d.join("first.csv")).unwrap();
    ok(d, &["guide", "--config", "g.csv.cfg"]);
    assert_eq!(sha(&d.join("first.csv")), sha(&d.join("g.csv")));
    assert!(d.join("m.ckpt.cfg").exists());
}

#[test]
fn zero_lambda_guidance_matches_unguided_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train_tiny(d, "m.ckpt");
    let common = ["--ckpt", "m.ckpt", "--seed", "2", "--n", "100", "--steps", "25"];
    let mut sample = vec!["sample", "--out", "s.csv"];
    sample.extend(common);
    ok(d, &sample);
    let mut guide = vec!["guide", "--out", "g.csv", "--lambda", "0", "--feature", "1,0"];
    guide.extend(common);
    ok(d, &guide);
    let s = SampleBatch::read_csv(d.join("s.csv")).unwrap();
    let g = SampleBatch::read_csv(d.join("g.csv")).unwrap();
    assert_eq!(s.points, g.points);
}

#[test]
fn eval_reports_each_metric() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["oracle", "--seed", "1", "--n", "500", "--lambda", "2", "--feature", "0,-1", "--out", "a.csv"]);
    ok(d, &["oracle", "--seed", "2", "--n", "500", "--lambda", "0", "--feature", "0,-1", "--out", "b.csv"]);
    let json = |args: &[&str]| -> serde_json::Value { serde_json::from_slice(&ok(d, args).stdout).unwrap() };
    let ed = json(&["eval", "--a", "a.csv", "--b", "b.csv"]);
    assert!(ed["energy_distance"].as_f64().unwrap() > 0.0);
    let self_ed = json(&["eval", "--a", "a.csv", "--b", "a.csv"]);
    assert_eq!(self_ed["energy_distance"].as_f64(), Some(0.0));
    let skl = json(&["eval", "--metric", "skl", "--a", "a.csv", "--b", "b.csv"]);
    assert!(skl["skl"].as_f64().unwrap() > 0.0);
    let cov = json(&["eval", "--metric", "coverage", "--a", "a.csv"]);
    assert_eq!(cov["coverage"]["in_support"].as_f64(), Some(1.0));

    ok(d, &["eval", "--metric", "skl", "--a", "a.csv", "--b", "b.csv", "--out", "skl.json"]);
    assert!(d.join("skl.json.cfg").exists());
}

#[test]
fn gradcheck_passes_and_reports_every_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--instances", "5"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["gradcheck"]["passed"], serde_json::Value::Bool(true));
    assert_eq!(report["gradcheck"]["suites"].as_array().unwrap().len(), 10);
}

#[test]
fn embedscan_reports_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    train_tiny(d, "m.ckpt");
    let out = ok(d, &["embedscan", "--ckpt", "m.ckpt", "--pairs", "4", "--n-per-condition", "32", "--steps", "20"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let scan = &report["embed_scan"];
    assert_eq!(scan["pairs"].as_array().unwrap().len(), 4);
    assert!(scan["A"].as_f64().unwrap() <= scan["B"].as_f64().unwrap());
}

#[test]
fn plot_is_deterministic_svg() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["oracle", "--seed", "1", "--n", "200", "--lambda", "1", "--feature", "1,0", "--out", "a.csv"]);
    ok(d, &["oracle", "--seed", "2", "--n", "200", "--lambda", "1", "--feature", "0,-1", "--out", "b.csv"]);
    ok(d, &["plot", "--a", "a.csv", "--b", "b.csv", "--out", "p1.svg"]);
    ok(d, &["plot", "--a", "a.csv", "--b", "b.csv", "--out", "p2.svg"]);
    assert_eq!(sha(&d.join("p1.svg")), sha(&d.join("p2.svg")));
    let svg = std::fs::read_to_string(d.join("p1.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert_eq!(svg.matches("<circle").count(), 400);

    std::fs::write(d.join("empty.csv"), "x1,x2\n").unwrap();
    ok(d, &["plot", "--a", "empty.csv", "--out", "empty.svg"]);
    assert!(!std::fs::read_to_string(d.join("empty.svg")).unwrap().contains("<circle"));
}

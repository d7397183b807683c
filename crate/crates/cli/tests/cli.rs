use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use npmca::checkpoint;
use npmca::dataset::{read_masks, read_predictions, write_predictions};
use npmca::metrics::{score_sequence, EvalReport};
use npmca::raster::LabelMask;
use npmca::ModelF64;

fn npmca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npmca"))
        .args(args)
        .env_remove("NPMCA_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(out: &Path, n: &str, seed: &str) -> Output {
    npmca(&["gen", "--out", s(out), "--n", n, "--seed", seed, "--width", "32", "--height", "24", "--frames", "4"])
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.cfg" {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Small dataset plus a one-iteration checkpoint.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    assert_eq!(code(&gen(&data, "2", "3")), 0);
    let run = dir.join("run");
    let o = npmca(&[
        "train", "--data", s(&data), "--out", s(&run), "--iterations", "1", "--batch-size", "1", "--feature-channels", "8",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (data, run.join("model.ckpt"))
}

#[test]
fn gen_is_deterministic_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(code(&gen(&a, "3", "7")), 0);
    assert_eq!(code(&gen(&b, "3", "7")), 0);
    assert_eq!(code(&gen(&c, "3", "8")), 0);
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
    assert_eq!(npmca::dataset::validate_dataset(&a).unwrap().len(), 3);
    assert!(a.join("run.cfg").is_file());
    assert!(a.join("seq0000").join("scene.cfg").is_file());
}

#[test]
fn seed_env_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&gen(&a, "2", "5")), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_npmca"))
        .args(["gen", "--out", s(&b), "--n", "2", "--seed", "99", "--width", "32", "--height", "24", "--frames", "4"])
        .env("NPMCA_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn gen_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gen(&dir.path().join("x"), "0", "1")), 2);
    let o = npmca(&["gen", "--out", s(&dir.path().join("y")), "--width", "30"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = fixture(dir.path());
    let run = ckpt.parent().unwrap();
    let model: ModelF64 = checkpoint::load(&ckpt, false).unwrap();
    assert_eq!(model.config.feature_channels, 8);
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter,loss");
    assert_eq!(lines.len(), 2);
    let cfg = fs::read_to_string(run.join("run.cfg")).unwrap();
    assert!(cfg.contains("iterations=1"));
}

#[test]
fn train_error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    let out = dir.path().join("o");
    let o = npmca(&["train", "--data", s(&data), "--out", s(&out), "--stage", "finetune", "--iterations", "1"]);
    assert_eq!(code(&o), 2);
    let o = npmca(&["train", "--data", s(&dir.path().join("none")), "--out", s(&out), "--iterations", "1"]);
    assert_eq!(code(&o), 2);
    let o = npmca(&[
        "train", "--data", s(&data), "--out", s(&out), "--iterations", "3", "--batch-size", "1", "--feature-channels", "8",
        "--lr", "1e300",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("iteration"));
}

#[test]
fn finetune_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let out = dir.path().join("ft");
    let o = npmca(&[
        "train", "--data", s(&data), "--out", s(&out), "--stage", "finetune", "--init-checkpoint", s(&ckpt),
        "--iterations", "1", "--batch-size", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("model.ckpt").is_file());
}

#[test]
fn infer_outputs_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let (p1, p2) = (dir.path().join("p1"), dir.path().join("p2"));
    for p in [&p1, &p2] {
        let o = npmca(&["infer", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(p), "--scales", "1.0", "--dump-probs"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(tree(&p1), tree(&p2));
    let gt = read_masks(&data, "seq0000").unwrap();
    let pred = read_predictions(&p1, "seq0000", gt.len()).unwrap();
    assert_eq!(pred.len(), 4);
    assert_eq!(pred[0], gt[0]);
    let seq = p1.join("seq0000");
    assert!(seq.join("probs").join("obj1").join("00003.pgm").is_file());
    for f in ["similarity", "energy", "attention"] {
        assert!(seq.join("debug").join(format!("{f}.pgm")).is_file());
    }
}

#[test]
fn infer_without_first_mask_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    fs::remove_dir_all(data.join("seq0001").join("masks")).unwrap();
    let o = npmca(&["infer", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("p")), "--scales", "1"]);
    assert_eq!(code(&o), 2);
}

fn shifted(m: &LabelMask) -> LabelMask {
    let mut out = LabelMask::background(m.width(), m.height());
    for y in 0..m.height() {
        for x in 1..m.width() {
            out.set(x, y, m.get(x - 1, y));
        }
    }
    out
}

#[test]
fn eval_scores_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen(&data, "2", "4")), 0);

    let same = dir.path().join("same");
    for name in ["seq0000", "seq0001"] {
        write_predictions(&same, name, &read_masks(&data, name).unwrap()).unwrap();
    }
    let out = dir.path().join("r0");
    assert_eq!(code(&npmca(&["eval", "--pred", s(&same), "--gt", s(&data), "--out", s(&out)])), 0);
    let txt = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(txt.contains("J: 1.000 F: 1.000 J&F: 1.000"), "{txt}");

    let pred = dir.path().join("pred");
    let mut scores = Vec::new();
    for name in ["seq0000", "seq0001"] {
        let gt = read_masks(&data, name).unwrap();
        let p: Vec<LabelMask> = gt.iter().map(shifted).collect();
        write_predictions(&pred, name, &p).unwrap();
        scores.push(score_sequence(name, &p, &gt).unwrap());
    }
    let want = EvalReport::from_sequences(scores);
    let out = dir.path().join("r1");
    assert_eq!(code(&npmca(&["eval", "--pred", s(&pred), "--gt", s(&data), "--out", s(&out)])), 0);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!((json["mean_j"].as_f64().unwrap() - want.mean_j).abs() < 1e-12);
    assert!((json["mean_f"].as_f64().unwrap() - want.mean_f).abs() < 1e-12);
    assert!(want.mean_j < 1.0);

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&npmca(&["eval", "--pred", s(&empty), "--gt", s(&data), "--out", s(&out)])), 2);
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = npmca(&["verify", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = fs::read_to_string(dir.path().join("verify.txt")).unwrap();
    assert!(text.lines().count() >= 12);
    let o = npmca(&["verify", "--inject-fault", "unstable-softmax"]);
    assert_eq!(code(&o), 1);
}

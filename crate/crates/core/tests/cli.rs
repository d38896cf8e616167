use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use soundclr::audio_io::load_manifest;
use soundclr::dsp::{read_feature_cache, StftConfig};
use soundclr::gradsuite;
use soundclr::synth::SynthSpec;
use soundclr::trainer::load_checkpoint;

const TINY: &str = r#"{
  "dataset": { "synthetic": { "samples_per_class": 6, "clip_seconds": 0.5, "folds": 2 } },
  "train": {
    "epochs": 3,
    "batch_size": 8,
    "warmup_epochs": 1,
    "base_lr": 0.002,
    "augment": { "target_len": 11025, "time_mask_width": 4 },
    "model": { "conv_channels": [2, 4], "repr_dim": 8, "proj_dim": 4, "num_classes": 4 }
  },
  "val_fold": 1
}"#;

fn soundclr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soundclr")).args(args).env("SOUNDCLR_THREADS", "1").output().expect("run soundclr")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path
}

/// Reads the `all` row of an eval metrics file.
fn overall(path: &Path) -> (usize, f64, f64) {
    let text = fs::read_to_string(path).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "all");
    (row[1].parse().unwrap(), row[2].parse().unwrap(), row[3].parse().unwrap())
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = soundclr(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.resolved.json", "best.sckp", "last.sckp", "metrics.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let history = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,lr,train_loss,train_acc,val_loss,val_acc");
    assert_eq!(history.lines().count(), 4);

    let best = load_checkpoint(run.join("best.sckp")).unwrap();
    let record = best.best.expect("best record");
    let eval_dir = dir.path().join("eval");
    let out = soundclr(&[
        "eval",
        "--checkpoint",
        s(&run.join("best.sckp")),
        "--config",
        s(&cfg),
        "--fold",
        "1",
        "--noise-sweep",
        "--sigmas",
        "0,0.001",
        "--margins",
        "--out",
        s(&eval_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (count, acc, loss) = overall(&eval_dir.join("metrics.csv"));
    assert_eq!(count, 12);
    assert_eq!(acc, record.val_acc);
    assert!((loss - record.val_loss).abs() < 1e-12);

    let sweep = fs::read_to_string(eval_dir.join("noise_sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().collect();
    assert_eq!(rows[0], "sigma,accuracy");
    assert_eq!(rows.len(), 3);
    let clean: f64 = rows[1].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(clean, acc);
    assert!(eval_dir.join("margins.csv").is_file());

    // an ensemble of one checkpoint is the checkpoint itself
    let members = dir.path().join("members");
    fs::create_dir(&members).unwrap();
    fs::copy(run.join("best.sckp"), members.join("a.sckp")).unwrap();
    let ens_dir = dir.path().join("ens");
    let out = soundclr(&["eval", "--ensemble", s(&members), "--config", s(&cfg), "--fold", "1", "--out", s(&ens_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (n, ens_acc, ens_loss) = overall(&ens_dir.join("metrics.csv"));
    assert_eq!((n, ens_acc), (count, acc));
    assert!((ens_loss - loss).abs() < 1e-9);
}

#[test]
fn cross_validation_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cv.json");
    fs::write(&cfg, TINY.replace(",\n  \"val_fold\": 1", "").replace("\"epochs\": 3", "\"epochs\": 1")).unwrap();
    let run = dir.path().join("cv");
    let out = soundclr(&["train", "--config", s(&cfg), "--scheme", "ce", "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for fold in 1..=2 {
        assert!(run.join(format!("fold{fold}/best.sckp")).is_file());
    }
    let summary = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let first: Vec<&str> = summary.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(first, ["fold", "1", "2", "mean", "std"]);
}

#[test]
fn exit_codes_for_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = soundclr(&["train", "--config", s(&cfg), "--alpha", "1.5", "--out", s(&dir.path().join("a"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));

    let missing = dir.path().join("nope.csv");
    let out = soundclr(&["train", "--manifest", s(&missing), "--out", s(&dir.path().join("b"))]);
    assert_eq!(code(&out), 2);

    let out = soundclr(&["train", "--bogus-flag"]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&soundclr(&["--help"])), 0);
}

#[test]
fn gradcheck_exit_codes() {
    let ok = soundclr(&["gradcheck", "--instances", "2"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));

    let bad = soundclr(&["gradcheck", "--instances", "2", "--inject-fault"]);
    assert_eq!(code(&bad), 3);
    let table = String::from_utf8_lossy(&bad.stdout);
    for op in gradsuite::op_names() {
        let rows = table.lines().filter(|l| l.split_whitespace().next() == Some(op)).count();
        assert_eq!(rows, 1, "{op} listed {rows} times");
    }
    let dense = table.lines().find(|l| l.starts_with("dense ")).unwrap();
    assert!(dense.ends_with("FAIL"));
}

#[test]
fn synth_then_featurize_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = soundclr(&["synth", "--out", s(&corpus), "--samples-per-class", "4", "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = load_manifest(corpus.join("meta.csv"), None).unwrap();
    assert_eq!(manifest.entries.len(), 16);

    let run = |name: &str| {
        let target = dir.path().join(name);
        let out = soundclr(&[
            "featurize",
            "--manifest",
            s(&corpus.join("meta.csv")),
            "--sample-rate",
            "22050",
            "--out",
            s(&target),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        target
    };
    let (a, b) = (run("feat_a"), run("feat_b"));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), manifest.entries.len());

    let cfg = StftConfig::default();
    let clip_len = SynthSpec::default().clip_len();
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
        let grid = read_feature_cache(a.join(&name)).unwrap();
        let frames = 1 + (clip_len - cfg.window_len) / cfg.hop;
        assert_eq!((grid.rows, grid.cols), (cfg.n_mels, frames));
    }
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stutterkit::features::read_manifest;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stutterkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = "n_clips = 24\nmin_frames = 20\nmax_frames = 30\nmin_event = 4\nmax_event = 8\ndim = 16\n";
const TRAIN: &str = "epochs = 2\nbatch_size = 4\nmodel_dim = 8\nn_blocks = 1\nn_heads = 2\nm = 1\nM = 4\n";

fn synth(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("spec.txt");
    fs::write(&spec, SPEC).unwrap();
    let data = dir.join("data");
    ok(&["synth", "--spec", s(&spec), "--out-dir", s(&data), "--seed", "4"]);
    data.join("manifest.jsonl")
}

#[test]
fn synth_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    assert_eq!(read_manifest(&manifest).unwrap().len(), 24);

    let cfg = dir.path().join("train.txt");
    fs::write(&cfg, TRAIN).unwrap();
    let run_dir = dir.path().join("run");
    ok(&["train", "--manifest", s(&manifest), "--out-dir", s(&run_dir), "--config", s(&cfg), "--seed", "2"]);
    for f in ["model.ckpt", "train_log.csv", "config.txt"] {
        assert!(run_dir.join(f).exists(), "{}", f);
    }
    let log = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,L_cls,L_st,L_fl,L_SC,total,skipped_reason");
    assert_eq!(log.lines().count(), 1 + 2 * 6);
    assert!(fs::read_to_string(run_dir.join("config.txt")).unwrap().contains("seed = 2"));

    // Same seed, same bytes.
    let again = dir.path().join("again");
    ok(&["train", "--manifest", s(&manifest), "--out-dir", s(&again), "--config", s(&cfg), "--seed", "2"]);
    assert_eq!(fs::read(run_dir.join("model.ckpt")).unwrap(), fs::read(again.join("model.ckpt")).unwrap());
    assert_eq!(log, fs::read_to_string(again.join("train_log.csv")).unwrap());

    let preds = dir.path().join("preds.jsonl");
    let th = dir.path().join("th.txt");
    fs::write(&th, "thresholds = 0\n").unwrap();
    ok(&["infer", "--checkpoint", s(&run_dir.join("model.ckpt")), "--manifest", s(&manifest), "--out", s(&preds), "--config", s(&th)]);
    let lines: Vec<serde_json::Value> = fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 24);
    assert_eq!(lines[0]["pred"], serde_json::json!([1, 1, 1, 1, 1]));
    assert_eq!(lines[0]["scores"].as_array().unwrap().len(), 5);

    let report = dir.path().join("report");
    let out = ok(&["eval", "--predictions", s(&preds), "--manifest", s(&manifest), "--out-dir", s(&report)]);
    assert!(out.starts_with("| Method | /p | /b | /r | /wr | /i | Avg |"));
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("f1"), "{}", csv);
}

#[test]
fn infer_skips_missing_features() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let cfg = dir.path().join("train.txt");
    fs::write(&cfg, "epochs = 1\nmodel_dim = 8\nn_blocks = 1\nn_heads = 2\n").unwrap();
    let run_dir = dir.path().join("run");
    ok(&["train", "--manifest", s(&manifest), "--out-dir", s(&run_dir), "--config", s(&cfg)]);
    fs::remove_file(dir.path().join("data/features/clip_00003.fgc")).unwrap();
    let preds = dir.path().join("preds.jsonl");
    let out = ok(&["infer", "--checkpoint", s(&run_dir.join("model.ckpt")), "--manifest", s(&manifest), "--out", s(&preds)]);
    assert!(out.contains("1 skipped"), "{}", out);
    assert!(out.contains("skipped clip_00003"));
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 23);
    // The id sets now differ, which evaluation rejects.
    let r = run(&["eval", "--predictions", s(&preds), "--manifest", s(&manifest)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn extract_reads_wav_directory() {
    let dir = tempfile::tempdir().unwrap();
    let wavs = dir.path().join("wavs");
    fs::create_dir(&wavs).unwrap();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tone_1s.wav");
    fs::copy(&fixture, wavs.join("a.wav")).unwrap();
    fs::copy(&fixture, wavs.join("b.wav")).unwrap();
    let labels = dir.path().join("labels.csv");
    fs::write(&labels, "b,0,1,0,0,1\n").unwrap();
    let out = dir.path().join("feats");
    ok(&["extract", "--wav-dir", s(&wavs), "--out-dir", s(&out), "--labels", s(&labels)]);
    let records = read_manifest(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].labels, [false; 5]);
    assert_eq!(records[1].labels, [false, true, false, false, true]);
    let f = stutterkit::features::read_features(&records[0].feature_path).unwrap();
    assert_eq!((f.num_frames(), f.dim()), (98, 80));
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    for bad in ["alpha = -1\n", "m = 6\nM = 3\n", "unknown_key = 1\n", "theta = 2\n"] {
        let cfg = dir.path().join("bad.txt");
        fs::write(&cfg, bad).unwrap();
        let r = run(&["train", "--manifest", s(&manifest), "--out-dir", s(&dir.path().join("x")), "--config", s(&cfg)]);
        assert_eq!(r.status.code(), Some(2), "{}", bad);
    }
    let r = run(&["train", "--manifest", s(&dir.path().join("missing.jsonl")), "--out-dir", s(dir.path())]);
    assert_eq!(r.status.code(), Some(2));
    let spec = dir.path().join("spec.txt");
    fs::write(&spec, "insert_prob = 1.5\n").unwrap();
    let r = run(&["synth", "--spec", s(&spec), "--out-dir", s(dir.path())]);
    assert_eq!(r.status.code(), Some(2));
    let th = dir.path().join("th.txt");
    fs::write(&th, "thresholds = 1.0\n").unwrap();
    let r = run(&["infer", "--checkpoint", "nope", "--manifest", s(&manifest), "--out", "x", "--config", s(&th)]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(run(&["mine"]).status.code(), Some(2));
}

#[test]
fn self_checks_pass() {
    let out = ok(&["mine", "--check", "--seed", "3"]);
    assert!(out.contains("mismatches=0") && out.trim_end().ends_with("PASS"), "{}", out);
    let out = ok(&["grad-check", "--seed", "1"]);
    assert!(!out.contains("FAIL"), "{}", out);
    assert!(out.contains("composite_objective"));
}

#[test]
fn ablate_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let cfg = dir.path().join("ablate.txt");
    fs::write(&cfg, format!("{}grid.masks = 1:6, 3:6\ngrid.alpha = 0.05\n", TRAIN.replace("epochs = 2", "epochs = 1"))).unwrap();
    let out_dir = dir.path().join("abl");
    let out = ok(&[
        "ablate", "--train-manifest", s(&manifest), "--test-manifest", s(&manifest), "--out-dir", s(&out_dir), "--config", s(&cfg),
    ]);
    assert!(out.starts_with("| m | M | alpha | /p |"), "{}", out);
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "m,M,alpha,/p,/b,/r,/wr,/i,Avg");
    assert!(rows[1].starts_with("1,6,0.05,") && rows[2].starts_with("3,6,0.05,"));
    assert_eq!(rows.len(), 3);
}

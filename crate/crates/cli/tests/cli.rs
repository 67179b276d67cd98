use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signfusion"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "`{}` failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec![
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--representative-only",
        "--image-side",
        "16",
    ];
    args.extend_from_slice(extra);
    ok(&args, dir);
    out
}

fn write_config(dir: &Path, corpus: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.json");
    let text = format!(
        r#"{{"corpus_root": {:?}, "output_dir": "out", "seed": 2, "image_side": 16, "epochs": 2{extra}}}"#,
        corpus.to_str().unwrap()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn synth_writes_every_repetition_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(&["synth", "--out", "a", "--representative-only"], dir.path());
    let second = ok(&["synth", "--out", "b", "--representative-only"], dir.path());
    assert!(first.contains("= 180 repetition directories"), "{first}");
    let reps: usize = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| fs::read_dir(e.path()).unwrap().count())
        .sum();
    assert_eq!(reps, 180);
    let hash = |s: &str| {
        s.lines()
            .find(|l| l.starts_with("manifest sha256"))
            .unwrap()
            .to_string()
    };
    assert_eq!(hash(&first), hash(&second));
}

#[test]
fn prime_class_count_cannot_split_signal() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["synth", "--mode", "split_signal", "--classes", "17", "--out", "c"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("17 classes"));
}

#[test]
fn missing_corpus_root_is_named() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), r#"{"output_dir": "out", "seed": 1}"#).unwrap();
    let out = run(&["train", "--config", "run.json"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus_root"));

    let out = run(
        &["train", "--config", "run.json", "--corpus-root", "absent"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus_root"));
}

#[test]
fn train_then_evaluate_agree() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "corpus", &["--classes", "4", "--reps", "6"]);
    write_config(dir.path(), &corpus, "");
    let trained = ok(&["train", "--config", "run.json"], dir.path());
    let out = dir.path().join("out");

    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 2);
    assert!(history.starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));

    ok(&["evaluate", "--config", "run.json"], dir.path());
    for name in [
        "report.txt",
        "report.json",
        "confusion.csv",
        "metrics.csv",
        "manifest.json",
        "scaler.json",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }

    // Test accuracy printed at the end of training matches the re-loaded checkpoint.
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let accuracy = report["accuracy"].as_f64().unwrap();
    let printed: f64 = trained.rsplit("test_accuracy ").next().unwrap().trim().parse().unwrap();
    assert_eq!(accuracy, printed);

    // The JSON accuracy is the trace over the total of the emitted confusion CSV.
    let csv = fs::read_to_string(out.join("confusion.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let (mut trace, mut total) = (0usize, 0usize);
    for (i, row) in rows.iter().enumerate() {
        for (j, cell) in row[1..].iter().enumerate() {
            let n: usize = cell.parse().unwrap();
            total += n;
            if i == j {
                trace += n;
            }
        }
    }
    assert_eq!(accuracy, trace as f64 / total as f64);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"]["config"]["seed"], 2);
    assert!(manifest["evaluate"]["inputs"]["checkpoint"].is_string());
    assert_eq!(manifest["train"]["inputs"]["corpus"]["files"], 4 * 6 * 2 + 1);

    let rendered = ok(&["report", "--input", "out/report.json"], dir.path());
    assert_eq!(rendered, fs::read_to_string(out.join("report.txt")).unwrap());
}

#[test]
fn checkpoint_against_other_corpus_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let four = synth(dir.path(), "four", &["--classes", "4", "--reps", "5"]);
    let three = synth(dir.path(), "three", &["--classes", "3", "--reps", "5"]);
    write_config(dir.path(), &four, "");
    ok(&["train", "--config", "run.json", "--epochs", "1"], dir.path());
    let out = run(
        &[
            "evaluate",
            "--config",
            "run.json",
            "--corpus-root",
            three.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("label"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn ablation_writes_three_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(
        dir.path(),
        "corpus",
        &["--classes", "4", "--reps", "5", "--mode", "split_signal"],
    );
    write_config(dir.path(), &corpus, "");
    ok(&["ablate", "--config", "run.json", "--epochs", "1"], dir.path());
    let first = fs::read_to_string(dir.path().join("out/ablation.csv")).unwrap();
    let modalities: Vec<&str> = first.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modalities, ["leap_only", "image_only", "fusion"]);
    for m in &modalities {
        assert!(dir.path().join(format!("out/checkpoint_{m}.model")).is_file());
    }
    ok(&["ablate", "--config", "run.json", "--epochs", "1"], dir.path());
    assert_eq!(first, fs::read_to_string(dir.path().join("out/ablation.csv")).unwrap());
}

#[test]
fn extract_rederives_tampered_angles() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "corpus", &["--classes", "2", "--reps", "3"]);
    let frames = corpus.join("sign_00/rep_00/frames.csv");
    let clean = ok(&["extract", "--input", frames.to_str().unwrap()], dir.path());
    assert!(clean.contains("73 frames valid, 0 with re-derived angles"), "{clean}");

    // Overwrite the left arm angle column (the 8th cell) in every row.
    let text = fs::read_to_string(&frames).unwrap();
    let mut lines = text.lines();
    let mut tampered = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let mut cells: Vec<&str> = line.split(',').collect();
        cells[7] = "9";
        tampered += &(cells.join(",") + "\n");
    }
    let bad = dir.path().join("tampered.csv");
    fs::write(&bad, tampered).unwrap();
    let report = ok(
        &["extract", "--input", "tampered.csv", "--output", "fixed.csv"],
        dir.path(),
    );
    assert!(report.contains("73 with re-derived angles"), "{report}");
    assert_eq!(fs::read_to_string(dir.path().join("fixed.csv")).unwrap(), text);
}

use std::path::Path;
use std::process::{Command, Output};

fn tts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tts"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tts(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_split_train_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["generate", "--out", s(&corpus), "--samples", "40", "--seed", "3"]);
    assert!(corpus.join("metadata.csv").exists());
    assert!(corpus.join("images/synth_00039.png").exists());

    let split = dir.path().join("split.csv");
    let phi = dir.path().join("phi.csv");
    let out = ok(&[
        "split", "--metadata", s(&corpus.join("metadata.csv")), "--out", s(&split),
        "--report", s(&phi), "--bias-factor", "1.0", "--seed", "2",
    ]);
    assert!(out.contains("train_phi"));
    assert_eq!(csv::Reader::from_path(&split).unwrap().records().count(), 40);
    assert_eq!(header(&phi), ["artifact", "stratum", "phi", "degenerate"]);

    let ckpt = dir.path().join("model.json");
    let out = ok(&["train", "--corpus", s(&corpus), "--out", s(&ckpt), "--epochs", "2"]);
    assert!(out.contains("trained 2 epochs"), "{out}");
    let loaded = tts_core::model::checkpoint::Checkpoint::load(&ckpt).unwrap();
    assert!(loaded.noise_stats.is_some());

    let grid = dir.path().join("grid.json");
    std::fs::write(
        &grid,
        r#"{"bias_factors": [1.0],
            "tts": [{"n_keypoints": 2, "source": "segm_mask", "alpha": 0.4}],
            "replicas": 2,
            "train": {"epochs": 1}}"#,
    )
    .unwrap();
    let report = dir.path().join("report");
    ok(&[
        "ablate", "--grid", s(&grid), "--seeds", "2", "--out", s(&report),
        "--bias-factors", "0.5,1.0", "--corpus", s(&corpus),
    ]);
    let rows: Vec<csv::StringRecord> = csv::Reader::from_path(report.join("report.csv"))
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect();
    // baseline, one TTS cell and NoiseCrop at two bias factors
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| &r[8] == "2"));
    assert_eq!(header(&report.join("bias_sweep.csv")), ["series", "bias_factor", "auc_mean", "auc_std", "n_seeds"]);
    assert!(report.join("report.json").exists());
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = tts(&["split", "--metadata", s(&dir.path().join("none.csv")), "--out", s(&dir.path().join("x.csv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, r#"{"bias_factors": [1.5]}"#).unwrap();
    let out = tts(&["ablate", "--grid", s(&grid), "--seeds", "1", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bias"));

    let out = tts(&["ablate", "--seeds", "two", "--out", s(dir.path())]);
    assert!(!out.status.success());
}

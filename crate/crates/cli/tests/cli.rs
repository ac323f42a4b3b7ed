//! Runs the `lmfd-pad` binary end to end on a tiny synthetic corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lmfd-pad");

const TINY_CONFIG: &str = r#"
batch_size = 8
max_epochs = 2
seed = 5

[model]
input_size = 32
reduction_ratio = 4

[model.backbone]
name = "tiny"
stage_channels = [4, 8, 8, 16]
stage_spatial = [8, 4, 2, 1]

[data]
frames_per_video = 2

[data.augment]
cutout_min = 4
cutout_max = 8
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(["--log-level", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic corpus and config in a fresh directory.
fn setup() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run(&[
        "make-synthetic",
        "--out",
        s(&data),
        "--videos-per-class",
        "8",
        "--frames",
        "2",
        "--size",
        "32",
        "--seed",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    (dir, data.join("manifest.csv"), config)
}

#[test]
fn train_eval_export_and_decompose() {
    let (dir, manifest, config) = setup();
    assert_eq!(code(&run(&["validate-manifest", s(&manifest), "--check-files"])), 0);

    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        s(&config),
        "--set",
        "optimizer.lr0=0.002",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "resolved_config.toml",
        "best.ckpt",
        "train_log.jsonl",
        "run_summary.json",
        "scores_dev.csv",
        "scores_test.csv",
        "test_report.json",
    ] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let resolved = lmfd_core::train::TrainConfig::read(out_dir.join("resolved_config.toml")).unwrap();
    assert_eq!(resolved.optimizer.lr0, 0.002);
    assert_eq!(resolved.model.input_size, 32);
    assert_eq!(resolved.max_epochs, 2);

    let ckpt = out_dir.join("best.ckpt");
    let eval_dir = dir.path().join("eval");
    let out = run(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--out",
        s(&eval_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // Scoring the test split again reproduces the training command's scores.
    assert_eq!(
        std::fs::read_to_string(eval_dir.join("scores_test.csv")).unwrap(),
        std::fs::read_to_string(out_dir.join("scores_test.csv")).unwrap()
    );
    assert!(eval_dir.join("metrics_test.json").is_file());

    let out = run(&[
        "report",
        "--scores",
        s(&eval_dir.join("scores_test.csv")),
        "--dev-scores",
        s(&out_dir.join("scores_dev.csv")),
    ]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ACER"));

    let emb_dir = dir.path().join("emb");
    let out = run(&[
        "export-embeddings",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--out",
        s(&emb_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(emb_dir.join("embeddings.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    // Two streams of 16 channels each.
    assert_eq!(header.len(), 4 + 32);
    assert!(emb_dir.join("pca_2d.csv").is_file());
    assert!(emb_dir.join("embeddings_pca.npy").is_file());

    let frame = std::fs::read_dir(manifest.parent().unwrap().join("frames"))
        .unwrap()
        .flatten()
        .flat_map(|d| std::fs::read_dir(d.path()).unwrap().flatten())
        .map(|e| e.path())
        .find(|p| p.extension().is_some_and(|e| e == "png"))
        .expect("a frame");
    let dec_dir = dir.path().join("dec");
    let out = run(&["decompose", s(&frame), "--checkpoint", s(&ckpt), "--out", s(&dec_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stem = frame.file_stem().unwrap().to_str().unwrap();
    let npy = std::fs::read(dec_dir.join(format!("{stem}_bands.npy"))).unwrap();
    let header = String::from_utf8_lossy(&npy[10..npy.len().min(128)]).into_owned();
    assert!(header.contains("(12, 32, 32)"), "{header}");
    let png = image::open(dec_dir.join(format!("{stem}_bands.png"))).unwrap();
    assert_eq!((png.width(), png.height()), (4 * 32, 32));
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let (dir, manifest, config) = setup();
    let out_dir = dir.path().join("run");

    let out = run(&[
        "train",
        "--config",
        s(&config),
        "--set",
        "optimizer.no_such_key=1",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    let out = run(&[
        "train",
        "--config",
        s(&config),
        "--set",
        "batch_size=0",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 2);

    let broken = dir.path().join("broken.csv");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&broken, text.replacen("bona_fide", "maybe", 1)).unwrap();
    assert_eq!(code(&run(&["validate-manifest", s(&broken)])), 2);
    let out = run(&["train", "--config", s(&config), "--manifest", s(&broken), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 2);

    let out = run(&["train", "--config", s(&config), "--preset", "rgb_only", "--manifest", s(&manifest), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn diverging_run_exits_with_code_three() {
    let (dir, manifest, config) = setup();
    let out = run(&[
        "train",
        "--config",
        s(&config),
        "--set",
        "optimizer.lr0=1e30",
        "--manifest",
        s(&manifest),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn decompose_directory_with_mask_snapshot() {
    let (dir, manifest, _) = setup();
    let video = std::fs::read_dir(manifest.parent().unwrap().join("frames"))
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .min()
        .unwrap();
    let out_dir = dir.path().join("dec");
    let out = run(&["decompose", s(&video), "--size", "32", "--mask-snapshot", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let npys = std::fs::read_dir(&out_dir)
        .unwrap()
        .flatten()
        .filter(|e| e.path().extension().is_some_and(|x| x == "npy"))
        .count();
    assert_eq!(npys, 2);

    // Untrained masks are the binary base masks; band 4 passes everything.
    let full = std::fs::read_to_string(out_dir.join("mask_band4.txt")).unwrap();
    assert_eq!(full.lines().count(), 32);
    assert!(full.split_whitespace().all(|v| v == "1.00000e0"));
    let low = std::fs::read_to_string(out_dir.join("mask_band1.txt")).unwrap();
    let first: Vec<f64> = low.lines().next().unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(first.len(), 32);
    assert_eq!(first[0], 1.0);
    assert_eq!(first[31], 0.0);

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&run(&["decompose", s(&empty), "--out", s(&out_dir)])), 2);
}

//! Acceptance suite. Each test prints one `ACCEPTANCE <n> <name>: PASS|FAIL`
//! line with the measured values, then asserts.
//!
//! Criteria 6, 7 and 9 train real models through the `lmfd-pad` binary and
//! take minutes; they hold a shared lock so that timings are not distorted by
//! each other on multi-core machines.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use lmfd_core::data::{Label, Split};
use lmfd_core::eval::{
    acer, apcer_per_pai, apcer_pooled, apcer_wc, auc, bpcer, eer_threshold, format_percent,
    metric_report, read_scores_file, ProtocolConfig, ProtocolSummary, ScoreRecord, ThresholdRule,
};
use lmfd_core::freq::{band_map, band_of, dct2, decompose, idct2, Band, BandGeometry, FilterBank, MaskInit};
use lmfd_core::gradcheck;
use lmfd_core::losses::{bce_loss, focal_loss, overall_loss, smooth_l1, LossWeights};
use lmfd_core::network::BackboneSpec;
use lmfd_core::train::{
    evaluate_dev, load_checkpoint, open_store, split_frames, train, AblationReport, Preset,
    TrainConfig,
};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_lmfd-pad");

static HEAVY: Mutex<()> = Mutex::new(());

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn cli(args: &[&str]) {
    let out = Command::new(BIN)
        .args(["--log-level", "warn"])
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "lmfd-pad {args:?} exited with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_1_frequency_core() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();

    let mut round_trip = 0.0f64;
    let mut energy = 0.0f64;
    for _ in 0..20 {
        let x = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
        round_trip = round_trip.max(max_abs_diff(&idct2(&dct2(&x).unwrap()).unwrap(), &x));
        round_trip = round_trip.max(max_abs_diff(&dct2(&idct2(&x).unwrap()).unwrap(), &x));
    }
    for (h, w) in [(8, 8), (7, 13), (32, 32), (224, 224)] {
        let x = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0));
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ey: f64 = dct2(&x).unwrap().iter().map(|v| v * v).sum();
        energy = energy.max((ex - ey).abs() / ex);
    }
    let x32 = Array2::from_shape_fn((32, 32), |_| rng.random_range(-1.0f32..1.0));
    let back32 = idct2(&dct2(&x32).unwrap()).unwrap();
    let round_trip32 = x32.iter().zip(&back32).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    if round_trip >= 1e-10 {
        failures.push(format!("double round trip {round_trip:e}"));
    }
    if round_trip32 >= 1e-5 {
        failures.push(format!("single round trip {round_trip32:e}"));
    }
    if energy >= 1e-8 {
        failures.push(format!("energy {energy:e}"));
    }

    // Zero-initialised masks: the full-spectrum component is the input.
    let bank32 = FilterBank::<f32>::new(224, 224, BandGeometry::AntiDiagonal, MaskInit::Zeros, 0).unwrap();
    let img = Array3::from_shape_fn((3, 224, 224), |_| rng.random_range(0.0f32..1.0));
    let stack = decompose(&img, &bank32).unwrap();
    let mut full_band = 0.0f32;
    for c in 0..3 {
        for (a, b) in stack.component(3, c).iter().zip(img.index_axis(ndarray::Axis(0), c)) {
            full_band = full_band.max((a - b).abs());
        }
    }
    if full_band >= 1e-5 {
        failures.push(format!("component 4 vs input {full_band:e}"));
    }

    // Components 1-3 sum to the input with the residual band removed.
    let bank = FilterBank::<f64>::new(32, 32, BandGeometry::AntiDiagonal, MaskInit::Zeros, 0).unwrap();
    let img = Array3::from_shape_fn((1, 32, 32), |_| rng.random_range(0.0..1.0));
    let stack = decompose(&img, &bank).unwrap();
    let mut coeffs = dct2(&img.index_axis(ndarray::Axis(0), 0).to_owned()).unwrap();
    for ((u, v), c) in coeffs.indexed_iter_mut() {
        if (u + v) as f64 / 62.0 >= 7.0 / 8.0 {
            *c = 0.0;
        }
    }
    let limited = idct2(&coeffs).unwrap();
    let sum = &stack.component(0, 0) + &stack.component(1, 0) + stack.component(2, 0);
    let band_sum = max_abs_diff(&sum, &limited);
    if band_sum >= 1e-6 {
        failures.push(format!("components 1-3 vs band-limited input {band_sum:e}"));
    }

    let examples = [
        ((0, 0), Band::Low),
        ((223, 223), Band::Residual),
        ((14, 14), Band::Mid),
    ];
    for ((u, v), want) in examples {
        let got = band_of(u, v, 224, 224).unwrap();
        if got != want {
            failures.push(format!("band_of({u},{v}) = {got:?}"));
        }
    }
    let map = band_map(224, 224, BandGeometry::AntiDiagonal).unwrap();
    let overlap = (0..224 * 224).any(|i| {
        let members = [Band::Low, Band::Mid, Band::High].iter().filter(|&&b| map[i] == b).count();
        members > 1
    });
    if overlap {
        failures.push("base bands overlap".into());
    }

    let secs = started.elapsed().as_secs_f64();
    if secs >= 10.0 {
        failures.push(format!("took {secs:.1} s"));
    }
    let detail = format!(
        "round trip {round_trip:.1e}/{round_trip32:.1e}, energy {energy:.1e}, band 4 {full_band:.1e}, bands 1-3 {band_sum:.1e}, {secs:.2} s{}",
        if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
    );
    verdict(1, "frequency core", failures.is_empty(), &detail);
}

#[test]
fn criterion_2_gradient_suite() {
    let started = Instant::now();
    let checks = gradcheck::all().unwrap();
    let secs = started.elapsed().as_secs_f64();
    let parts: Vec<String> = checks
        .iter()
        .map(|c| format!("{} {:.1e}<{:.0e}", c.name, c.max_rel_err, c.tolerance))
        .collect();
    let pass = checks.iter().all(|c| c.passed()) && secs < 60.0;
    verdict(2, "gradient suite", pass, &format!("{}, {secs:.1} s", parts.join(", ")));
}

#[test]
fn criterion_3_loss_arithmetic() {
    let mut failures = Vec::new();
    let focal = focal_loss(0.5, 1.0, 2.0).unwrap();
    let want = 0.25 * std::f64::consts::LN_2;
    if (focal - want).abs() > 1e-9 {
        failures.push(format!("focal(0.5,1,2) = {focal}"));
    }
    let eps = 1e-12;
    let below = smooth_l1(&[1.0 - eps], &[0.0]).unwrap();
    let above = smooth_l1(&[1.0 + eps], &[0.0]).unwrap();
    let at = smooth_l1(&[-1.0], &[0.0]).unwrap();
    if (below - above).abs() > 1e-9 || (at - 0.5).abs() > 1e-9 {
        failures.push(format!("smooth L1 seam {below} / {above} / {at}"));
    }
    let w = LossWeights::default();
    let before = overall_loss(0.5, 0.25, 4, &w).unwrap();
    let after = overall_loss(0.5, 0.25, 5, &w).unwrap();
    if before != 0.75 || after != 50.25 {
        failures.push(format!("overall loss {before} at epoch 4, {after} at epoch 5"));
    }
    for &p in &[0.01, 0.3, 0.5, 0.77, 0.99] {
        for &y in &[0.0, 1.0] {
            if focal_loss(p, y, 0.0).unwrap() != bce_loss(p, y).unwrap() {
                failures.push(format!("focal at gamma 0 differs from BCE at p={p}, y={y}"));
            }
        }
    }
    let detail = format!(
        "focal {focal:.12} vs {want:.12}, seam gap {:.1e}, overall {before} -> {after}{}",
        (below - above).abs(),
        if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
    );
    verdict(3, "loss arithmetic", failures.is_empty(), &detail);
}

#[test]
fn criterion_4_metric_arithmetic() {
    let a = acer(0.014, 0.016);
    let b = acer(0.031, 0.008);
    let (fa, fb) = (format_percent(a, 1), format_percent(b, 1));
    let pass = (a - 0.015).abs() < 1e-12 && (b - 0.0195).abs() < 1e-12 && fa == "1.5" && fb == "2.0";
    verdict(
        4,
        "metric arithmetic",
        pass,
        &format!("ACER(1.4%,1.6%) = {fa}%, ACER(3.1%,0.8%) = {}% -> {fb}%", format_percent(b, 2)),
    );
}

fn random_records(rng: &mut ChaCha8Rng) -> Vec<ScoreRecord> {
    let n = rng.random_range(2..=200);
    let levels = rng.random_range(2..50);
    (0..n)
        .map(|i| {
            let bona = match i {
                0 => true,
                1 => false,
                _ => rng.random_bool(0.5),
            };
            ScoreRecord {
                video_id: format!("v{i}"),
                score: f64::from(rng.random_range(0..levels)) / f64::from(levels),
                label: if bona { Label::BonaFide } else { Label::Attack },
                pai: if bona { "none".into() } else { ["print", "replay", "mask"][rng.random_range(0..3)].into() },
                dataset_id: "d".into(),
            }
        })
        .collect()
}

#[test]
fn criterion_5_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = Vec::new();
    for set in 0..200 {
        let rs = random_records(&mut rng);
        let bona: Vec<f64> = rs.iter().filter(|r| r.label == Label::BonaFide).map(|r| r.score).collect();
        let attack: Vec<&ScoreRecord> = rs.iter().filter(|r| r.label == Label::Attack).collect();
        let mut half_units = 0u64;
        for &b in &bona {
            for a in &attack {
                half_units += if b > a.score { 2 } else if b == a.score { 1 } else { 0 };
            }
        }
        let pairs = half_units as f64 / (2 * bona.len() * attack.len()) as f64;
        if auc(&rs).unwrap() != pairs {
            mismatches.push(format!("set {set}: AUC"));
        }

        let t = rng.random_range(-0.1..1.1);
        let rejected = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
        let accepted = attack.iter().filter(|r| r.score >= t).count() as f64 / attack.len() as f64;
        if bpcer(&rs, t).unwrap() != rejected || apcer_pooled(&rs, t).unwrap() != accepted {
            mismatches.push(format!("set {set}: APCER/BPCER"));
        }
        let per = apcer_per_pai(&rs, t).unwrap();
        let mut worst = 0.0f64;
        for (pai, &v) in &per {
            let group: Vec<_> = attack.iter().filter(|r| &r.pai == pai).collect();
            let count = group.iter().filter(|r| r.score >= t).count() as f64 / group.len() as f64;
            if v != count {
                mismatches.push(format!("set {set}: APCER[{pai}]"));
            }
            worst = worst.max(count);
        }
        if apcer_wc(&rs, t).unwrap() != worst {
            mismatches.push(format!("set {set}: APCER_wc"));
        }
    }
    verdict(
        5,
        "metric oracles",
        mismatches.is_empty(),
        &format!("200 sets of <=200 records, {} mismatches {:?}", mismatches.len(), mismatches.first()),
    );
}

#[test]
fn criterion_6_smoke_run() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let started = Instant::now();
    cli(&["make-synthetic", "--out", s(&data), "--videos-per-class", "200", "--frames", "10"]);
    cli(&[
        "train",
        "--config",
        s(&config_path("smoke.toml")),
        "--manifest",
        s(&data.join("manifest.csv")),
        "--out",
        s(&run),
    ]);
    let secs = started.elapsed().as_secs_f64();
    let test = read_scores_file(run.join("scores_test.csv")).unwrap();
    let test_auc = auc(&test).unwrap();
    let pass = test_auc >= 0.95 && secs <= 600.0 && run.join("best.ckpt").is_file();
    verdict(
        6,
        "end-to-end smoke",
        pass,
        &format!(
            "test AUC {test_auc:.4} over {} videos, generate + train {secs:.0} s on {} core(s)",
            test.len(),
            cores()
        ),
    );
}

#[test]
fn criterion_7_ablation_direction() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("ablation");
    cli(&[
        "make-synthetic",
        "--out",
        s(&data),
        "--videos-per-class",
        "100",
        "--frames",
        "4",
        "--size",
        "112",
    ]);
    let started = Instant::now();
    cli(&[
        "ablate",
        "--config",
        s(&config_path("ablation_112.toml")),
        "--manifest",
        s(&data.join("manifest.csv")),
        "--presets",
        "rgb_bce,full_flsl",
        "--seeds",
        "0,1,2",
        "--out",
        s(&out),
    ]);
    let report: AblationReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let aucs = |p: Preset| -> Vec<String> {
        report.rows.iter().filter(|r| r.preset == p).map(|r| format!("{:.3}", r.auc)).collect()
    };
    let full = report.median_auc(Preset::FullFlsl).unwrap();
    let rgb = report.median_auc(Preset::RgbBce).unwrap();
    verdict(
        7,
        "ablation direction",
        full >= rgb,
        &format!(
            "median test AUC full_flsl {full:.4} {:?} vs rgb_bce {rgb:.4} {:?}, {:.0} s",
            aucs(Preset::FullFlsl),
            aucs(Preset::RgbBce),
            started.elapsed().as_secs_f64()
        ),
    );
}

fn determinism_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 6,
        seed: 21,
        ..TrainConfig::default()
    };
    cfg.model.input_size = 32;
    cfg.model.reduction_ratio = 4;
    cfg.model.backbone = BackboneSpec {
        stage_spatial: BackboneSpec::expected_spatial(32),
        ..BackboneSpec::tiny_with_channels([8, 8, 16, 16])
    };
    cfg.data.frames_per_video = 2;
    cfg.data.augment.cutout_min = 4;
    cfg.data.augment.cutout_max = 8;
    cfg
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cli(&["make-synthetic", "--out", s(&data), "--videos-per-class", "12", "--frames", "3", "--size", "32"]);
    let manifest = lmfd_core::data::SampleManifest::read(data.join("manifest.csv")).unwrap();
    let cfg = determinism_config();
    let a = train::<f32>(&cfg, &manifest, &dir.path().join("a")).unwrap();
    let b = train::<f32>(&cfg, &manifest, &dir.path().join("b")).unwrap();
    let same_log = std::fs::read(&a.log_path).unwrap() == std::fs::read(&b.log_path).unwrap();
    let same_ckpt = std::fs::read(&a.checkpoint).unwrap() == std::fs::read(&b.checkpoint).unwrap();

    let (model, _) = load_checkpoint::<f32>(&a.checkpoint).unwrap();
    let dev = open_store(split_frames(&manifest, Split::Dev, &cfg).unwrap(), &cfg, "dev").unwrap();
    let again = evaluate_dev(&model, &dev, &cfg).unwrap();
    let bit_exact = again.loss.total.to_bits() == a.best_dev.loss.total.to_bits()
        && again.auc.to_bits() == a.best_dev.auc.to_bits()
        && again == a.best_dev;
    verdict(
        8,
        "determinism",
        same_log && same_ckpt && bit_exact,
        &format!(
            "{} epochs: logs identical {same_log}, checkpoints identical {same_ckpt}, reloaded dev metrics bit-exact {bit_exact} (dev loss {:e})",
            a.epochs_run, again.loss.total
        ),
    );
}

#[test]
fn criterion_9_leave_one_dataset_out() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let sets = [
        ("alpha", "1", "print,replay"),
        ("beta", "2", "print"),
        ("gamma", "3", "replay"),
        ("delta", "4", "replay,print"),
    ];
    let mut lodo = Vec::new();
    for (id, seed, attacks) in sets {
        let out = dir.path().join(id);
        cli(&[
            "make-synthetic",
            "--out",
            s(&out),
            "--videos-per-class",
            "24",
            "--frames",
            "2",
            "--size",
            "64",
            "--seed",
            seed,
            "--dataset-id",
            id,
            "--attacks",
            attacks,
        ]);
        lodo.push(format!("{id}={}", s(&out.join("manifest.csv"))));
    }
    let out = dir.path().join("protocol");
    let config = config_path("lodo_64.toml");
    let mut args = vec!["protocol", "--config", s(&config), "--out"];
    let out_s = s(&out).to_string();
    args.push(&out_s);
    args.push("--lodo");
    args.extend(lodo.iter().map(String::as_str));
    cli(&args);

    let mut failures = Vec::new();
    let summary: ProtocolSummary =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    if summary.folds.len() != 4 {
        failures.push(format!("{} fold reports", summary.folds.len()));
    }

    // Disjointness, checked directly on the folds the written protocol describes.
    let protocol = ProtocolConfig::read(out.join("protocol.toml")).unwrap();
    let folds = protocol.load_folds().unwrap();
    for (fold, (held, _, _)) in folds.iter().zip(sets) {
        let test_ids = fold.test.dataset_ids();
        let mut seen = fold.train.dataset_ids();
        seen.extend(fold.dev.dataset_ids());
        if test_ids != vec![held] || seen.contains(&held) || seen.len() != 6 {
            failures.push(format!("fold {}: train/dev {seen:?}, test {test_ids:?}", fold.name));
        }
        let test_videos: std::collections::HashSet<_> =
            fold.test.records.iter().map(|r| (&r.dataset_id, &r.video_id)).collect();
        if fold
            .train
            .records
            .iter()
            .chain(&fold.dev.records)
            .any(|r| test_videos.contains(&(&r.dataset_id, &r.video_id)))
        {
            failures.push(format!("fold {}: shared video", fold.name));
        }
    }
    // A fold that tests on a training dataset must be refused.
    let mut leaky = protocol.clone();
    leaky.folds[0].test = leaky.folds[1].test.clone();
    let train0 = leaky.folds[0].train.clone();
    leaky.folds[0].test.extend(train0);
    if leaky.load_folds().is_ok() {
        failures.push("leaky fold accepted".into());
    }

    // Each fold report re-derived from its score files.
    for f in &summary.folds {
        let dev = read_scores_file(out.join(&f.fold).join("scores_dev.csv")).unwrap();
        let test = read_scores_file(out.join(&f.fold).join("scores_test.csv")).unwrap();
        let threshold = match f.threshold_rule {
            ThresholdRule::DevEer => eer_threshold(&dev).unwrap(),
            ThresholdRule::TestEer => eer_threshold(&test).unwrap(),
            ThresholdRule::Fixed(t) => t,
        };
        let again = metric_report(&test, threshold).unwrap();
        if again != f.report {
            failures.push(format!("fold {} report does not match its scores", f.fold));
        }
    }

    // Mean and population std over the four folds, written out longhand.
    let by_hand = |pick: fn(&lmfd_core::eval::MetricReport) -> f64| -> (f64, f64) {
        let v: Vec<f64> = summary.folds.iter().map(|f| pick(&f.report)).collect();
        let mean = (v[0] + v[1] + v[2] + v[3]) / 4.0;
        let var = ((v[0] - mean).powi(2) + (v[1] - mean).powi(2) + (v[2] - mean).powi(2) + (v[3] - mean).powi(2)) / 4.0;
        (mean, var.sqrt())
    };
    let hter = by_hand(|r| r.hter);
    let auc_ms = by_hand(|r| r.auc);
    let acer_ms = by_hand(|r| r.acer);
    if summary.folds.len() == 4
        && (hter != (summary.hter.mean, summary.hter.std)
            || auc_ms != (summary.auc.mean, summary.auc.std)
            || acer_ms != (summary.acer.mean, summary.acer.std))
        {
            failures.push("mean/std differ from the longhand computation".into());
        }
    let folds_txt: Vec<String> = summary
        .folds
        .iter()
        .map(|f| format!("{} HTER {} AUC {}", f.fold, format_percent(f.report.hter, 1), format_percent(f.report.auc, 1)))
        .collect();
    verdict(
        9,
        "leave-one-dataset-out",
        failures.is_empty(),
        &format!(
            "{}; HTER {}±{}%{}",
            folds_txt.join(", "),
            format_percent(hter.0, 1),
            format_percent(hter.1, 1),
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    );
}

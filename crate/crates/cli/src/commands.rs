use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use ndarray::{Array3, Axis};
use serde::Serialize;

use lmfd_core::data::{
    crop_and_resize, generate_synthetic, load_rgb, normalize_in_place, AttackMode, Label,
    Normalization, SampleManifest, Split, SyntheticSpec,
};
use lmfd_core::eval::{
    eer_threshold, embedding_matrix, evaluate_fold, metric_report, predict_store,
    read_scores_file, reduce_embeddings, scatter_svg, write_coords_csv, write_npy, write_npy_dyn,
    write_scores_file, MetricReport, ProtocolConfig, ProtocolSummary, ThresholdRule,
};
use lmfd_core::freq::{decompose, BandGeometry, FilterBank, MaskInit, N_BANDS};
use lmfd_core::network::LmfdModel;
use lmfd_core::train::{
    fold_from_splits, load_checkpoint, open_store, run_ablation, run_protocol, score_split,
    split_frames, train, Checkpoint, CheckpointHeader, Preset, TrainConfig,
};

use crate::{Command, ConfigArgs};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            manifest,
            out,
            preset,
            no_test,
        } => cmd_train(&config, &manifest, &out, preset.as_deref(), no_test),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            threshold,
            frames_per_video,
            out,
        } => cmd_eval(&checkpoint, &manifest, &split, &threshold, frames_per_video, &out),
        Command::Decompose {
            images,
            checkpoint,
            size,
            mask_snapshot,
            out,
        } => cmd_decompose(&images, checkpoint.as_deref(), size, mask_snapshot, &out),
        Command::MakeSynthetic {
            out,
            videos_per_class,
            frames,
            size,
            seed,
            dataset_id,
            attacks,
        } => {
            let attack_modes = attacks
                .iter()
                .map(|a| match a.trim() {
                    "print" => Ok(AttackMode::LowpassPrint),
                    "replay" => Ok(AttackMode::MoireReplay),
                    other => Err(lmfd_core::Error::Config(format!(
                        "unknown attack mode {other:?} (expected print or replay)"
                    ))),
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let spec = SyntheticSpec {
                dataset_id,
                n_videos_per_class: videos_per_class,
                frames_per_video: frames,
                image_size: size,
                attack_modes,
                seed,
                ..SyntheticSpec::default()
            };
            let manifest = generate_synthetic(&spec, &out)?;
            print_counts(&manifest);
            println!("wrote {} frames to {}", manifest.len(), out.display());
            Ok(())
        }
        Command::ValidateManifest {
            manifest,
            check_files,
        } => cmd_validate(&manifest, check_files),
        Command::ExportEmbeddings {
            checkpoint,
            manifest,
            split,
            frames_per_video,
            out,
        } => cmd_export(&checkpoint, &manifest, &split, frames_per_video, &out),
        Command::Report {
            scores,
            dev_scores,
            threshold,
            summary,
            json,
        } => cmd_report(scores.as_deref(), dev_scores.as_deref(), threshold, summary.as_deref(), json.as_deref()),
        Command::Ablate {
            config,
            manifest,
            protocol,
            presets,
            seeds,
            out,
        } => cmd_ablate(&config, manifest.as_deref(), protocol.as_deref(), &presets, &seeds, &out),
        Command::Protocol {
            config,
            protocol,
            lodo,
            out,
        } => cmd_protocol(&config, protocol.as_deref(), &lodo, &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let base = match &args.config {
        Some(path) => TrainConfig::read(path)?,
        None => TrainConfig::default(),
    };
    Ok(base.with_overrides(&args.overrides)?)
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(s.parse::<Split>()?)
}

/// Training config stored in a checkpoint, or defaults matching its model.
fn checkpoint_config(header: &CheckpointHeader) -> TrainConfig {
    if let Some(cfg) = header
        .metadata
        .get("config")
        .and_then(|v| serde_json::from_value::<TrainConfig>(v.clone()).ok())
    {
        return cfg;
    }
    let mut cfg = TrainConfig {
        model: header.model.clone(),
        ..TrainConfig::default()
    };
    cfg.data.normalization = header.normalization;
    cfg
}

fn print_counts(m: &SampleManifest) {
    for split in Split::ALL {
        println!(
            "{:<6} bona fide {:>6}  attack {:>6}",
            split.as_str(),
            m.count(split, Label::BonaFide),
            m.count(split, Label::Attack)
        );
    }
}

fn cmd_train(
    args: &ConfigArgs,
    manifest_path: &Path,
    out: &Path,
    preset: Option<&str>,
    no_test: bool,
) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(p) = preset {
        cfg = p.parse::<Preset>()?.apply(&cfg);
    }
    create_dir(out)?;
    cfg.write(out.join(RESOLVED_CONFIG))?;
    let manifest = SampleManifest::read(manifest_path)?;
    let outcome = train::<f32>(&cfg, &manifest, out)?;
    let mut summary = serde_json::json!({
        "epochs_run": outcome.epochs_run,
        "best_epoch": outcome.best_epoch,
        "stopped_early": outcome.stopped_early,
        "train_frames": outcome.train_frames,
        "dev_frames": outcome.dev_frames,
        "best_dev": outcome.best_dev,
        "train_seconds": outcome.seconds,
    });
    println!(
        "trained {} epochs in {:.1}s; best epoch {} (dev loss {:.5}, dev AUC {:.4})",
        outcome.epochs_run,
        outcome.seconds,
        outcome.best_epoch,
        outcome.best_dev.loss.total,
        outcome.best_dev.auc
    );
    if !no_test && !manifest.split(Split::Test).is_empty() {
        let (model, _) = load_checkpoint::<f32>(&outcome.checkpoint)?;
        let dev = score_split(&model, &manifest, Split::Dev, &cfg)?;
        let test = score_split(&model, &manifest, Split::Test, &cfg)?;
        write_scores_file(&dev, out.join("scores_dev.csv"))?;
        write_scores_file(&test, out.join("scores_test.csv"))?;
        let fold = evaluate_fold("test", ThresholdRule::DevEer, &dev, &test)?;
        println!("test split at the dev EER threshold:\n{}", fold.report.table());
        write_json(&out.join("test_report.json"), &fold.report)?;
        summary["test"] = serde_json::to_value(&fold.report)?;
    }
    write_json(&out.join("run_summary.json"), &summary)?;
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    manifest_path: &Path,
    split: &str,
    threshold: &str,
    frames_per_video: Option<usize>,
    out: &Path,
) -> Result<()> {
    let split = parse_split(split)?;
    let (model, header) = load_checkpoint::<f32>(checkpoint)?;
    let mut cfg = checkpoint_config(&header);
    if let Some(k) = frames_per_video {
        cfg.data.frames_per_video = k;
    }
    let manifest = SampleManifest::read(manifest_path)?;
    let scores = score_split(&model, &manifest, split, &cfg)?;
    let thr = match threshold {
        "dev-eer" => {
            let dev = score_split(&model, &manifest, Split::Dev, &cfg)
                .context("the dev-eer threshold needs a scorable dev split")?;
            eer_threshold(&dev)?
        }
        "test-eer" => eer_threshold(&scores)?,
        v => v.parse::<f64>().map_err(|_| {
            lmfd_core::Error::Config(format!(
                "threshold must be dev-eer, test-eer or a number, got {v:?}"
            ))
        })?,
    };
    let report = metric_report(&scores, thr)?;
    create_dir(out)?;
    write_scores_file(&scores, out.join(format!("scores_{}.csv", split.as_str())))?;
    write_json(&out.join(format!("metrics_{}.json", split.as_str())), &report)?;
    println!("{}", report.table());
    Ok(())
}

/// Maps each channel of a `[3, H, W]` tile to bytes over the tile's own range.
fn tile_to_rgb(tile: &Array3<f64>) -> image::RgbImage {
    let (_, h, w) = tile.dim();
    let lo = tile.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = tile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (((tile[[c, y as usize, x as usize]] - lo) / span) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Expands directories into their image files, sorted by name.
fn expand_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("cannot list {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!(lmfd_core::Error::Validation("no images to decompose".into()));
    }
    Ok(out)
}

/// Row-major text grid, one row per line, 6 significant digits.
fn write_mask_grid(path: &Path, mask: ndarray::ArrayView2<'_, f64>) -> Result<()> {
    let mut text = String::new();
    for row in mask.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.5e}")).collect();
        text += &cells.join(" ");
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_decompose(
    images: &[PathBuf],
    checkpoint: Option<&Path>,
    size: usize,
    mask_snapshot: bool,
    out: &Path,
) -> Result<()> {
    let images = expand_images(images)?;
    let (bank, norm): (FilterBank<f64>, Normalization) = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            let model: LmfdModel<f64> = ckpt.into_model()?;
            let Some(bank) = model.filter_bank else {
                bail!(lmfd_core::Error::Config(
                    "checkpoint was trained without the frequency stream".into()
                ));
            };
            (bank, ckpt.header.normalization)
        }
        None => (
            FilterBank::new(size, size, BandGeometry::AntiDiagonal, MaskInit::Zeros, 0)?,
            Normalization::default(),
        ),
    };
    let size = bank.height();
    create_dir(out)?;
    if mask_snapshot {
        let combined = bank.combined();
        for band in 0..N_BANDS {
            write_mask_grid(
                &out.join(format!("mask_band{}.txt", band + 1)),
                combined.index_axis(Axis(0), band),
            )?;
        }
    }
    for path in &images {
        let img = load_rgb(path)?;
        let mut x = crop_and_resize(&img, None, size)?;
        normalize_in_place(&mut x, &norm);
        let x = x.mapv(f64::from);
        let stack = decompose(&x, &bank)?;
        let stem = path
            .file_stem()
            .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        write_npy_dyn(out.join(format!("{stem}_bands.npy")), &stack.components.view().into_dyn())?;
        let c = stack.source_shape.2;
        let mut panel = image::RgbImage::new((N_BANDS * size) as u32, size as u32);
        for band in 0..N_BANDS {
            let tile = stack
                .components
                .slice_axis(Axis(0), ndarray::Slice::from(band * c..band * c + c.min(3)))
                .to_owned();
            let tile = if c == 1 {
                ndarray::concatenate![Axis(0), tile, tile, tile]
            } else {
                tile
            };
            image::imageops::replace(&mut panel, &tile_to_rgb(&tile), (band * size) as i64, 0);
        }
        let png = out.join(format!("{stem}_bands.png"));
        panel.save(&png).with_context(|| format!("cannot write {}", png.display()))?;
        info!("decomposed {} -> {}", path.display(), png.display());
    }
    println!("wrote {} decomposition(s) to {}", images.len(), out.display());
    Ok(())
}

fn cmd_validate(path: &Path, check_files: bool) -> Result<()> {
    let manifest = SampleManifest::read(path)?;
    println!("{}: {} records, structure ok", path.display(), manifest.len());
    print_counts(&manifest);
    if check_files {
        let issues = manifest.file_issues();
        for issue in &issues {
            println!("row {}: {}", issue.row, issue.message);
        }
        if !issues.is_empty() {
            bail!(lmfd_core::Error::Validation(format!(
                "{} record(s) failed file checks",
                issues.len()
            )));
        }
        println!("all {} images readable, crops inside bounds", manifest.len());
    }
    Ok(())
}

fn cmd_export(
    checkpoint: &Path,
    manifest_path: &Path,
    split: &str,
    frames_per_video: Option<usize>,
    out: &Path,
) -> Result<()> {
    let split = parse_split(split)?;
    let (model, header) = load_checkpoint::<f32>(checkpoint)?;
    let mut cfg = checkpoint_config(&header);
    if let Some(k) = frames_per_video {
        cfg.data.frames_per_video = k;
    }
    let manifest = SampleManifest::read(manifest_path)?;
    let frames = split_frames(&manifest, split, &cfg)?;
    let store = open_store(frames, &cfg, split.as_str())?;
    let scores = predict_store(&model, &store, cfg.data.eval_batch_size)?;
    create_dir(out)?;

    let csv_path = out.join("embeddings.csv");
    let f = File::create(&csv_path).with_context(|| format!("cannot create {}", csv_path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let dim = scores.predictions.first().map_or(0, |p| p.embedding.len());
    let mut header_row = vec!["video_id".to_string(), "frame_id".into(), "label".into(), "pai".into()];
    header_row.extend((0..dim).map(|j| format!("e{j}")));
    w.write_record(&header_row)?;
    let mut ids = Vec::new();
    let mut classes = Vec::new();
    for (&i, p) in scores.indices.iter().zip(&scores.predictions) {
        let r = &store.manifest.records[i];
        let mut row = vec![r.video_id.clone(), p.frame_id.clone(), r.label.to_string(), r.pai.clone()];
        row.extend(p.embedding.iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
        ids.push(p.frame_id.clone());
        classes.push(match r.label {
            Label::BonaFide => r.label.to_string(),
            Label::Attack => r.pai.clone(),
        });
    }
    w.flush()?;

    let x = embedding_matrix(&scores);
    if x.nrows() < 2 {
        warn!("fewer than two frames; skipping PCA");
        return Ok(());
    }
    let red = reduce_embeddings(&x)?;
    write_npy(out.join("embeddings_pca.npy"), &red.reduced)?;
    let coords = File::create(out.join("pca_2d.csv"))?;
    write_coords_csv(BufWriter::new(coords), &ids, &classes, &red.coords)?;
    if red.coords.ncols() >= 2 {
        std::fs::write(out.join("pca_2d.svg"), scatter_svg(&red.coords, &classes)?)?;
    }
    println!(
        "exported {} embeddings of dimension {dim}; PCA kept {} components",
        x.nrows(),
        red.reduced.ncols()
    );
    Ok(())
}

fn cmd_report(
    scores: Option<&Path>,
    dev_scores: Option<&Path>,
    threshold: Option<f64>,
    summary: Option<&Path>,
    json: Option<&Path>,
) -> Result<()> {
    if let Some(path) = summary {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let s: ProtocolSummary = serde_json::from_str(&text)?;
        println!("{} ({:?}, std over folds uses the n divisor)", s.protocol, s.kind);
        println!("{}", s.table());
        if let Some(j) = json {
            write_json(j, &s)?;
        }
        return Ok(());
    }
    let Some(path) = scores else {
        bail!(lmfd_core::Error::Config("report needs --scores or --summary".into()));
    };
    let records = read_scores_file(path)?;
    let thr = match (threshold, dev_scores) {
        (Some(t), _) => t,
        (None, Some(dev)) => eer_threshold(&read_scores_file(dev)?)?,
        (None, None) => eer_threshold(&records)?,
    };
    let report: MetricReport = metric_report(&records, thr)?;
    println!("{}", report.table());
    if let Some(j) = json {
        write_json(j, &report)?;
    }
    Ok(())
}

fn cmd_ablate(
    args: &ConfigArgs,
    manifest: Option<&Path>,
    protocol: Option<&Path>,
    presets: &[String],
    seeds: &[u64],
    out: &Path,
) -> Result<()> {
    let cfg = load_config(args)?;
    let presets = presets
        .iter()
        .map(|p| p.trim().parse::<Preset>())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (folds, rule) = match (manifest, protocol) {
        (Some(m), _) => (
            vec![fold_from_splits("split", &SampleManifest::read(m)?)],
            ThresholdRule::DevEer,
        ),
        (None, Some(p)) => {
            let p = ProtocolConfig::read(p)?;
            (p.load_folds()?, p.threshold_rule())
        }
        (None, None) => bail!(lmfd_core::Error::Config("ablate needs --manifest or --protocol".into())),
    };
    create_dir(out)?;
    cfg.write(out.join(RESOLVED_CONFIG))?;
    let report = run_ablation::<f32>(&cfg, &presets, seeds, &folds, rule, out)?;
    println!("{}", report.table());
    Ok(())
}

fn cmd_protocol(args: &ConfigArgs, protocol: Option<&Path>, lodo: &[String], out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let protocol = match protocol {
        Some(p) => ProtocolConfig::read(p)?,
        None => {
            let pairs = lodo
                .iter()
                .map(|item| {
                    item.split_once('=')
                        .map(|(id, path)| (id.to_string(), std::path::absolute(path).unwrap_or_else(|_| path.into())))
                        .ok_or_else(|| lmfd_core::Error::Config(format!("--lodo expects ID=MANIFEST, got {item:?}")))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            ProtocolConfig::leave_one_dataset_out("leave_one_dataset_out", &pairs)?
        }
    };
    create_dir(out)?;
    cfg.write(out.join(RESOLVED_CONFIG))?;
    std::fs::write(out.join("protocol.toml"), protocol.to_toml()?)?;
    let (summary, _) = run_protocol::<f32>(&cfg, &protocol, out)?;
    println!("{}", summary.table());
    Ok(())
}

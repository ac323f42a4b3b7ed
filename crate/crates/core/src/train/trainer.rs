use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{read_tensors, save_checkpoint};
use super::config::{Monitor, TrainConfig};
use super::optim::Sgd;
use crate::data::{
    balance_classes, derive_seed, select_frames, FrameStore, Label, SampleManifest, Split,
};
use crate::error::{invalid, Error, Result};
use crate::eval::{eer_threshold, metric_report, predict_store, video_scores, ScoreRecord};
use crate::losses::{batch_loss, LossWeights};
use crate::network::LmfdModel;
use crate::nn::{zero_grads, Mode, Module, Param};
use crate::tensor::Scalar;

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pixel: f64,
    pub binary: f64,
    pub total: f64,
}

/// Dev-split evaluation of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    /// Frame-mean loss with the pixel weight at its initial value.
    pub loss: LossParts,
    pub auc: f64,
    pub acer: f64,
    pub apcer_wc: f64,
    pub bpcer: f64,
    /// Dev equal-error threshold the rates are computed at.
    pub threshold: f64,
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub lambda1: f64,
    pub train: LossParts,
    pub dev: DevMetrics,
    pub monitor: f64,
    pub improved: bool,
    pub best_epoch: usize,
    pub epochs_since_improve: usize,
}

/// Mutable bookkeeping of a run.
///
/// The shuffle and augmentation generators are re-derived from
/// `(seed, epoch)`, so `seed` and `epoch` are the full RNG state.
#[derive(Debug, Clone)]
pub struct RunState<T> {
    pub epoch: usize,
    pub seed: u64,
    pub best_dev_metric: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_improve: usize,
    pub optimizer: Sgd<T>,
}

impl<T: Scalar> RunState<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            seed: cfg.seed,
            best_dev_metric: f64::INFINITY,
            best_epoch: None,
            epochs_since_improve: 0,
            optimizer: Sgd::new(cfg.optimizer.momentum, cfg.optimizer.weight_decay),
        }
    }

    /// Records the monitored value of the epoch just finished; returns
    /// whether it strictly improved on the best so far.
    pub fn observe(&mut self, value: f64) -> bool {
        let improved = value < self.best_dev_metric;
        if improved {
            self.best_dev_metric = value;
            self.best_epoch = Some(self.epoch);
            self.epochs_since_improve = 0;
        } else {
            self.epochs_since_improve += 1;
        }
        self.epoch += 1;
        improved
    }

    pub fn should_stop(&self, cfg: &TrainConfig) -> bool {
        self.epochs_since_improve >= cfg.patience || self.epoch >= cfg.max_epochs
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_dev: DevMetrics,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub train_frames: usize,
    pub dev_frames: usize,
    pub seconds: f64,
}

fn require_both_classes(m: &SampleManifest, what: &str) -> Result<()> {
    for label in [Label::BonaFide, Label::Attack] {
        if !m.records.iter().any(|r| r.label == label) {
            return invalid(format!("{what} has no {label} records"));
        }
    }
    Ok(())
}

/// Opens a store and refuses to continue if any record failed to load.
pub fn open_store(manifest: SampleManifest, cfg: &TrainConfig, what: &str) -> Result<FrameStore> {
    let (store, issues) = FrameStore::open(manifest, cfg.model.input_size, cfg.data.normalization);
    if let Some(first) = issues.first() {
        return invalid(format!(
            "{what}: {} record(s) failed to load; first: {}: {}",
            issues.len(),
            first.path.display(),
            first.message
        ));
    }
    Ok(store)
}

/// Frame selection for one split of `manifest`.
pub fn split_frames(manifest: &SampleManifest, split: Split, cfg: &TrainConfig) -> Result<SampleManifest> {
    let part = manifest.split(split);
    if part.is_empty() {
        return invalid(format!("manifest has no {} records", split.as_str()));
    }
    select_frames(&part, cfg.data.frames_per_video)
}

fn to_scalar<T: Scalar>(x: &ndarray::Array4<f32>) -> ndarray::Array4<T> {
    x.mapv(|v| T::of(f64::from(v)))
}

/// Dev loss and metrics of `model` over every frame of `store`.
pub fn evaluate_dev<T: Scalar>(
    model: &LmfdModel<T>,
    store: &FrameStore,
    cfg: &TrainConfig,
) -> Result<DevMetrics> {
    let weights: LossWeights = cfg.loss.unscheduled();
    let mut sums = LossParts::default();
    let mut predictions = Vec::with_capacity(store.len());
    let usable = store.usable();
    for chunk in usable.chunks(cfg.data.eval_batch_size) {
        let batch = store.batch(chunk, None)?;
        let (out, _) = model.forward(&to_scalar(&batch.images), Mode::Eval)?;
        let loss = batch_loss(&out.pixel_logits, &out.binary_logits, &batch.labels, 0, &weights)?;
        let n = chunk.len() as f64;
        sums.pixel += loss.pixel * n;
        sums.binary += loss.binary * n;
        sums.total += loss.total * n;
        let ids: Vec<String> = chunk.iter().map(|i| i.to_string()).collect();
        predictions.extend(out.predictions(&ids));
    }
    let n = usable.len().max(1) as f64;
    let loss = LossParts {
        pixel: sums.pixel / n,
        binary: sums.binary / n,
        total: sums.total / n,
    };
    let frames = crate::eval::FrameScores {
        indices: usable,
        predictions,
    };
    let videos = video_scores(store, &frames, cfg.model.video_score)?;
    let threshold = eer_threshold(&videos)?;
    let report = metric_report(&videos, threshold)?;
    Ok(DevMetrics {
        loss,
        auc: report.auc,
        acer: report.acer,
        apcer_wc: report.apcer_wc,
        bpcer: report.bpcer,
        threshold,
    })
}

/// Video scores of `model` over one split of `manifest`.
pub fn score_split<T: Scalar>(
    model: &LmfdModel<T>,
    manifest: &SampleManifest,
    split: Split,
    cfg: &TrainConfig,
) -> Result<Vec<ScoreRecord>> {
    let frames = split_frames(manifest, split, cfg)?;
    let store = open_store(frames, cfg, split.as_str())?;
    let predictions = predict_store(model, &store, cfg.data.eval_batch_size)?;
    video_scores(&store, &predictions, cfg.model.video_score)
}

fn first_non_finite<T: Scalar>(model: &LmfdModel<T>) -> Option<String> {
    let mut bad = None;
    model.visit(&mut |p: &Param<T>| {
        if bad.is_none() && p.value.iter().any(|v| !v.is_finite()) {
            bad = Some(p.name.clone());
        }
    });
    bad
}

fn load_pretrained<T: Scalar>(model: &mut LmfdModel<T>) -> Result<()> {
    let Some(path) = model.config.backbone.pretrained_weights_path.clone() else {
        return Ok(());
    };
    let mut tensors = read_tensors(&path)?;
    // Accept both bare trunk names and a checkpoint's "rgb." names.
    let renamed: Vec<(String, String)> = tensors
        .keys()
        .filter_map(|k| k.strip_prefix("rgb.").map(|s| (k.clone(), s.to_string())))
        .collect();
    for (from, to) in renamed {
        let v = tensors.remove(&from).expect("key listed above");
        tensors.insert(to, v);
    }
    let n = model.rgb.load_pretrained("rgb.", &tensors)?;
    let m = match &mut model.mfd {
        Some(trunk) => trunk.load_pretrained("mfd.", &tensors)?,
        None => 0,
    };
    if n == 0 {
        return Err(Error::Config(format!(
            "{} holds no tensors matching the backbone",
            path.display()
        )));
    }
    info!("initialised {n} rgb and {m} mfd tensors from {}", path.display());
    Ok(())
}

/// Trains on the train split, monitoring the dev split, and writes
/// `train_log.jsonl` and `best.ckpt` into `out_dir`.
pub fn train<T: Scalar>(cfg: &TrainConfig, manifest: &SampleManifest, out_dir: &Path) -> Result<TrainOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    let mut train_m = split_frames(manifest, Split::Train, cfg)?;
    require_both_classes(&train_m, "train split")?;
    if cfg.data.balance {
        train_m = balance_classes(&train_m)?;
    }
    let dev_m = split_frames(manifest, Split::Dev, cfg)?;
    require_both_classes(&dev_m, "dev split")?;
    let train_store = open_store(train_m, cfg, "train split")?;
    let dev_store = open_store(dev_m, cfg, "dev split")?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let mut log_file =
        BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

    let mut model = LmfdModel::<T>::new(cfg.model.clone(), cfg.seed)?;
    load_pretrained(&mut model)?;
    let mut state = RunState::<T>::new(cfg);
    let augment_seed = derive_seed(cfg.seed, AUGMENT_STREAM, 0);
    let mut order = train_store.usable();
    let mut log = Vec::new();
    let mut best_dev = None;

    info!(
        "training on {} frames, monitoring {} dev frames",
        order.len(),
        dev_store.len()
    );
    while !state.should_stop(cfg) {
        let epoch = state.epoch;
        let lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            SHUFFLE_STREAM,
            epoch as u64,
        )));
        let mut sums = LossParts::default();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_store.batch(chunk, Some((&cfg.data.augment, augment_seed, epoch as u64)))?;
            let (out, cache) = model.forward(&to_scalar(&batch.images), Mode::Train)?;
            let loss = batch_loss(&out.pixel_logits, &out.binary_logits, &batch.labels, epoch, &cfg.loss)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite training loss at epoch {epoch}, step {step} (pixel {}, binary {})",
                    loss.pixel, loss.binary
                )));
            }
            zero_grads(&mut model);
            model.backward(&cache, &loss.d_pixel_logits, &loss.d_binary_logits);
            state.optimizer.step(&mut model, lr);
            if let Some(name) = first_non_finite(&model) {
                return Err(Error::Divergence(format!(
                    "parameter {name} became non-finite at epoch {epoch}, step {step}"
                )));
            }
            let n = chunk.len() as f64;
            sums.pixel += loss.pixel * n;
            sums.binary += loss.binary * n;
            sums.total += loss.total * n;
        }
        let n = order.len() as f64;
        let train_loss = LossParts {
            pixel: sums.pixel / n,
            binary: sums.binary / n,
            total: sums.total / n,
        };
        let dev = evaluate_dev(&model, &dev_store, cfg)?;
        if !dev.loss.total.is_finite() {
            return Err(Error::Divergence(format!("non-finite dev loss at epoch {epoch}")));
        }
        let monitor = match cfg.monitor {
            Monitor::DevLoss => dev.loss.total,
            Monitor::DevAcer => dev.acer,
        };
        let improved = state.observe(monitor);
        if improved {
            let meta = serde_json::json!({
                "epoch": epoch,
                "dev": &dev,
                "config": cfg,
            });
            save_checkpoint(&ckpt_path, &model, &cfg.data.normalization, meta)?;
            best_dev = Some(dev.clone());
        }
        let entry = EpochLog {
            epoch,
            lr,
            lambda1: cfg.loss.lambda1(epoch),
            train: train_loss,
            dev,
            monitor,
            improved,
            best_epoch: state.best_epoch.expect("first epoch always improves"),
            epochs_since_improve: state.epochs_since_improve,
        };
        info!(
            "epoch {epoch}: lr {lr:.6} train {:.5} dev {:.5} auc {:.4} acer {:.4}{}",
            entry.train.total,
            entry.dev.loss.total,
            entry.dev.auc,
            entry.dev.acer,
            if improved { " *" } else { "" }
        );
        serde_json::to_writer(&mut log_file, &entry)?;
        writeln!(log_file).map_err(|e| Error::io(&log_path, e))?;
        log_file.flush().map_err(|e| Error::io(&log_path, e))?;
        log.push(entry);
    }
    let stopped_early = state.epoch < cfg.max_epochs;
    if stopped_early {
        warn!(
            "no dev improvement for {} epochs; stopped after epoch {}",
            cfg.patience,
            state.epoch - 1
        );
    }
    Ok(TrainOutcome {
        epochs_run: state.epoch,
        best_epoch: state.best_epoch.expect("at least one epoch ran"),
        best_dev: best_dev.expect("at least one epoch ran"),
        stopped_early,
        checkpoint: ckpt_path,
        log_path,
        train_frames: order.len(),
        dev_frames: dev_store.len(),
        seconds: started.elapsed().as_secs_f64(),
        log,
    })
}

/// Parses a training log written by [`train`].
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EpochLog>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_state_counts_epochs_without_improvement() {
        let cfg = TrainConfig {
            patience: 2,
            max_epochs: 10,
            ..TrainConfig::default()
        };
        let mut s = RunState::<f32>::new(&cfg);
        assert!(s.observe(1.0));
        assert!(!s.observe(1.0));
        assert!(s.observe(0.5));
        assert!(!s.observe(0.7));
        assert!(!s.should_stop(&cfg));
        assert!(!s.observe(0.6));
        assert!(s.should_stop(&cfg));
        assert_eq!(s.best_epoch, Some(2));
        assert_eq!(s.epoch, 5);
    }

    #[test]
    fn run_state_respects_max_epochs() {
        let cfg = TrainConfig {
            patience: 100,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let mut s = RunState::<f32>::new(&cfg);
        let mut v = 10.0;
        while !s.should_stop(&cfg) {
            v -= 1.0;
            s.observe(v);
        }
        assert_eq!(s.epoch, 3);
    }
}

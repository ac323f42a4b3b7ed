use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::checkpoint::load_checkpoint;
use super::config::{Preset, TrainConfig};
use super::trainer::{score_split, train};
use crate::data::{SampleManifest, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_fold, format_percent, summarize, write_scores_file, FoldData, FoldReport,
    ProtocolConfig, ProtocolSummary, ThresholdRule,
};
use crate::tensor::Scalar;

/// Outcome of training and testing one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRun {
    pub report: FoldReport,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub seconds: f64,
}

/// A manifest's own train/dev/test splits as a single fold.
pub fn fold_from_splits(name: &str, manifest: &SampleManifest) -> FoldData {
    let resolved = SampleManifest::merge(std::slice::from_ref(manifest));
    FoldData {
        name: name.into(),
        train: resolved.split(Split::Train),
        dev: resolved.split(Split::Dev),
        test: resolved.split(Split::Test),
    }
}

/// One manifest whose split column reflects the fold's roles.
pub fn fold_manifest(fold: &FoldData) -> SampleManifest {
    let relabel = |m: &SampleManifest, split: Split| {
        let records: Vec<SampleRecord> = m
            .records
            .iter()
            .map(|r| SampleRecord {
                frame_path: m.resolve(r),
                split,
                ..r.clone()
            })
            .collect();
        SampleManifest::new(records, "")
    };
    SampleManifest::merge(&[
        relabel(&fold.train, Split::Train),
        relabel(&fold.dev, Split::Dev),
        relabel(&fold.test, Split::Test),
    ])
}

/// Trains on the fold, reloads the best checkpoint and reports test metrics.
/// Dev and test scores are written beside the checkpoint.
pub fn run_fold<T: Scalar>(
    cfg: &TrainConfig,
    fold: &FoldData,
    rule: ThresholdRule,
    out_dir: &Path,
) -> Result<FoldRun> {
    let manifest = fold_manifest(fold);
    let outcome = train::<T>(cfg, &manifest, out_dir)?;
    let (model, _) = load_checkpoint::<T>(&outcome.checkpoint)?;
    let dev = score_split(&model, &manifest, Split::Dev, cfg)?;
    let test = score_split(&model, &manifest, Split::Test, cfg)?;
    write_scores_file(&dev, out_dir.join("scores_dev.csv"))?;
    write_scores_file(&test, out_dir.join("scores_test.csv"))?;
    let report = evaluate_fold(&fold.name, rule, &dev, &test)?;
    info!(
        "fold {}: test HTER {}% AUC {}%",
        fold.name,
        format_percent(report.report.hter, 2),
        format_percent(report.report.auc, 2)
    );
    Ok(FoldRun {
        report,
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        seconds: outcome.seconds,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains one model per fold (in `out_dir/<fold>`) and aggregates the reports.
pub fn run_protocol<T: Scalar>(
    cfg: &TrainConfig,
    protocol: &ProtocolConfig,
    out_dir: &Path,
) -> Result<(ProtocolSummary, Vec<FoldRun>)> {
    // load_folds validates every fold before any training starts.
    let folds = protocol.load_folds()?;
    let rule = protocol.threshold_rule();
    let mut runs = Vec::with_capacity(folds.len());
    for fold in &folds {
        runs.push(run_fold::<T>(cfg, fold, rule, &out_dir.join(&fold.name))?);
    }
    let summary = summarize(
        &protocol.name,
        protocol.kind,
        runs.iter().map(|r| r.report.clone()).collect(),
    )?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok((summary, runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: Preset,
    pub seed: u64,
    pub fold: String,
    pub hter: f64,
    pub auc: f64,
    pub acer: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

impl AblationReport {
    fn values(&self, preset: Preset, fold: Option<&str>, f: fn(&AblationRow) -> f64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.preset == preset && fold.is_none_or(|name| r.fold == name))
            .map(f)
            .collect()
    }

    /// Median test AUC of `preset` over seeds and folds.
    pub fn median_auc(&self, preset: Preset) -> Option<f64> {
        median(self.values(preset, None, |r| r.auc))
    }

    /// One row per preset, HTER and AUC (median over seeds) per fold, in percent.
    pub fn table(&self) -> String {
        let mut folds: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !folds.contains(&r.fold.as_str()) {
                folds.push(&r.fold);
            }
        }
        let presets: Vec<Preset> = {
            let set: std::collections::BTreeSet<Preset> = self.rows.iter().map(|r| r.preset).collect();
            set.into_iter().collect()
        };
        let mut s = format!("{:<12} {:>4} {:>4} {:>4} {:>5}", "preset", "RGB", "MFD", "HAM", "loss");
        for f in &folds {
            s += &format!(" {:>12} {:>12}", format!("{f} HTER"), format!("{f} AUC"));
        }
        s.push('\n');
        let mark = |b: bool| if b { "x" } else { "" };
        for p in presets {
            let (mfd, ham, kind) = p.flags();
            let loss = match kind {
                crate::losses::LossKind::Bce => "BCE",
                crate::losses::LossKind::FocalSl => "FL+SL",
            };
            s += &format!("{:<12} {:>4} {:>4} {:>4} {:>5}", p.as_str(), "x", mark(mfd), mark(ham), loss);
            for f in &folds {
                let h = median(self.values(p, Some(f), |r| r.hter));
                let a = median(self.values(p, Some(f), |r| r.auc));
                let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format_percent(v, 2));
                s += &format!(" {:>12} {:>12}", cell(h), cell(a));
            }
            s.push('\n');
        }
        s
    }
}

/// Trains every preset under every seed on every fold with otherwise
/// identical settings. Runs land in `out_dir/<preset>/seed<k>/<fold>`.
pub fn run_ablation<T: Scalar>(
    base: &TrainConfig,
    presets: &[Preset],
    seeds: &[u64],
    folds: &[FoldData],
    rule: ThresholdRule,
    out_dir: &Path,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut done: BTreeMap<(Preset, u64, String), ()> = BTreeMap::new();
    for &preset in presets {
        for &seed in seeds {
            let mut cfg = preset.apply(base);
            cfg.seed = seed;
            for fold in folds {
                if done.insert((preset, seed, fold.name.clone()), ()).is_some() {
                    continue;
                }
                let dir = out_dir.join(preset.as_str()).join(format!("seed{seed}")).join(&fold.name);
                info!("ablation {preset} seed {seed} fold {}", fold.name);
                let run = run_fold::<T>(&cfg, fold, rule, &dir)?;
                rows.push(AblationRow {
                    preset,
                    seed,
                    fold: fold.name.clone(),
                    hter: run.report.report.hter,
                    auc: run.report.report.auc,
                    acer: run.report.report.acer,
                    epochs_run: run.epochs_run,
                });
            }
        }
    }
    let report = AblationReport { rows };
    write_json(&out_dir.join("ablation.json"), &report)?;
    std::fs::write(out_dir.join("ablation.txt"), report.table())
        .map_err(|e| Error::io(out_dir.join("ablation.txt"), e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(preset: Preset, seed: u64, auc: f64) -> AblationRow {
        AblationRow {
            preset,
            seed,
            fold: "split".into(),
            hter: 1.0 - auc,
            auc,
            acer: 0.0,
            epochs_run: 1,
        }
    }

    #[test]
    fn medians_and_table() {
        let r = AblationReport {
            rows: vec![
                row(Preset::RgbBce, 0, 0.7),
                row(Preset::RgbBce, 1, 0.9),
                row(Preset::RgbBce, 2, 0.8),
                row(Preset::FullFlsl, 0, 0.75),
                row(Preset::FullFlsl, 1, 0.25),
            ],
        };
        assert_eq!(r.median_auc(Preset::RgbBce), Some(0.8));
        assert_eq!(r.median_auc(Preset::FullFlsl), Some(0.5));
        assert_eq!(r.median_auc(Preset::FullBce), None);
        let t = r.table();
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("80.00"));
    }
}

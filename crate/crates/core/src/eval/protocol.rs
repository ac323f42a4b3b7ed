use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{eer_threshold, metric_report, MetricReport, ScoreRecord};
use crate::data::{SampleManifest, Split};
use crate::error::{invalid, Error, Result};

/// Intra-dataset folds report ACER at a dev-split threshold; cross-dataset
/// folds report HTER and AUC at a threshold picked on the evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    IntraDataset,
    CrossDataset,
}

/// Where the operating threshold comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum ThresholdRule {
    DevEer,
    TestEer,
    Fixed(f64),
}

impl ProtocolKind {
    pub fn default_threshold(self) -> ThresholdRule {
        match self {
            ProtocolKind::IntraDataset => ThresholdRule::DevEer,
            ProtocolKind::CrossDataset => ThresholdRule::TestEer,
        }
    }
}

/// Selects records from one manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFilter {
    pub manifest: PathBuf,
    /// Empty means all splits.
    #[serde(default)]
    pub splits: Vec<Split>,
    /// Empty means all datasets.
    #[serde(default)]
    pub datasets: Vec<String>,
}

impl ManifestFilter {
    pub fn apply(&self, manifest: &SampleManifest) -> SampleManifest {
        manifest.filter(|r| {
            (self.splits.is_empty() || self.splits.contains(&r.split))
                && (self.datasets.is_empty() || self.datasets.contains(&r.dataset_id))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub name: String,
    pub train: Vec<ManifestFilter>,
    pub dev: Vec<ManifestFilter>,
    pub test: Vec<ManifestFilter>,
}

/// A named set of folds, stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub name: String,
    pub kind: ProtocolKind,
    #[serde(default)]
    pub threshold: Option<ThresholdRule>,
    pub folds: Vec<FoldSpec>,
}

/// Records of one fold after filtering; every record's path is absolute or
/// resolved against its manifest's directory.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub name: String,
    pub train: SampleManifest,
    pub dev: SampleManifest,
    pub test: SampleManifest,
}

impl ProtocolConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ProtocolConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("protocol file: {e}")))?;
        for fold in &mut cfg.folds {
            for f in fold.train.iter_mut().chain(&mut fold.dev).chain(&mut fold.test) {
                if f.manifest.is_relative() {
                    f.manifest = base_dir.join(&f.manifest);
                }
            }
        }
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn threshold_rule(&self) -> ThresholdRule {
        self.threshold.unwrap_or(self.kind.default_threshold())
    }

    /// One fold per dataset: train and dev on the other datasets' train and
    /// dev splits, test on the held-out dataset's test split.
    pub fn leave_one_dataset_out(name: &str, datasets: &[(String, PathBuf)]) -> Result<Self> {
        if datasets.len() < 2 {
            return invalid("leave-one-dataset-out needs at least two datasets");
        }
        let filter = |path: &PathBuf, id: &str, split: Split| ManifestFilter {
            manifest: path.clone(),
            splits: vec![split],
            datasets: vec![id.to_string()],
        };
        let folds = datasets
            .iter()
            .map(|(held, held_path)| {
                let others = || datasets.iter().filter(move |(id, _)| id != held);
                FoldSpec {
                    name: format!("to_{held}"),
                    train: others().map(|(id, p)| filter(p, id, Split::Train)).collect(),
                    dev: others().map(|(id, p)| filter(p, id, Split::Dev)).collect(),
                    test: vec![filter(held_path, held, Split::Test)],
                }
            })
            .collect();
        Ok(Self {
            name: name.into(),
            kind: ProtocolKind::CrossDataset,
            threshold: None,
            folds,
        })
    }

    /// Loads and filters every fold, then checks disjointness.
    pub fn load_folds(&self) -> Result<Vec<FoldData>> {
        if self.folds.is_empty() {
            return invalid(format!("protocol {} has no folds", self.name));
        }
        let mut cache: BTreeMap<PathBuf, SampleManifest> = BTreeMap::new();
        let mut gather = |filters: &[ManifestFilter]| -> Result<SampleManifest> {
            let mut parts = Vec::new();
            for f in filters {
                if !cache.contains_key(&f.manifest) {
                    cache.insert(f.manifest.clone(), SampleManifest::read(&f.manifest)?);
                }
                parts.push(f.apply(&cache[&f.manifest]));
            }
            Ok(SampleManifest::merge(&parts))
        };
        let mut out = Vec::new();
        for fold in &self.folds {
            let data = FoldData {
                name: fold.name.clone(),
                train: gather(&fold.train)?,
                dev: gather(&fold.dev)?,
                test: gather(&fold.test)?,
            };
            self.check_fold(&data)?;
            out.push(data);
        }
        Ok(out)
    }

    /// Non-empty splits, no video shared between train/dev and test, and for
    /// cross-dataset folds no dataset shared between training and test.
    pub fn check_fold(&self, fold: &FoldData) -> Result<()> {
        for (name, m) in [("train", &fold.train), ("dev", &fold.dev), ("test", &fold.test)] {
            if m.is_empty() {
                return invalid(format!("fold {}: {name} split is empty", fold.name));
            }
        }
        let videos = |m: &SampleManifest| -> HashSet<(String, String)> {
            m.records
                .iter()
                .map(|r| (r.dataset_id.clone(), r.video_id.clone()))
                .collect()
        };
        let test_videos = videos(&fold.test);
        for (name, m) in [("train", &fold.train), ("dev", &fold.dev)] {
            if let Some((d, v)) = videos(m).intersection(&test_videos).next() {
                return invalid(format!(
                    "fold {}: video {d}/{v} appears in both {name} and test",
                    fold.name
                ));
            }
        }
        if self.kind == ProtocolKind::CrossDataset {
            let test_sets: HashSet<&str> = fold.test.dataset_ids().into_iter().collect();
            for m in [&fold.train, &fold.dev] {
                if let Some(d) = m.dataset_ids().into_iter().find(|d| test_sets.contains(d)) {
                    return invalid(format!(
                        "fold {}: dataset {d} is used for both training and test",
                        fold.name
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Metrics of one fold plus the threshold's origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: String,
    pub threshold_rule: ThresholdRule,
    pub report: MetricReport,
}

pub fn evaluate_fold(
    fold: &str,
    rule: ThresholdRule,
    dev: &[ScoreRecord],
    test: &[ScoreRecord],
) -> Result<FoldReport> {
    let threshold = match rule {
        ThresholdRule::DevEer => eer_threshold(dev)?,
        ThresholdRule::TestEer => eer_threshold(test)?,
        ThresholdRule::Fixed(t) => t,
    };
    Ok(FoldReport {
        fold: fold.into(),
        threshold_rule: rule,
        report: metric_report(test, threshold)?,
    })
}

/// Mean and population standard deviation (divisor n).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return invalid("mean of an empty set");
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population convention.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub protocol: String,
    pub kind: ProtocolKind,
    pub folds: Vec<FoldReport>,
    pub apcer_wc: MeanStd,
    pub bpcer: MeanStd,
    pub acer: MeanStd,
    pub hter: MeanStd,
    pub auc: MeanStd,
}

pub fn summarize(protocol: &str, kind: ProtocolKind, folds: Vec<FoldReport>) -> Result<ProtocolSummary> {
    let agg = |f: fn(&MetricReport) -> f64| -> Result<MeanStd> {
        let v: Vec<f64> = folds.iter().map(|r| f(&r.report)).collect();
        let (mean, std) = mean_std(&v)?;
        Ok(MeanStd { mean, std })
    };
    Ok(ProtocolSummary {
        protocol: protocol.into(),
        kind,
        apcer_wc: agg(|r| r.apcer_wc)?,
        bpcer: agg(|r| r.bpcer)?,
        acer: agg(|r| r.acer)?,
        hter: agg(|r| r.hter)?,
        auc: agg(|r| r.auc)?,
        folds,
    })
}

impl ProtocolSummary {
    /// Per-fold rows plus a mean ± std row, percentages at one decimal.
    pub fn table(&self) -> String {
        use super::metrics::format_percent as p;
        let mut s = format!(
            "{:<16} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "fold", "APCER_wc", "BPCER", "ACER", "HTER", "AUC"
        );
        for f in &self.folds {
            let r = &f.report;
            s += &format!(
                "{:<16} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
                f.fold,
                p(r.apcer_wc, 1),
                p(r.bpcer, 1),
                p(r.acer, 1),
                p(r.hter, 1),
                p(r.auc, 1)
            );
        }
        let ms = |m: MeanStd| format!("{}±{}", p(m.mean, 1), p(m.std, 1));
        s += &format!(
            "{:<16} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "mean±std",
            ms(self.apcer_wc),
            ms(self.bpcer),
            ms(self.acer),
            ms(self.hter),
            ms(self.auc)
        );
        s += "(std uses the population convention, divisor n)\n";
        s
    }
}

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{invalid, Error, Result};

/// One video-level score (frame scores already mean-fused).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video_id: String,
    /// Higher means more bona fide.
    pub score: f64,
    pub label: Label,
    pub pai: String,
    pub dataset_id: String,
}

/// Decision rule used everywhere: `score >= threshold` is predicted bona fide.
#[inline]
pub fn predicted_bona_fide(score: f64, threshold: f64) -> bool {
    score >= threshold
}

fn attacks(records: &[ScoreRecord]) -> impl Iterator<Item = &ScoreRecord> {
    records.iter().filter(|r| r.label == Label::Attack)
}

fn bona_fides(records: &[ScoreRecord]) -> impl Iterator<Item = &ScoreRecord> {
    records.iter().filter(|r| r.label == Label::BonaFide)
}

fn accepted_fraction<'a>(it: impl Iterator<Item = &'a ScoreRecord>, threshold: f64) -> (usize, usize) {
    it.fold((0, 0), |(acc, n), r| {
        (acc + usize::from(predicted_bona_fide(r.score, threshold)), n + 1)
    })
}

/// APCER of one instrument: share of its attack videos accepted as bona fide.
pub fn apcer(records: &[ScoreRecord], threshold: f64) -> Result<f64> {
    let Some(first) = records.first() else {
        return invalid("APCER needs at least one attack record");
    };
    if records
        .iter()
        .any(|r| r.label != Label::Attack || r.pai != first.pai)
    {
        return invalid("APCER records must all be attacks of a single PAI");
    }
    let (acc, n) = accepted_fraction(records.iter(), threshold);
    Ok(acc as f64 / n as f64)
}

/// APCER for every PAI present among the attack records.
pub fn apcer_per_pai(records: &[ScoreRecord], threshold: f64) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in attacks(records) {
        let g = groups.entry(&r.pai).or_default();
        g.0 += usize::from(predicted_bona_fide(r.score, threshold));
        g.1 += 1;
    }
    if groups.is_empty() {
        return invalid("no attack records");
    }
    Ok(groups
        .into_iter()
        .map(|(pai, (acc, n))| (pai.to_string(), acc as f64 / n as f64))
        .collect())
}

/// Worst case over PAIs.
pub fn apcer_wc(records: &[ScoreRecord], threshold: f64) -> Result<f64> {
    Ok(apcer_per_pai(records, threshold)?
        .into_values()
        .fold(0.0, f64::max))
}

/// APCER over all attacks regardless of PAI.
pub fn apcer_pooled(records: &[ScoreRecord], threshold: f64) -> Result<f64> {
    let (acc, n) = accepted_fraction(attacks(records), threshold);
    if n == 0 {
        return invalid("no attack records");
    }
    Ok(acc as f64 / n as f64)
}

/// Share of bona fide videos rejected (`score < threshold`).
pub fn bpcer(records: &[ScoreRecord], threshold: f64) -> Result<f64> {
    let (acc, n) = accepted_fraction(bona_fides(records), threshold);
    if n == 0 {
        return invalid("no bona fide records");
    }
    Ok((n - acc) as f64 / n as f64)
}

pub fn acer(apcer_wc: f64, bpcer: f64) -> f64 {
    (apcer_wc + bpcer) / 2.0
}

pub fn hter(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

fn split_scores(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let bona: Vec<f64> = bona_fides(records).map(|r| r.score).collect();
    let attack: Vec<f64> = attacks(records).map(|r| r.score).collect();
    if bona.is_empty() || attack.is_empty() {
        return invalid(format!(
            "both classes are required (bona fide: {}, attack: {})",
            bona.len(),
            attack.len()
        ));
    }
    if bona.iter().chain(&attack).any(|s| s.is_nan()) {
        return invalid("scores must not be NaN");
    }
    Ok((bona, attack))
}

/// ROC area via the rank-sum statistic: the share of (bona fide, attack)
/// pairs ordered correctly, ties counted half. Counting is done in integer
/// half-units, so the result is exact up to the final division.
pub fn auc(records: &[ScoreRecord]) -> Result<f64> {
    let (bona, attack) = split_scores(records)?;
    auc_from_scores(&bona, &attack)
}

pub fn auc_from_scores(bona: &[f64], attack: &[f64]) -> Result<f64> {
    if bona.is_empty() || attack.is_empty() {
        return invalid("AUC needs both classes");
    }
    let mut all: Vec<(f64, bool)> = bona
        .iter()
        .map(|&s| (s, true))
        .chain(attack.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return invalid("scores must not be NaN");
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut half_units: u128 = 0;
    let mut attacks_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut b, mut a) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                b += 1;
            } else {
                a += 1;
            }
            j += 1;
        }
        half_units += b * (2 * attacks_below + a);
        attacks_below += a;
        i = j;
    }
    Ok(half_units as f64 / (2 * bona.len() as u128 * attack.len() as u128) as f64)
}

/// Operating threshold where pooled APCER and BPCER are closest.
///
/// Candidates are the lowest score (accept everything), the midpoints
/// between adjacent distinct scores and the value just above the highest
/// score (reject everything). Ties go to the lower BPCER, then the lower
/// threshold. All comparisons are exact integer arithmetic.
pub fn eer_threshold(records: &[ScoreRecord]) -> Result<f64> {
    let (bona, attack) = split_scores(records)?;
    let mut distinct: Vec<f64> = bona.iter().chain(&attack).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    candidates.push(distinct[0]);
    candidates.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    candidates.push(distinct[distinct.len() - 1].next_up());

    let (nb, na) = (bona.len() as i128, attack.len() as i128);
    let mut best: Option<(i128, i128, f64)> = None;
    for &t in &candidates {
        let accepted_attacks = attack.iter().filter(|&&s| predicted_bona_fide(s, t)).count() as i128;
        let rejected_bona = bona.iter().filter(|&&s| !predicted_bona_fide(s, t)).count() as i128;
        // |A/na - B/nb| scaled by na*nb, BPCER scaled by nb.
        let gap = (accepted_attacks * nb - rejected_bona * na).abs();
        let key = (gap, rejected_bona * na);
        if best.is_none_or(|(g, b, _)| key < (g, b)) {
            best = Some((key.0, key.1, t));
        }
    }
    Ok(best.expect("at least one candidate").2)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub bona_fide: usize,
    pub attack: usize,
    pub per_pai: BTreeMap<String, usize>,
}

/// All PAD error rates at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub apcer_per_pai: BTreeMap<String, f64>,
    pub apcer_pooled: f64,
    pub apcer_wc: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
    pub auc: f64,
    pub threshold: f64,
    pub counts: Counts,
}

pub fn metric_report(records: &[ScoreRecord], threshold: f64) -> Result<MetricReport> {
    let apcer_per_pai = apcer_per_pai(records, threshold)?;
    let apcer_wc = apcer_per_pai.values().copied().fold(0.0, f64::max);
    let apcer_pooled = apcer_pooled(records, threshold)?;
    let bpcer = bpcer(records, threshold)?;
    let mut counts = Counts::default();
    for r in records {
        match r.label {
            Label::BonaFide => counts.bona_fide += 1,
            Label::Attack => {
                counts.attack += 1;
                *counts.per_pai.entry(r.pai.clone()).or_default() += 1;
            }
        }
    }
    Ok(MetricReport {
        apcer_wc,
        apcer_pooled,
        bpcer,
        acer: acer(apcer_wc, bpcer),
        hter: hter(apcer_pooled, bpcer),
        auc: auc(records)?,
        threshold,
        counts,
        apcer_per_pai,
    })
}

/// Rate as a percentage rounded half-up to `decimals` places.
///
/// The value is first snapped to 1e-6 of the last shown digit so that binary
/// noise (for example `1.95` stored as `1.9499999...`) does not flip the
/// rounding direction.
pub fn format_percent(rate: f64, decimals: u32) -> String {
    let scale = 10f64.powi(decimals as i32);
    let snapped = (rate * 100.0 * scale * 1e6).round();
    let units = (snapped.abs() / 1e6 + 0.5).floor().copysign(snapped);
    format!("{:.*}", decimals as usize, units / scale)
}

impl MetricReport {
    /// Two-column text table with percentages at one decimal.
    pub fn table(&self) -> String {
        let mut rows = vec![("threshold".to_string(), format!("{:.6}", self.threshold))];
        for (pai, v) in &self.apcer_per_pai {
            rows.push((format!("APCER[{pai}] %"), format_percent(*v, 1)));
        }
        rows.extend([
            ("APCER (worst case) %".into(), format_percent(self.apcer_wc, 1)),
            ("APCER (pooled) %".into(), format_percent(self.apcer_pooled, 1)),
            ("BPCER %".into(), format_percent(self.bpcer, 1)),
            ("ACER %".into(), format_percent(self.acer, 1)),
            ("HTER %".into(), format_percent(self.hter, 1)),
            ("AUC %".into(), format_percent(self.auc, 1)),
            (
                "videos (bona fide / attack)".into(),
                format!("{} / {}", self.counts.bona_fide, self.counts.attack),
            ),
        ]);
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v}\n"))
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    video_id: String,
    score: f64,
    label: String,
    pai: String,
    dataset_id: String,
}

pub fn write_scores(records: &[ScoreRecord], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["video_id", "score", "label", "pai", "dataset_id"])?;
    for r in records {
        w.write_record([
            r.video_id.as_str(),
            &format!("{:?}", r.score),
            r.label.as_str(),
            &r.pai,
            &r.dataset_id,
        ])?;
    }
    w.flush()
        .map_err(|e| Error::Validation(format!("cannot write scores: {e}")))?;
    Ok(())
}

pub fn read_scores(reader: impl Read) -> Result<Vec<ScoreRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<ScoreRow>().enumerate() {
        let row = row?;
        let label = row
            .label
            .parse()
            .map_err(|e| Error::Validation(format!("score row {i}: {e}")))?;
        out.push(ScoreRecord {
            video_id: row.video_id,
            score: row.score,
            label,
            pai: row.pai,
            dataset_id: row.dataset_id,
        });
    }
    Ok(out)
}

pub fn write_scores_file(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_scores(records, std::io::BufWriter::new(f))
}

pub fn read_scores_file(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_scores(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(score: f64, label: Label, pai: &str) -> ScoreRecord {
        ScoreRecord {
            video_id: format!("v{score}"),
            score,
            label,
            pai: pai.into(),
            dataset_id: "d".into(),
        }
    }

    fn attacks_at(scores: &[f64], pai: &str) -> Vec<ScoreRecord> {
        scores.iter().map(|&s| rec(s, Label::Attack, pai)).collect()
    }

    #[test]
    fn apcer_examples() {
        assert_eq!(apcer(&attacks_at(&[0.1, 0.2, 0.3, 0.4], "print"), 0.5).unwrap(), 0.0);
        assert_eq!(apcer(&attacks_at(&[0.1, 0.2, 0.3, 0.6], "print"), 0.5).unwrap(), 0.25);
        assert_eq!(apcer(&attacks_at(&[0.6, 0.7, 0.8, 0.9], "print"), 0.5).unwrap(), 1.0);
        assert!(apcer(&[], 0.5).is_err());
        let mut mixed = attacks_at(&[0.1], "print");
        mixed.extend(attacks_at(&[0.1], "replay"));
        assert!(apcer(&mixed, 0.5).is_err());
    }

    #[test]
    fn threshold_boundary_counts_as_bona_fide() {
        assert_eq!(apcer(&attacks_at(&[0.5], "print"), 0.5).unwrap(), 1.0);
        assert_eq!(bpcer(&[rec(0.5, Label::BonaFide, "none")], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn worst_case_examples() {
        let mut r = attacks_at(&[0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1], "print");
        assert_eq!(apcer_wc(&r, 0.5).unwrap(), 0.1);
        r.extend(attacks_at(&[0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1], "replay"));
        assert_eq!(apcer_wc(&r, 0.5).unwrap(), 0.3);
        assert_eq!(apcer_wc(&attacks_at(&[0.1, 0.2], "x"), 0.5).unwrap(), 0.0);
        assert!(apcer_wc(&[rec(0.5, Label::BonaFide, "none")], 0.5).is_err());
    }

    #[test]
    fn bpcer_examples() {
        let bona: Vec<_> = (0..10)
            .map(|i| rec(if i == 0 { 0.2 } else { 0.9 }, Label::BonaFide, "none"))
            .collect();
        assert_eq!(bpcer(&bona, 0.5).unwrap(), 0.1);
        assert_eq!(bpcer(&bona, 0.1).unwrap(), 0.0);
        assert_eq!(bpcer(&bona, 0.95).unwrap(), 1.0);
    }

    #[test]
    fn acer_and_hter_arithmetic() {
        assert_eq!(format_percent(acer(0.014, 0.016), 1), "1.5");
        assert_eq!(format_percent(acer(0.031, 0.008), 1), "2.0");
        assert_eq!(acer(0.0, 0.0), 0.0);
        assert_eq!(hter(0.2, 0.1), 0.15000000000000002);
        assert_eq!(hter(0.2, 0.1), hter(0.1, 0.2));
    }

    #[test]
    fn percent_formatting_rounds_half_up() {
        assert_eq!(format_percent(0.0195, 1), "2.0");
        assert_eq!(format_percent(0.0194, 1), "1.9");
        assert_eq!(format_percent(0.00049, 1), "0.0");
        assert_eq!(format_percent(0.0005, 1), "0.1");
        assert_eq!(format_percent(1.0, 1), "100.0");
        assert_eq!(format_percent(0.12345, 2), "12.35");
    }

    #[test]
    fn auc_examples() {
        let mut r = attacks_at(&[0.1, 0.2], "p");
        r.push(rec(0.8, Label::BonaFide, "none"));
        r.push(rec(0.9, Label::BonaFide, "none"));
        assert_eq!(auc(&r).unwrap(), 1.0);
        let ties: Vec<_> = (0..6)
            .map(|i| rec(0.4, if i % 2 == 0 { Label::BonaFide } else { Label::Attack }, if i % 2 == 0 { "none" } else { "p" }))
            .collect();
        assert_eq!(auc(&ties).unwrap(), 0.5);
        assert!(auc(&attacks_at(&[0.1], "p")).is_err());
    }

    #[test]
    fn eer_examples() {
        let mut r = attacks_at(&[0.1, 0.2], "p");
        r.push(rec(0.9, Label::BonaFide, "none"));
        r.push(rec(0.8, Label::BonaFide, "none"));
        assert_eq!(eer_threshold(&r).unwrap(), 0.5);

        let single = vec![rec(1.0, Label::BonaFide, "none"), rec(0.0, Label::Attack, "p")];
        let t = eer_threshold(&single).unwrap();
        assert_eq!(t, 0.5);
        assert_eq!(apcer_pooled(&single, t).unwrap(), 0.0);
        assert_eq!(bpcer(&single, t).unwrap(), 0.0);

        // Identical scores: accepting everything and rejecting everything both
        // give |1 - 0| = 1; the lower BPCER (accept everything) wins.
        let same = vec![rec(0.3, Label::BonaFide, "none"), rec(0.3, Label::Attack, "p")];
        let t = eer_threshold(&same).unwrap();
        assert_eq!(t, 0.3);
        assert_eq!(bpcer(&same, t).unwrap(), 0.0);
        assert_eq!(apcer_pooled(&same, t).unwrap(), 1.0);
        assert!(eer_threshold(&attacks_at(&[0.1], "p")).is_err());
    }

    #[test]
    fn report_is_consistent() {
        let mut r = attacks_at(&[0.1, 0.6, 0.2], "print");
        r.extend(attacks_at(&[0.05, 0.3], "replay"));
        r.extend([0.9, 0.4, 0.8, 0.7].map(|s| rec(s, Label::BonaFide, "none")));
        let m = metric_report(&r, 0.5).unwrap();
        assert_eq!(m.apcer_per_pai["print"], 1.0 / 3.0);
        assert_eq!(m.apcer_per_pai["replay"], 0.0);
        assert_eq!(m.apcer_wc, 1.0 / 3.0);
        assert_eq!(m.apcer_pooled, 0.2);
        assert_eq!(m.bpcer, 0.25);
        assert_eq!(m.acer, (m.apcer_wc + m.bpcer) / 2.0);
        assert_eq!(m.hter, (m.apcer_pooled + m.bpcer) / 2.0);
        assert_eq!(m.counts.per_pai["print"], 3);
        assert!(m.table().contains("ACER %"));
    }

    #[test]
    fn score_csv_round_trip() {
        let r = vec![rec(0.25, Label::Attack, "print"), rec(0.1 + 0.2, Label::BonaFide, "none")];
        let mut buf = Vec::new();
        write_scores(&r, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("video_id,score,label,pai,dataset_id\n"));
        assert_eq!(read_scores(buf.as_slice()).unwrap(), r);
    }
}

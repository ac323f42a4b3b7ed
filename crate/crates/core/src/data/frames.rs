use std::collections::HashMap;

use super::manifest::{Label, SampleManifest, Split};
use crate::error::{invalid, Result};

/// Segment-midpoint frame indices: `floor((i + 0.5) * total / k)` for `i < k`.
///
/// Repeats occur when `total < k`.
pub fn sample_frames(total_frames: usize, k: usize) -> Result<Vec<usize>> {
    if total_frames == 0 || k == 0 {
        return invalid(format!(
            "frame sampling needs positive inputs, got total={total_frames}, k={k}"
        ));
    }
    Ok((0..k).map(|i| (2 * i + 1) * total_frames / (2 * k)).collect())
}

/// Keeps `k` frames per video (in manifest order within each video).
pub fn select_frames(manifest: &SampleManifest, k: usize) -> Result<SampleManifest> {
    let mut by_video: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
    let mut order = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let key = (r.dataset_id.as_str(), r.video_id.as_str());
        by_video
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(i);
    }
    let mut records = Vec::new();
    for video in order {
        let rows = &by_video[&video];
        for idx in sample_frames(rows.len(), k)? {
            records.push(manifest.records[rows[idx]].clone());
        }
    }
    Ok(SampleManifest::new(records, manifest.base_dir.clone()))
}

/// Duplicates minority-class train frames round-robin until both classes
/// have the same count. Other splits and the original order are untouched;
/// duplicates are appended.
pub fn balance_classes(manifest: &SampleManifest) -> Result<SampleManifest> {
    let rows = |label: Label| -> Vec<usize> {
        manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Train && r.label == label)
            .map(|(i, _)| i)
            .collect()
    };
    let bona = rows(Label::BonaFide);
    let attack = rows(Label::Attack);
    if bona.is_empty() || attack.is_empty() {
        return invalid(format!(
            "class balancing needs both classes in the train split (bona fide: {}, attack: {})",
            bona.len(),
            attack.len()
        ));
    }
    let (minority, target) = if bona.len() < attack.len() {
        (bona, attack.len())
    } else {
        (attack, bona.len())
    };
    let mut out = manifest.clone();
    for i in 0..target - minority.len() {
        out.records
            .push(manifest.records[minority[i % minority.len()]].clone());
    }
    Ok(out)
}

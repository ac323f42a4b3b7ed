use std::collections::HashMap;

use ndarray::Array2;

use super::metrics::ScoreRecord;
use crate::data::FrameStore;
use crate::error::{invalid, Result};
use crate::network::{predict_video_with, LmfdModel, Prediction, VideoScore};
use crate::tensor::Scalar;

/// Frame predictions of a store, in store order.
#[derive(Debug, Clone)]
pub struct FrameScores {
    /// Record index into the store's manifest for each prediction.
    pub indices: Vec<usize>,
    pub predictions: Vec<Prediction>,
}

/// Runs the model in eval mode over every usable record.
pub fn predict_store<T: Scalar>(
    model: &LmfdModel<T>,
    store: &FrameStore,
    batch_size: usize,
) -> Result<FrameScores> {
    if batch_size == 0 {
        return invalid("batch size must be positive");
    }
    let usable = store.usable();
    let mut predictions = Vec::with_capacity(usable.len());
    for chunk in usable.chunks(batch_size) {
        let batch = store.batch(chunk, None)?;
        let images = batch.images.mapv(|v| T::of(f64::from(v)));
        let ids: Vec<String> = chunk
            .iter()
            .map(|&i| store.manifest.records[i].frame_path.to_string_lossy().into_owned())
            .collect();
        predictions.extend(model.predict(&images, &ids)?);
    }
    Ok(FrameScores {
        indices: usable,
        predictions,
    })
}

/// Mean-rule fusion of frame predictions into one record per video, in
/// order of first appearance.
pub fn video_scores(store: &FrameStore, frames: &FrameScores, source: VideoScore) -> Result<Vec<ScoreRecord>> {
    let mut order: Vec<usize> = Vec::new();
    let mut groups: HashMap<(&str, &str), Vec<Prediction>> = HashMap::new();
    for (&i, p) in frames.indices.iter().zip(&frames.predictions) {
        let r = &store.manifest.records[i];
        let key = (r.dataset_id.as_str(), r.video_id.as_str());
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(i);
                Vec::new()
            })
            .push(p.clone());
    }
    order
        .into_iter()
        .map(|i| {
            let r = &store.manifest.records[i];
            let frames = &groups[&(r.dataset_id.as_str(), r.video_id.as_str())];
            Ok(ScoreRecord {
                video_id: r.video_id.clone(),
                score: predict_video_with(frames, source)?,
                label: r.label,
                pai: r.pai.clone(),
                dataset_id: r.dataset_id.clone(),
            })
        })
        .collect()
}

/// Frame embeddings as an `[n, E]` matrix.
pub fn embedding_matrix(frames: &FrameScores) -> Array2<f64> {
    let n = frames.predictions.len();
    let e = frames.predictions.first().map_or(0, |p| p.embedding.len());
    Array2::from_shape_fn((n, e), |(i, j)| f64::from(frames.predictions[i].embedding[j]))
}

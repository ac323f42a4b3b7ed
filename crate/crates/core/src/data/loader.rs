use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use ndarray::{Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::derive_seed;
use super::image_io::{crop_and_resize, load_rgb, normalize_in_place, Normalization};
use super::manifest::SampleManifest;
use crate::error::{invalid, Result};

/// A record that could not be loaded; collected instead of aborting a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadIssue {
    pub index: usize,
    pub path: PathBuf,
    pub message: String,
}

/// One model-ready batch, `[N, 3, size, size]` normalized.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array4<f32>,
    /// 1 for bona fide, 0 for attack.
    pub labels: Vec<f64>,
    /// Record indices into the store's manifest.
    pub indices: Vec<usize>,
}

/// Decoded frames of one manifest, kept in memory.
///
/// Records whose image is unreadable or whose crop does not fit are reported
/// by [`FrameStore::open`] and excluded from [`FrameStore::usable`].
#[derive(Debug, Clone)]
pub struct FrameStore {
    pub manifest: SampleManifest,
    pub size: usize,
    pub norm: Normalization,
    images: Vec<Option<Arc<RgbImage>>>,
}

impl FrameStore {
    pub fn open(manifest: SampleManifest, size: usize, norm: Normalization) -> (Self, Vec<LoadIssue>) {
        // Duplicated records (class balancing) share one decode per path.
        let paths: Vec<PathBuf> = manifest.records.iter().map(|r| manifest.resolve(r)).collect();
        let mut unique: HashMap<&PathBuf, usize> = HashMap::new();
        let mut order = Vec::new();
        let slot: Vec<usize> = paths
            .iter()
            .map(|p| {
                *unique.entry(p).or_insert_with(|| {
                    order.push(p);
                    order.len() - 1
                })
            })
            .collect();
        let decoded: Vec<std::result::Result<Arc<RgbImage>, String>> = order
            .par_iter()
            .map(|p| load_rgb(p).map(Arc::new).map_err(|e| e.to_string()))
            .collect();
        let mut issues = Vec::new();
        let mut images = Vec::with_capacity(paths.len());
        for (index, r) in manifest.records.iter().enumerate() {
            let checked = decoded[slot[index]].clone().and_then(|img| match r.crop {
                Some(c) if !c.fits(img.width(), img.height()) => Err(format!(
                    "crop {c:?} outside {}x{} image",
                    img.width(),
                    img.height()
                )),
                _ => Ok(img),
            });
            match checked {
                Ok(img) => images.push(Some(img)),
                Err(message) => {
                    issues.push(LoadIssue {
                        index,
                        path: paths[index].clone(),
                        message,
                    });
                    images.push(None);
                }
            }
        }
        (
            Self {
                manifest,
                size,
                norm,
                images,
            },
            issues,
        )
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of records that loaded successfully.
    pub fn usable(&self) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.images[i].is_some())
            .collect()
    }

    /// Builds a batch. With `augmentation = Some((cfg, seed, epoch))` every
    /// sample draws from `derive_seed(seed, epoch, index)`.
    pub fn batch(
        &self,
        indices: &[usize],
        augmentation: Option<(&AugmentConfig, u64, u64)>,
    ) -> Result<Batch> {
        let mut images = Array4::<f32>::zeros((indices.len(), 3, self.size, self.size));
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if self.images.get(i).is_none_or(|img| img.is_none()) {
                return invalid(format!("record {i} is not loadable"));
            }
            labels.push(self.manifest.records[i].label.target());
        }
        images
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(indices.par_iter())
            .try_for_each(|(mut slot, &i)| -> Result<()> {
                let img = self.images[i].as_ref().expect("checked above");
                let mut x = crop_and_resize(img, self.manifest.records[i].crop, self.size)?;
                if let Some((cfg, seed, epoch)) = augmentation {
                    x = augment(&x, cfg, derive_seed(seed, epoch, i as u64));
                }
                normalize_in_place(&mut x, &self.norm);
                slot.assign(&x);
                Ok(())
            })?;
        Ok(Batch {
            images,
            labels,
            indices: indices.to_vec(),
        })
    }
}

//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `LMFDCKPT`, a little-endian `u32` format version,
//! a `u64` header length, a UTF-8 JSON header, then every tensor's raw
//! little-endian data back to back in header order.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::network::{LmfdModel, ModelConfig};
use crate::nn::Module;
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 8] = b"LMFDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub model: ModelConfig,
    pub normalization: Normalization,
    /// Free-form training metadata (epoch, dev metrics, resolved config).
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

/// Serialises every parameter and buffer of `model`.
pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &LmfdModel<T>,
    normalization: &Normalization,
    metadata: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    model.visit(&mut |p| {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            offset: data.len() as u64,
        });
        for &v in p.value.as_standard_layout().iter() {
            v.write_le(&mut data);
        }
    });
    let header = CheckpointHeader {
        dtype: T::DTYPE.into(),
        model: model.config.clone(),
        normalization: *normalization,
        metadata,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(20 + json.len() + data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&data);
    // Write-then-rename so a crash never leaves a truncated best checkpoint.
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A parsed container: header plus every tensor widened to `f64`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: HashMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return ckpt_err("not a checkpoint (bad magic)");
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return ckpt_err(format!("unsupported format version {version}"));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let Some(json) = bytes.get(20..20usize.saturating_add(hlen)) else {
            return ckpt_err("truncated header");
        };
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        let data = &bytes[20 + hlen..];
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return ckpt_err(format!("unknown dtype {other:?}")),
        };
        let mut tensors = HashMap::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let start = t.offset as usize;
            let Some(raw) = data.get(start..start + n * width) else {
                return ckpt_err(format!("tensor {} runs past the end of the file", t.name));
            };
            let values: Vec<f64> = raw
                .chunks_exact(width)
                .map(|c| if width == 4 { f32::read_le(c).f64() } else { f64::read_le(c) })
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), values).expect("length checked");
            if tensors.insert(t.name.clone(), arr).is_some() {
                return ckpt_err(format!("duplicate tensor {}", t.name));
            }
        }
        Ok(Self { header, tensors })
    }

    /// Rebuilds the model and fills every parameter by name.
    ///
    /// Every model tensor must be present with its exact shape, and the file
    /// may not carry tensors the model does not have.
    pub fn into_model<T: Scalar>(&self) -> Result<LmfdModel<T>> {
        let mut model = LmfdModel::<T>::new(self.header.model.clone(), 0)?;
        let mut seen = HashSet::new();
        let mut problem = None;
        model.visit_mut(&mut |p| {
            if problem.is_some() {
                return;
            }
            match self.tensors.get(&p.name) {
                None => problem = Some(format!("missing tensor {}", p.name)),
                Some(src) if src.shape() != p.value.shape() => {
                    problem = Some(format!(
                        "tensor {} has shape {:?}, model expects {:?}",
                        p.name,
                        src.shape(),
                        p.value.shape()
                    ))
                }
                Some(src) => {
                    p.value.zip_mut_with(src, |d, &s| *d = T::of(s));
                    seen.insert(p.name.clone());
                }
            }
        });
        if let Some(m) = problem {
            return ckpt_err(m);
        }
        if let Some(extra) = self.tensors.keys().find(|k| !seen.contains(*k)) {
            return ckpt_err(format!("unexpected tensor {extra}"));
        }
        Ok(model)
    }
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(LmfdModel<T>, CheckpointHeader)> {
    let ckpt = Checkpoint::read(path)?;
    let model = ckpt.into_model()?;
    Ok((model, ckpt.header))
}

/// Tensors of a checkpoint narrowed to `f32`, for initialising backbones.
pub fn read_tensors(path: impl AsRef<Path>) -> Result<HashMap<String, ArrayD<f32>>> {
    Ok(Checkpoint::read(path)?
        .tensors
        .into_iter()
        .map(|(k, v)| (k, v.mapv(|x| x as f32)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BackboneSpec;

    fn small() -> ModelConfig {
        ModelConfig {
            backbone: BackboneSpec {
                stage_spatial: BackboneSpec::expected_spatial(32),
                ..BackboneSpec::tiny_with_channels([4, 8, 16, 16])
            },
            input_size: 32,
            reduction_ratio: 4,
            pixel_map_size: 4,
            ..ModelConfig::default()
        }
    }

    fn snapshot<T: Scalar>(m: &LmfdModel<T>) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        m.visit(&mut |p| out.push((p.name.clone(), p.value.iter().copied().collect())));
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = LmfdModel::<f32>::new(small(), 11).unwrap();
        let meta = serde_json::json!({"epoch": 3});
        save_checkpoint(&path, &model, &Normalization::default(), meta.clone()).unwrap();
        let (back, header) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(header.metadata, meta);
        assert_eq!(header.model, model.config);
        let (a, b) = (snapshot(&model), snapshot(&back));
        assert_eq!(a.len(), b.len());
        for ((na, va), (nb, vb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert!(va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = LmfdModel::<f64>::new(small(), 1).unwrap();
        save_checkpoint(&path, &model, &Normalization::default(), serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(Checkpoint::parse(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::parse(&bad).is_err());
        let mut ckpt = Checkpoint::parse(&bytes).unwrap();
        ckpt.tensors.insert("stray".into(), ArrayD::zeros(IxDyn(&[1])));
        assert!(ckpt.into_model::<f64>().is_err());
        let mut ckpt = Checkpoint::parse(&bytes).unwrap();
        let name = ckpt.header.tensors[0].name.clone();
        ckpt.tensors.insert(name, ArrayD::zeros(IxDyn(&[1])));
        assert!(ckpt.into_model::<f64>().is_err());
    }
}

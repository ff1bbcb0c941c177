//! Checkpoint file: `SCGTOY1`, a little-endian `u32` manifest length, a JSON
//! manifest listing tensor names and shapes, then each tensor's values as
//! little-endian `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::DatasetConfig;
use super::model::{ModelConfig, ToyModel};
use crate::error::{Error, FormatError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::Vocab;

pub const MAGIC: &[u8; 7] = b"SCGTOY1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    #[serde(default)]
    pub vocab: Option<Vocab>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    pub tensors: Vec<TensorEntry>,
}

/// A model plus what is needed to prompt it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ToyModel<f32>,
    pub vocab: Option<Vocab>,
    pub dataset: Option<DatasetConfig>,
}

pub fn encode<T: Scalar>(
    model: &ToyModel<T>,
    vocab: Option<&Vocab>,
    dataset: Option<&DatasetConfig>,
) -> Result<Vec<u8>> {
    let named = model.params.named();
    let manifest = Manifest {
        config: model.config.clone(),
        vocab: vocab.cloned(),
        dataset: dataset.cloned(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| FormatError::Manifest("manifest too large".into()))?;
    let payload: usize = named.iter().map(|(_, t)| t.len() * 4).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in named {
        for v in t.data() {
            out.extend_from_slice(&(v.widen() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic { expected: "SCGTOY1" }.into());
    }
    let mut pos = MAGIC.len();
    let len = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
    let manifest: Manifest =
        serde_json::from_slice(take(bytes, &mut pos, len)?).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let mut model = ToyModel::<f32>::new(manifest.config.clone(), 0)?;
    {
        let expected = model.params.named();
        if expected.len() != manifest.tensors.len() {
            return Err(FormatError::Manifest(format!(
                "{} tensors listed, config implies {}",
                manifest.tensors.len(),
                expected.len()
            ))
            .into());
        }
        for ((name, t), entry) in expected.iter().zip(&manifest.tensors) {
            if *name != entry.name || t.shape() != entry.shape.as_slice() {
                return Err(FormatError::Manifest(format!(
                    "entry {} {:?} does not match expected {} {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    t.shape()
                ))
                .into());
            }
        }
    }
    for (t, entry) in model.params.tensors_mut().into_iter().zip(&manifest.tensors) {
        let raw = take(bytes, &mut pos, t.len() * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *t = Tensor::new(entry.shape.clone(), data)?;
    }
    if pos != bytes.len() {
        return Err(FormatError::Manifest(format!("{} trailing bytes after payload", bytes.len() - pos)).into());
    }
    Ok(Checkpoint {
        model,
        vocab: manifest.vocab,
        dataset: manifest.dataset,
    })
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let available = bytes.len().saturating_sub(*pos);
    if available < n {
        return Err(FormatError::Truncated {
            offset: *pos,
            needed: n,
            available,
        }
        .into());
    }
    let out = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &ToyModel<T>,
    vocab: Option<&Vocab>,
    dataset: Option<&DatasetConfig>,
) -> Result<()> {
    std::fs::write(path, encode(model, vocab, dataset)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

//! Versioned checkpoint archive: a JSON metadata block (config, vocabularies,
//! label sets) followed by a flat list of named tensors with shape headers
//! and row-major little-endian data.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{LabelMap, Vocabulary};
use crate::params::ParamStore;
use crate::tensor::Scalar;
use crate::training::TrainConfig;

const MAGIC: &[u8; 4] = b"GENC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error("tensor {name}: shape {found:?} does not match model shape {expected:?}")]
    DimMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor {name}: dtype tag {found} does not match requested precision {expected}")]
    Precision { name: String, expected: u8, found: u8 },
    #[error("checkpoint missing tensor {0}")]
    MissingTensor(String),
}

/// Everything besides the weights needed to rebuild the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config: TrainConfig,
    pub word_vocab: Vocabulary,
    pub char_vocab: Vocabulary,
    pub intents: LabelMap,
    pub slots: LabelMap,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

/// Writes metadata plus every parameter tensor of `store`.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore<F>,
) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| CheckpointError::Format(format!("metadata encode: {e}")))?;
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(F::DTYPE);
        let value = store.value(id);
        buf.push(value.ndim() as u8);
        for &d in value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in value.iter() {
            match F::DTYPE {
                0 => buf.extend_from_slice(&(x.to_f64().unwrap() as f32).to_le_bytes()),
                _ => buf.extend_from_slice(&x.to_f64().unwrap().to_le_bytes()),
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

/// Reads metadata and tensors at the requested precision (strict dtype match).
pub fn load_checkpoint<F: Scalar>(
    path: &Path,
) -> Result<(CheckpointMeta, Vec<(String, ArrayD<F>)>), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Format("truncated archive".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let meta_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut pos, meta_len)?)
        .map_err(|e| CheckpointError::Format(format!("metadata decode: {e}")))?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| CheckpointError::Format("tensor name not UTF-8".into()))?;
        let dtype = take(&mut pos, 1)?[0];
        if dtype != F::DTYPE {
            return Err(CheckpointError::Precision { name, expected: F::DTYPE, found: dtype });
        }
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let elem = if dtype == 0 { 4 } else { 8 };
        let raw = take(&mut pos, n * elem)?;
        let data: Vec<F> = raw
            .chunks_exact(elem)
            .map(|c| {
                let v = if dtype == 0 {
                    f32::from_le_bytes(c.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(c.try_into().unwrap())
                };
                F::from(v).unwrap()
            })
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| CheckpointError::Format(format!("tensor {name}: {e}")))?;
        tensors.push((name, arr));
    }
    Ok((meta, tensors))
}

/// Assigns loaded tensors into a freshly built store, validating names and
/// shapes against the model layout.
pub fn restore_params<F: Scalar>(
    store: &mut ParamStore<F>,
    tensors: &[(String, ArrayD<F>)],
) -> Result<(), CheckpointError> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let found = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        let expected = store.value(id).shape().to_vec();
        if found.1.shape() != expected.as_slice() {
            return Err(CheckpointError::DimMismatch {
                name,
                expected,
                found: found.1.shape().to_vec(),
            });
        }
        store.value_mut(id).assign(&found.1);
    }
    Ok(())
}

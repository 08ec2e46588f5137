//! Flat binary checkpoint: magic `XPFLCKPT`, little-endian u16 version,
//! u32 tensor count, then per tensor a u16 name length + name bytes, a u8
//! rank, u32 dims, and the raw little-endian f64 values.

use crate::numkit::Tensor;
use std::fs;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"XPFLCKPT";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("unsupported checkpoint version {found} in {path}")]
    BadVersion { path: String, found: u16 },
    #[error("truncated checkpoint {path}")]
    Truncated { path: String },
    #[error("malformed checkpoint {path}: {reason}")]
    Malformed { path: String, reason: String },
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, &Tensor)]) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let p = path.display().to_string();
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Truncated { path: p.clone() });
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(CheckpointError::BadMagic { path: p });
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion { path: p, found: version });
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec()).map_err(|_| {
            CheckpointError::Malformed {
                path: p.clone(),
                reason: "tensor name is not utf-8".into(),
            }
        })?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed {
            path: p.clone(),
            reason: e.to_string(),
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

/// Restore named tensors into a model, requiring exact name and shape matches.
pub fn load_into(
    model: &mut dyn super::NamedTensors,
    entries: &[(String, Tensor)],
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut targets = model.tensors_mut();
    if targets.len() != entries.len() {
        return Err(CheckpointError::Malformed {
            path: path.display().to_string(),
            reason: format!("expected {} tensors, file has {}", targets.len(), entries.len()),
        });
    }
    for ((want_name, target), (name, tensor)) in targets.iter_mut().zip(entries) {
        if want_name != name || target.shape() != tensor.shape() {
            return Err(CheckpointError::Malformed {
                path: path.display().to_string(),
                reason: format!(
                    "tensor {name} {:?} does not match expected {want_name} {:?}",
                    tensor.shape(),
                    target.shape()
                ),
            });
        }
        target.data_mut().copy_from_slice(tensor.data());
    }
    Ok(())
}

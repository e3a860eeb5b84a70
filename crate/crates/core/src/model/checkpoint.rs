//! Versioned checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! b"NPCLCKPT"  u32 version
//! u64 header length, header JSON {"model": ModelConfig, "meta": ...}
//! u32 tensor count
//! per tensor: u32 name length, name, u64 rows, u64 cols, rows·cols f64
//! ```
//!
//! Values are widened to `f64` on write; `f32 -> f64 -> f32` is exact, so a
//! reloaded network reproduces inference bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, Network};
use crate::real::Real;

const MAGIC: &[u8; 8] = b"NPCLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint tensor `{name}`: {reason}")]
    Tensor { name: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: serde_json::Value,
}

pub fn checkpoint_bytes<T: Real>(net: &Network<T>, meta: &serde_json::Value) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header { model: net.config.clone(), meta: meta.clone() })?;
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    let params = net.named_params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(tensor.ncols() as u64).to_le_bytes());
        for v in tensor.iter() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    net: &Network<T>,
    meta: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let bytes = checkpoint_bytes(net, meta)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if buf.len() < n {
        return Err(CheckpointError::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "truncated checkpoint",
        )));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().expect("4 bytes")))
}

fn take_u64(buf: &mut &[u8]) -> Result<u64, CheckpointError> {
    Ok(u64::from_le_bytes(take(buf, 8)?.try_into().expect("8 bytes")))
}

/// Rebuilds a network from checkpoint bytes. Returns the stored metadata too.
pub fn checkpoint_from_bytes<T: Real>(bytes: &[u8]) -> Result<(Network<T>, serde_json::Value), CheckpointError> {
    let mut buf = bytes;
    if take(&mut buf, MAGIC.len())? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = take_u32(&mut buf)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header_len = take_u64(&mut buf)? as usize;
    let header: Header = serde_json::from_slice(take(&mut buf, header_len)?)?;
    let mut net = Network::<T>::new(&header.model, 0)?;
    let expected: Vec<(String, (usize, usize))> =
        net.named_params().into_iter().map(|(n, t)| (n, t.dim())).collect();

    let count = take_u32(&mut buf)? as usize;
    if count != expected.len() {
        return Err(CheckpointError::Tensor {
            name: "*".into(),
            reason: format!("{count} tensors stored, config implies {}", expected.len()),
        });
    }
    let mut loaded = Vec::with_capacity(count);
    for (want_name, want_dim) in &expected {
        let name_len = take_u32(&mut buf)? as usize;
        let name = String::from_utf8_lossy(take(&mut buf, name_len)?).into_owned();
        if &name != want_name {
            return Err(CheckpointError::Tensor { name, reason: format!("expected `{want_name}`") });
        }
        let rows = take_u64(&mut buf)? as usize;
        let cols = take_u64(&mut buf)? as usize;
        if (rows, cols) != *want_dim {
            return Err(CheckpointError::Tensor { name, reason: format!("shape {rows}x{cols}, expected {want_dim:?}") });
        }
        let raw = take(&mut buf, rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        loaded.push(Array2::from_shape_vec((rows, cols), data).expect("length checked"));
    }
    if !buf.is_empty() {
        return Err(CheckpointError::Tensor { name: "*".into(), reason: "trailing bytes".into() });
    }
    for (slot, value) in net.params_mut().into_iter().zip(loaded) {
        *slot = value;
    }
    Ok((net, header.meta))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Network<T>, serde_json::Value), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = Network::<f32>::new(&ModelConfig::default(), 42).unwrap();
        let meta = serde_json::json!({"epoch": 5});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &net, &meta).unwrap();
        let (back, meta_back) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let net = Network::<f64>::new(&ModelConfig::default(), 1).unwrap();
        let bytes = checkpoint_bytes(&net, &serde_json::Value::Null).unwrap();
        assert!(matches!(checkpoint_from_bytes::<f64>(b"garbage!...."), Err(CheckpointError::Magic)));
        assert!(checkpoint_from_bytes::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        assert!(matches!(checkpoint_from_bytes::<f64>(&versioned), Err(CheckpointError::Version(9))));
    }
}

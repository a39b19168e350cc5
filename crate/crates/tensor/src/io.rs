//! AMMT tensor serialization.
//!
//! Layout: the 4 magic bytes `AMMT`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dimensions, then the elements as little-endian `f32`
//! in row-major order. Wider element types are narrowed to `f32` on write.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AMMT";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    encode_into(t, &mut out);
    out
}

pub fn encode_into<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

/// Decodes one tensor starting at `offset`; returns it with the offset just
/// past its last byte. `path` only labels errors.
pub fn decode_at(bytes: &[u8], offset: usize, path: &Path) -> Result<(Tensor<f32>, usize)> {
    let fail = |at: usize, msg: String| TensorError::Format {
        path: path.to_path_buf(),
        offset: at as u64,
        msg,
    };
    let read_u32 = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| fail(at, "unexpected end of data".into()))
    };
    match bytes.get(offset..offset + 4) {
        Some(m) if m == MAGIC => {}
        Some(_) => return Err(fail(offset, "bad magic, expected \"AMMT\"".into())),
        None => return Err(fail(offset, "unexpected end of data".into())),
    }
    let rank = read_u32(offset + 4)? as usize;
    // Guards against reading a huge rank from a corrupt header.
    if rank > 16 {
        return Err(fail(offset + 4, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut at = offset + 8;
    for _ in 0..rank {
        let d = read_u32(at)? as usize;
        if d == 0 {
            return Err(fail(at, "zero dimension".into()));
        }
        shape.push(d);
        at += 4;
    }
    let count: usize = shape.iter().product();
    let end = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(at))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            fail(
                bytes.len(),
                format!("payload truncated: shape {shape:?} needs {count} values"),
            )
        })?;
    let data = bytes[at..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok((Tensor::raw(shape, data), end))
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a file holding exactly one tensor.
pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: PathBuf::from(path),
        source,
    })?;
    let (t, end) = decode_at(&bytes, 0, path)?;
    if end != bytes.len() {
        return Err(TensorError::Format {
            path: path.to_path_buf(),
            offset: end as u64,
            msg: format!("{} trailing bytes", bytes.len() - end),
        });
    }
    Ok(t)
}

//! `RIBT` binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "RIBT"
//! version   u8       1
//! dtype     u8       0 = f32, 1 = f64
//! rank      u32
//! dims      rank x u64
//! payload   row-major scalars
//! ```

use std::fs;
use std::path::Path;

use super::{numel, DType, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RIBT";
const VERSION: u8 = 1;

/// A tensor whose element type is only known after reading the header.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    /// Converts to the requested scalar type.
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + T::DTYPE.size() * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.as_slice() {
        v.write_le(&mut out);
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = *pos + n;
    if end > bytes.len() {
        return Err(Error::Length {
            expected: end,
            found: bytes.len(),
        });
    }
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn read_tensor(bytes: &[u8]) -> Result<AnyTensor> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MAGIC {
        return Err(Error::Format("bad magic, expected RIBT".into()));
    }
    let version = take(bytes, &mut pos, 1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let code = take(bytes, &mut pos, 1)?[0];
    let dtype =
        DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    let rank = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
    if rank == 0 {
        return Err(Error::Format("rank 0 tensor".into()));
    }
    let mut dims = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap());
        if d == 0 {
            return Err(Error::Format("zero-sized dim".into()));
        }
        dims.push(usize::try_from(d).map_err(|_| Error::Format("dim overflows usize".into()))?);
    }
    let count = numel(&dims);
    let payload = take(bytes, &mut pos, count * dtype.size())?;
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - pos
        )));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode(dims, payload)),
        DType::F64 => AnyTensor::F64(decode(dims, payload)),
    })
}

fn decode<T: Scalar>(dims: Vec<usize>, payload: &[u8]) -> Tensor<T> {
    let size = T::DTYPE.size();
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_parts(dims, data)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&bytes)
}

/// Loads a tensor that must have been stored with element type `T`.
pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let any = load_tensor_any(path)?;
    if any.dtype() != T::DTYPE {
        return Err(Error::Format(format!(
            "stored dtype {:?}, requested {:?}",
            any.dtype(),
            T::DTYPE
        )));
    }
    Ok(any.into_tensor())
}

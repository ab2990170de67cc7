//! Binary tensor file format.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field                         |
//! |-------|-------------------------------|
//! | 4     | magic `TRFS`                  |
//! | 2     | version (`u16`, currently 1)  |
//! | 1     | dtype (0 = f32, 1 = f64)      |
//! | 1     | rank                          |
//! | 4·r   | dims (`u32` each)             |
//! | …     | row-major payload             |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TRFS";
pub const VERSION: u16 = 1;

/// A decoded tensor of either precision.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Returns the tensor if it is stored as `T`.
    pub fn into_typed<T: Scalar>(self) -> Result<Tensor<T>> {
        let found = self.dtype();
        let mismatch = || Error::DtypeMismatch {
            found: found.name(),
            requested: T::DTYPE.name(),
        };
        if found != T::DTYPE {
            return Err(mismatch());
        }
        // Same dtype, so the cast is a bit-preserving identity.
        Ok(match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        })
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let dtype = T::DTYPE;
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.len() * dtype.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(u8::try_from(t.rank()).expect("rank fits in u8"));
    for &d in t.shape() {
        out.extend_from_slice(&u32::try_from(d).expect("extent fits in u32").to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn decode_payload<T: Scalar>(dims: &[usize], payload: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(dims, data)
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let truncated = |expected: usize| Error::TruncatedPayload {
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 8 {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(truncated(8));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = DType::from_code(bytes[6]).ok_or(Error::UnsupportedDtype(bytes[6]))?;
    let rank = bytes[7] as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = dims.iter().product();
    let expected = header + numel * dtype.size();
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    let payload = &bytes[header..expected];
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(&dims, payload)?),
        DType::F64 => AnyTensor::F64(decode_payload(&dims, payload)?),
    })
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    load_any(path)?.into_typed()
}

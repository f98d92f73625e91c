//! `DTNS` tensor files.
//!
//! Layout, all little-endian:
//!
//! | bytes          | field                         |
//! |----------------|-------------------------------|
//! | 4              | magic `DTNS`                  |
//! | 2              | version (u16, currently 1)    |
//! | 2              | ndim (u16)                    |
//! | 8 · ndim       | dims (u64 each)               |
//! | 4 · Π dims     | payload, f32 row-major        |
//!
//! Nothing may follow the payload.

use std::path::Path;

use delta_attn::DenseMatrix;
use thiserror::Error;

use crate::error::{HarnessError, Result};

pub const MAGIC: [u8; 4] = *b"DTNS";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorFileError {
    #[error("bad magic {0:02x?}, expected \"DTNS\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}, expected {VERSION}")]
    UnsupportedVersion(u16),
    #[error("truncated header: need {needed} bytes, have {len}")]
    TruncatedHeader { needed: usize, len: usize },
    #[error("payload size mismatch: dims need {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("dims {0:?} overflow the addressable size")]
    TooLarge(Vec<u64>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("expected a {expected}-d tensor, got dims {dims:?}")]
    Rank { expected: usize, dims: Vec<usize> },
}

/// An N-d f32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorFileError::TooLarge(dims.iter().map(|&d| d as u64).collect()))?;
        if numel != data.len() {
            return Err(TensorFileError::SizeMismatch {
                expected: numel as u64 * 4,
                actual: data.len() as u64 * 4,
            }
            .into());
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &DenseMatrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    /// Stacks equally shaped matrices into a `[count, rows, cols]` tensor.
    pub fn stack(mats: &[DenseMatrix]) -> Result<Self> {
        let (rows, cols) = mats.first().map_or((0, 0), |m| (m.rows(), m.cols()));
        if mats.iter().any(|m| m.rows() != rows || m.cols() != cols) {
            return Err(HarnessError::Config(
                "cannot stack matrices of different shapes".into(),
            ));
        }
        let data = mats.iter().flat_map(|m| m.data().iter().copied()).collect();
        Tensor::new(vec![mats.len(), rows, cols], data)
    }

    pub fn to_matrix(&self) -> Result<DenseMatrix> {
        match self.dims[..] {
            [r, c] => Ok(DenseMatrix::new(r, c, self.data.clone())?),
            _ => Err(TensorFileError::Rank {
                expected: 2,
                dims: self.dims.clone(),
            }
            .into()),
        }
    }

    /// Splits along the first axis. A 2-d tensor is one matrix.
    pub fn unstack(&self) -> Result<Vec<DenseMatrix>> {
        match self.dims[..] {
            [_, _] => Ok(vec![self.to_matrix()?]),
            [h, r, c] => {
                let step = r * c;
                (0..h)
                    .map(|i| {
                        Ok(DenseMatrix::new(
                            r,
                            c,
                            self.data[i * step..(i + 1) * step].to_vec(),
                        )?)
                    })
                    .collect()
            }
            _ => Err(TensorFileError::Rank {
                expected: 3,
                dims: self.dims.clone(),
            }
            .into()),
        }
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u16).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, TensorFileError> {
    let short = |needed| TensorFileError::TruncatedHeader {
        needed,
        len: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(short(8));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(TensorFileError::BadMagic(magic));
    }
    if bytes.len() < 8 {
        return Err(short(8));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(TensorFileError::UnsupportedVersion(version));
    }
    let ndim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let header = 8 + 8 * ndim;
    if bytes.len() < header {
        return Err(short(header));
    }
    let dims: Vec<u64> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let expected = dims
        .iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorFileError::TooLarge(dims.clone()))?;
    let actual = (bytes.len() - header) as u64;
    if expected != actual {
        return Err(TensorFileError::SizeMismatch { expected, actual });
    }
    let dims = dims
        .iter()
        .map(|&d| usize::try_from(d))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| TensorFileError::TooLarge(dims.clone()))?;
    let mut data = Vec::with_capacity(dims.iter().product());
    for (i, c) in bytes[header..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(TensorFileError::NonFinite(i));
        }
        data.push(v);
    }
    Ok(Tensor { dims, data })
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| HarnessError::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(decode(&bytes)?)
}

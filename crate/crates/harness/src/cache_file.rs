//! `DKVC` checkpoint files for [`DeltaKVCache`].
//!
//! Little-endian layout:
//!
//! ```text
//! magic "DKVC" | version u16 | reserved u16 (0)
//! d_head u64 | w_d u64 | n u64            (n = 0: empty cache, nothing follows)
//! basis       d_head × f32
//! reference   d_head × f32
//! n−1 delta columns: nnz u32, then nnz × (element u32, delta f32)
//! ring_len u64, then ring_len × (position u64, d_head × f32)
//! values      n × d_head × f32
//! ```
//!
//! Column indices and the state step are implied by position. Every
//! decoded cache passes [`DeltaKVCache::validate`].

use std::path::Path;

use delta_attn::{DeltaKVCache, DeltaState, SparseDeltaColumn};
use thiserror::Error;

use crate::error::{HarnessError, Result};

pub const MAGIC: [u8; 4] = *b"DKVC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CacheFileError {
    #[error("bad magic {0:02x?}, expected \"DKVC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}, expected {VERSION}")]
    UnsupportedVersion(u16),
    #[error("unexpected end of file at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("header field {field} = {value} is out of range")]
    Field { field: &'static str, value: u64 },
    #[error("decoded cache is inconsistent: {0}")]
    Invalid(delta_attn::Error),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CacheFileError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CacheFileError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u16(&mut self) -> std::result::Result<u16, CacheFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, CacheFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CacheFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, CacheFileError> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or(CacheFileError::Truncated(self.bytes.len()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// A count that must be coverable by the remaining bytes at
    /// `unit` bytes per item, so hostile headers cannot force huge
    /// allocations.
    fn count(
        &mut self,
        field: &'static str,
        unit: usize,
    ) -> std::result::Result<usize, CacheFileError> {
        let value = self.u64()?;
        match usize::try_from(value) {
            Ok(c) if c.saturating_mul(unit) <= self.remaining() => Ok(c),
            _ => Err(CacheFileError::Field { field, value }),
        }
    }
}

pub fn encode(cache: &DeltaKVCache) -> Vec<u8> {
    let d = cache.d_head();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&(cache.w_d() as u64).to_le_bytes());
    out.extend_from_slice(&(cache.len() as u64).to_le_bytes());
    let Some(state) = cache.state() else {
        return out;
    };
    let put = |out: &mut Vec<u8>, xs: &[f32]| {
        xs.iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
    };
    put(&mut out, cache.basis());
    put(&mut out, state.reference());
    for col in cache.delta_columns() {
        out.extend_from_slice(&(col.nnz() as u32).to_le_bytes());
        for &(i, v) in &col.entries {
            out.extend_from_slice(&i.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(cache.exact_ring().len() as u64).to_le_bytes());
    for (p, k) in cache.exact_ring() {
        out.extend_from_slice(&(p as u64).to_le_bytes());
        put(&mut out, k);
    }
    for v in cache.values() {
        put(&mut out, v);
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<DeltaKVCache, CacheFileError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CacheFileError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CacheFileError::UnsupportedVersion(version));
    }
    let reserved = r.u16()?;
    if reserved != 0 {
        return Err(CacheFileError::Field {
            field: "reserved",
            value: reserved as u64,
        });
    }
    let d = r.count("d_head", 0)?;
    let w_d = r.count("w_d", 0)?;
    if d == 0 {
        return Err(CacheFileError::Field {
            field: "d_head",
            value: 0,
        });
    }
    let n = r.count("n", 4)?;
    let invalid = CacheFileError::Invalid;
    if n == 0 {
        trailing(&r)?;
        return DeltaKVCache::empty(d, w_d).map_err(invalid);
    }
    let basis = r.f32s(d)?;
    let reference = r.f32s(d)?;
    let mut columns = Vec::with_capacity(n - 1);
    for index in 1..n {
        let nnz = r.u32()? as usize;
        let raw = r.take(
            nnz.checked_mul(8)
                .ok_or(CacheFileError::Truncated(bytes.len()))?,
        )?;
        let entries = raw
            .chunks_exact(8)
            .map(|c| {
                (
                    u32::from_le_bytes(c[..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..].try_into().unwrap()),
                )
            })
            .collect();
        columns.push(SparseDeltaColumn { index, entries });
    }
    let ring_len = r.count("ring_len", 8)?;
    let mut ring = Vec::with_capacity(ring_len);
    for _ in 0..ring_len {
        let p = r.u64()?;
        let p = usize::try_from(p).map_err(|_| CacheFileError::Field {
            field: "position",
            value: p,
        })?;
        ring.push((p, r.f32s(d)?));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(r.f32s(d)?);
    }
    trailing(&r)?;
    let state = DeltaState::from_parts(reference, n - 1);
    DeltaKVCache::from_parts(d, w_d, basis, columns, ring, values, Some(state)).map_err(invalid)
}

fn trailing(r: &Reader<'_>) -> std::result::Result<(), CacheFileError> {
    match r.remaining() {
        0 => Ok(()),
        extra => Err(CacheFileError::Trailing(extra)),
    }
}

pub fn save(path: &Path, cache: &DeltaKVCache) -> Result<()> {
    std::fs::write(path, encode(cache)).map_err(|e| HarnessError::io(path, e))
}

pub fn load(path: &Path) -> Result<DeltaKVCache> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(decode(&bytes)?)
}

//! WPFT tensor files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "WPFT" (57 50 46 54)
//!      4     4  u32 version = 1
//!      8     4  u32 dtype   = 1 (f32)
//!     12     4  u32 ndim    = 2
//!     16     8  u64 dim0
//!     24     8  u64 dim1
//!     32     *  dim0 * dim1 f32 values, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"WPFT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const HEADER_LEN: usize = 32;

pub fn encode_tensor(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());

    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = u32_at(8);
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let ndim = u32_at(12);
    if ndim != 2 {
        return Err(Error::BadNdim(ndim));
    }
    let (dim0, dim1) = (u64_at(16), u64_at(24));
    let payload = (bytes.len() - HEADER_LEN) as u64;
    let expected = dim0
        .checked_mul(dim1)
        .and_then(|n| n.checked_mul(4))
        .unwrap_or(u64::MAX);
    if expected > payload {
        return Err(Error::TruncatedPayload {
            expected,
            actual: payload,
        });
    }
    if expected < payload {
        return Err(Error::TrailingBytes {
            expected,
            actual: payload,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::new(dim0 as usize, dim1 as usize, data)
}

/// Writes `m` to `path`. Matrices are finite by construction, so every
/// in-memory matrix can be written.
pub fn save_tensor(path: impl AsRef<Path>, m: impl AsRef<Matrix>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(m.as_ref());
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Writes raw row-major values, refusing non-finite entries.
pub fn save_values(path: impl AsRef<Path>, rows: usize, cols: usize, data: Vec<f32>) -> Result<()> {
    save_tensor(path, Matrix::new(rows, cols, data)?)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

//! Named-matrix container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      4 bytes   b"OPMX"
//! version    u32       1
//! count      u32       number of matrices
//! repeated count times:
//!   name_len u32
//!   name     name_len bytes of UTF-8
//!   rows     u64
//!   cols     u64
//!   data     rows * cols f64, row-major
//! ```
//!
//! Nothing follows the last matrix; trailing bytes are rejected.

use std::path::Path;

use opposd_core::nn::DenseMatrix;

use crate::error::{LabError, LabResult};

pub const MAGIC: &[u8; 4] = b"OPMX";
pub const VERSION: u32 = 1;

pub fn encode(matrices: &[(String, &DenseMatrix)]) -> Vec<u8> {
    let payload: usize = matrices
        .iter()
        .map(|(n, m)| 20 + n.len() + 8 * m.as_slice().len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(matrices.len() as u32).to_le_bytes());
    for (name, m) in matrices {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> LabResult<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(LabError::format(
                self.path,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> LabResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> LabResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> LabResult<Vec<(String, DenseMatrix)>> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4)? != MAGIC {
        return Err(LabError::format(path, "not a matrix file (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(LabError::UnsupportedVersion {
            path: path.into(),
            found: version as u64,
            supported: VERSION as u64,
        });
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| LabError::format(path, "matrix name is not UTF-8"))?
            .to_string();
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| LabError::format(path, format!("matrix `{name}` is too large")))?;
        let data = c
            .take(len)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, DenseMatrix::from_vec(rows, cols, data)?));
    }
    if c.pos != bytes.len() {
        return Err(LabError::format(
            path,
            format!("{} trailing bytes", bytes.len() - c.pos),
        ));
    }
    Ok(out)
}

/// Looks up matrices by name.
pub struct MatrixSet {
    path: std::path::PathBuf,
    entries: Vec<(String, DenseMatrix)>,
}

impl MatrixSet {
    pub fn read(path: &Path) -> LabResult<Self> {
        let bytes = std::fs::read(path).map_err(LabError::io(path))?;
        Ok(MatrixSet {
            entries: decode(&bytes, path)?,
            path: path.into(),
        })
    }

    pub fn get(&self, name: &str) -> LabResult<&DenseMatrix> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| LabError::format(&self.path, format!("missing matrix `{name}`")))
    }

    /// Flattened contents of a matrix that must hold `len` values.
    pub fn vector(&self, name: &str, len: usize) -> LabResult<Vec<f64>> {
        let m = self.get(name)?;
        if m.as_slice().len() != len {
            return Err(LabError::format(
                &self.path,
                format!("matrix `{name}` has {} values, expected {len}", m.as_slice().len()),
            ));
        }
        Ok(m.as_slice().to_vec())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

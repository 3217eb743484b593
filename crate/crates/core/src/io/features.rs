//! `CZSF` feature stores: a fixed header followed by a row-major `f32` matrix.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CZSF"
//! 4       4     version (u32, currently 1)
//! 8       8     n_rows (u64)
//! 16      8     dim (u64)
//! 24      4     dtype (u32, 0 = f32 little-endian)
//! 28      ...   n_rows * dim values
//! ```
//! All integers are little-endian.

use std::path::Path;

use ndarray::Array2;

use super::binary::{checked_size, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CZSF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32_LE: u32 = 0;
pub const HEADER_LEN: usize = 28;

/// Values are stored as `f32`; anything not representable as a finite `f32`
/// is rejected.
pub fn features_to_bytes(matrix: &Array2<f64>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.ncols() as u64).to_le_bytes());
    out.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    for &v in matrix.iter() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFiniteInput("feature matrix"));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn features_from_bytes(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let rows = r.count("n_rows")?;
    let dim = r.count("dim")?;
    let dtype = r.u32("dtype")?;
    if dtype != DTYPE_F32_LE {
        return Err(r.error(format!("unsupported dtype {dtype}")));
    }
    let size = checked_size(&r, rows, dim, 4)?;
    let data = r.take(size, "feature data")?;
    r.expect_end()?;

    let mut values = Vec::with_capacity(rows * dim);
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::parse(
                path,
                format!("row {}, column {}", i / dim.max(1), i % dim.max(1)),
                "non-finite feature value",
            ));
        }
        values.push(v as f64);
    }
    Ok(Array2::from_shape_vec((rows, dim), values).expect("size checked above"))
}

pub fn save_features(path: impl AsRef<Path>, matrix: &Array2<f64>) -> Result<()> {
    super::write_atomic(path.as_ref(), &features_to_bytes(matrix)?)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    features_from_bytes(&super::read_bytes(path)?, path)
}

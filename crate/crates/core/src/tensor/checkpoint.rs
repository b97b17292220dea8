//! `VXT1` tensor blobs and named parameter checkpoints.
//!
//! Blob layout (all integers little-endian):
//!
//! ```text
//! "VXT1" | dtype u8 (0 = f32, 1 = f64) | rank u8 | extents u64 × rank | data
//! ```
//!
//! A checkpoint file is `"VXTC" | count u32 | (name_len u32 | name | blob) × count`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"VXT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VXTC";

/// Serialize a tensor's values as a `VXT1` blob.
pub fn write_tensor<T: Element>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.reserve(t.numel() * std::mem::size_of::<T>());
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_blob<T: Element>(r: &mut Reader<'_>) -> Result<Tensor<T>> {
    let magic = r.take(4)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            path: r.path.to_path_buf(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let dtype = r.u8()?;
    let rank = r.u8()? as usize;
    let shape = (0..rank)
        .map(|_| r.u64().map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = numel(&shape);
    let data: Vec<T> = match dtype {
        0 => r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| T::lit(f32::read_le(c) as f64))
            .collect(),
        1 => r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| T::lit(f64::read_le(c)))
            .collect(),
        code => {
            return Err(Error::UnsupportedDtype {
                path: r.path.to_path_buf(),
                code: code as i32,
            })
        }
    };
    Tensor::new(data, &shape)
}

/// Parse one `VXT1` blob. Values are converted to `T` if stored otherwise.
pub fn read_tensor<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path: Path::new("<memory>"),
    };
    read_blob(&mut r)
}

pub fn write_checkpoint<T: Element>(path: &Path, params: &[(String, Tensor<T>)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor(&mut out, t);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_checkpoint<T: Element>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        path,
    };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(len)?).into_owned();
        params.push((name, read_blob(&mut r)?));
    }
    Ok(params)
}

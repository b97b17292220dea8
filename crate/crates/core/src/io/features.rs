//! `VXF1` encoder feature files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VXF1"
//! subject_len u32 | subject_id (UTF-8)
//! level_count u32
//! level_count × ( d_emb u64 | depth u64 | grid_h u64 | grid_w u64 | f32 payload )
//! tag_len u32 | encoder_tag (UTF-8)
//! checksum u64   FNV-1a 64 over every preceding byte
//! ```
//!
//! Payload order per level is `(channel, depth, grid_h, grid_w)`, row-major.

use std::fs;
use std::path::Path;

use crate::encoder::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"VXF1";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit. Any single-byte change alters the digest.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    /// `(d_emb, depth, grid_h, grid_w)`
    pub extents: [usize; 4],
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub subject_id: String,
    pub encoder_tag: String,
    pub levels: Vec<FeatureLevel>,
    pub checksum: u64,
}

impl FeatureFile {
    pub fn from_pyramid<T: Element>(pyr: &FeaturePyramid<T>, subject_id: &str, encoder_tag: &str) -> Self {
        let levels = pyr
            .levels
            .iter()
            .map(|l| {
                let s = l.shape();
                FeatureLevel {
                    extents: [s[1], s[2], s[3], s[4]],
                    data: l.data().iter().map(|v| v.as_f64() as f32).collect(),
                }
            })
            .collect();
        let mut f = FeatureFile {
            subject_id: subject_id.to_string(),
            encoder_tag: encoder_tag.to_string(),
            levels,
            checksum: 0,
        };
        let bytes = f.encode();
        f.checksum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        f
    }

    /// Volumetric pyramid with source extents `(depth, grid_h·patch, grid_w·patch)`
    /// left to the caller; here the grid extents are used.
    pub fn to_pyramid<T: Element>(&self, source_extents: [usize; 3]) -> Result<FeaturePyramid<T>> {
        if self.levels.len() != LEVELS {
            return Err(Error::LevelCount {
                path: self.subject_id.clone().into(),
                expected: LEVELS,
                found: self.levels.len(),
            });
        }
        let levels: Vec<Tensor<T>> = self
            .levels
            .iter()
            .map(|l| {
                let [c, d, h, w] = l.extents;
                Tensor::new(l.data.iter().map(|&v| T::lit(v as f64)).collect(), &[1, c, d, h, w])
            })
            .collect::<Result<_>>()?;
        FeaturePyramid::new(levels.try_into().expect("four levels"), source_extents)
    }

    pub fn d_emb(&self) -> usize {
        self.levels.first().map_or(0, |l| l.extents[0])
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.subject_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.subject_id.as_bytes());
        out.extend_from_slice(&(self.levels.len() as u32).to_le_bytes());
        for l in &self.levels {
            for e in l.extents {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in &l.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.encoder_tag.len() as u32).to_le_bytes());
        out.extend_from_slice(self.encoder_tag.as_bytes());
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |expected| Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        };
        if bytes.len() < 4 + 8 {
            return Err(truncated(12));
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > body.len() {
                return Err(truncated(pos + n + 8));
            }
            let s = &body[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap()) as usize;
        let utf8 = |s: &[u8]| {
            String::from_utf8(s.to_vec()).map_err(|_| Error::Format {
                path: path.to_path_buf(),
                msg: "invalid UTF-8 string".into(),
            })
        };

        let n = u32_at(take(4)?);
        let subject_id = utf8(take(n)?)?;
        let level_count = u32_at(take(4)?);
        if level_count != LEVELS {
            return Err(Error::LevelCount {
                path: path.to_path_buf(),
                expected: LEVELS,
                found: level_count,
            });
        }
        let mut levels = Vec::with_capacity(level_count);
        for _ in 0..level_count {
            let mut extents = [0usize; 4];
            for e in &mut extents {
                *e = u64_at(take(8)?);
            }
            let count: usize = extents.iter().product();
            let data = take(count * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            levels.push(FeatureLevel { extents, data });
        }
        let n = u32_at(take(4)?);
        let encoder_tag = utf8(take(n)?)?;
        if pos != body.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("{} trailing bytes before checksum", body.len() - pos),
            });
        }
        if levels.iter().any(|l| l.extents != levels[0].extents) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "feature levels have inconsistent extents".into(),
            });
        }
        Ok(FeatureFile {
            subject_id,
            encoder_tag,
            levels,
            checksum: stored,
        })
    }
}

pub fn write_feature_file<T: Element>(
    pyr: &FeaturePyramid<T>,
    subject_id: &str,
    encoder_tag: &str,
    path: &Path,
) -> Result<()> {
    let f = FeatureFile::from_pyramid(pyr, subject_id, encoder_tag);
    fs::write(path, f.encode())?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path)?;
    FeatureFile::decode(&bytes, path)
}

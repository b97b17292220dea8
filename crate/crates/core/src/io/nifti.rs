//! NIfTI-1 single-file subset: 3D, `uint8` / `int16` / `float32`, optionally
//! gzip-compressed.
//!
//! NIfTI index `i` (fastest) maps to array width, `j` to height and `k` to
//! depth, so the `(D, H, W)` row-major buffer is the file payload verbatim.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::volume::{Geometry, LabelVolume, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.starts_with(&[0x1f, 0x8b])
}

fn wants_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Subject id from a file name, dropping `.nii` / `.nii.gz`.
pub fn subject_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

/// Rotation part of the quaternion form, columns scaled by `qfac` on `k`.
fn quaternion_rotation(b: f64, c: f64, d: f64, qfac: f64) -> [[f64; 3]; 3] {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        ],
    ];
    // columns of r are the i, j, k axes
    let mut cols = [[0.0; 3]; 3];
    for (j, col) in cols.iter_mut().enumerate() {
        for row in 0..3 {
            col[row] = r[row][j] * if j == 2 { qfac } else { 1.0 };
        }
    }
    cols
}

fn geometry_from_header(h: &[u8], extents: [usize; 3], path: &Path) -> Result<Geometry> {
    let pixdim: Vec<f64> = (0..8).map(|i| f32_at(h, 76 + 4 * i) as f64).collect();
    let (qform, sform) = (i16_at(h, 252), i16_at(h, 254));
    // (column vector, spacing) per NIfTI axis i, j, k
    let (axes, origin): ([([f64; 3], f64); 3], [f64; 3]) = if sform > 0 {
        let rows: Vec<[f64; 4]> = (0..3)
            .map(|r| std::array::from_fn(|c| f32_at(h, 280 + 16 * r + 4 * c) as f64))
            .collect();
        let axes = std::array::from_fn(|j| {
            let col = [rows[0][j], rows[1][j], rows[2][j]];
            let n = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            (col.map(|v| if n > 0.0 { v / n } else { v }), n)
        });
        (axes, [rows[0][3], rows[1][3], rows[2][3]])
    } else if qform > 0 {
        let q = |o| f32_at(h, o) as f64;
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let cols = quaternion_rotation(q(256), q(260), q(264), qfac);
        (
            std::array::from_fn(|j| (cols[j], pixdim[j + 1].abs())),
            [q(268), q(272), q(276)],
        )
    } else {
        // analyze-style fallback: scaled identity
        let e = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        (std::array::from_fn(|j| (e[j], pixdim[j + 1].abs())), [0.0; 3])
    };
    let g = Geometry {
        extents,
        spacing: [axes[2].1, axes[1].1, axes[0].1],
        direction: [axes[2].0, axes[1].0, axes[0].0],
        origin,
    };
    g.validate().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(g)
}

/// Parse an in-memory NIfTI-1 file (gzip allowed).
pub fn decode_nifti(raw: &[u8], path: &Path) -> Result<Volume> {
    let bytes = if is_gzip(raw) {
        let mut out = Vec::new();
        GzDecoder::new(raw).read_to_end(&mut out)?;
        out
    } else {
        raw.to_vec()
    };
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let h = &bytes[..HEADER_SIZE];
    if &h[344..348] != b"n+1\0" || i32::from_le_bytes(h[..4].try_into().unwrap()) != HEADER_SIZE as i32 {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(&h[344..347]).into_owned(),
        });
    }
    let dim: Vec<i16> = (0..8).map(|i| i16_at(h, 40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) || (ndim > 3 && dim[4..=ndim as usize].iter().any(|&d| d > 1)) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("only 3D volumes are supported, dim = {dim:?}"),
        });
    }
    let ext = |i: usize| if i as i16 <= ndim { dim[i].max(1) as usize } else { 1 };
    let extents = [ext(3), ext(2), ext(1)];
    let geometry = geometry_from_header(h, extents, path)?;

    let dtype = i16_at(h, 70);
    let width = match dtype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        code => {
            return Err(Error::UnsupportedDtype {
                path: path.to_path_buf(),
                code: code as i32,
            })
        }
    };
    let offset = (f32_at(h, 108) as usize).max(HEADER_SIZE);
    let n = geometry.voxel_count();
    let end = offset + n * width;
    if bytes.len() < end {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: end,
            found: bytes.len(),
        });
    }
    let payload = &bytes[offset..end];
    let mut data: Vec<f32> = match dtype {
        DT_UINT8 => payload.iter().map(|&v| v as f32).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let (slope, inter) = (f32_at(h, 112), f32_at(h, 116));
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Volume::new(&subject_from_path(path), geometry, data)
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    decode_nifti(&fs::read(path)?, path)
}

pub fn read_label(path: &Path) -> Result<LabelVolume> {
    LabelVolume::from_volume(read_nifti(path)?)
}

fn encode_header(g: &Geometry, dtype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let [d, hh, w] = g.extents;
    for (i, v) in [3, w, hh, d, 1, 1, 1, 1].into_iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, v as i16);
    }
    put_i16(&mut h, 70, dtype);
    put_i16(&mut h, 72, bitpix);
    let pixdim = [1.0, g.spacing[2], g.spacing[1], g.spacing[0], 0.0, 0.0, 0.0, 0.0];
    for (i, v) in pixdim.into_iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, v as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 10; // xyzt_units: mm, s
    put_i16(&mut h, 254, 1);
    // NIfTI axes i, j, k are array axes W, H, D
    let cols = [
        (g.direction[2], g.spacing[2]),
        (g.direction[1], g.spacing[1]),
        (g.direction[0], g.spacing[0]),
    ];
    for r in 0..3 {
        for (c, (dir, sp)) in cols.iter().enumerate() {
            put_f32(&mut h, 280 + 16 * r + 4 * c, (dir[r] * sp) as f32);
        }
        put_f32(&mut h, 280 + 16 * r + 12, g.origin[r] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_bytes(path: &Path, bytes: Vec<u8>) -> Result<()> {
    if wants_gzip(path) {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Write a float32 image; `.gz` paths are compressed.
pub fn write_nifti(v: &Volume, path: &Path) -> Result<()> {
    let mut out = encode_header(&v.geometry, DT_FLOAT32, 32);
    out.reserve(v.data.len() * 4);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path, out)
}

/// Write a uint8 mask.
pub fn write_label(l: &LabelVolume, path: &Path) -> Result<()> {
    let mut out = encode_header(&l.geometry, DT_UINT8, 8);
    out.extend_from_slice(&l.data);
    write_bytes(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_quaternion() {
        let c = quaternion_rotation(0.0, 0.0, 0.0, 1.0);
        assert_eq!(c, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let f = quaternion_rotation(0.0, 0.0, 0.0, -1.0);
        assert_eq!(f[2], [0.0, 0.0, -1.0]);
    }

    #[test]
    fn half_turn_about_z() {
        // b = c = 0, d = 1: 180° about z flips x and y
        let c = quaternion_rotation(0.0, 0.0, 1.0, 1.0);
        assert_eq!(c[0], [-1.0, 0.0, 0.0]);
        assert_eq!(c[1], [0.0, -1.0, 0.0]);
    }

    #[test]
    fn subject_names() {
        assert_eq!(subject_from_path(Path::new("/d/sub-01.nii.gz")), "sub-01");
        assert_eq!(subject_from_path(Path::new("x.nii")), "x");
    }
}

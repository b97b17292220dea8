use std::path::Path;

use proptest::prelude::*;
use voxbox::encoder::FeaturePyramid;
use voxbox::io::*;
use voxbox::{Error, Tensor};

/// Minimal NIfTI-1 header written field by field.
struct Header {
    dims: [i16; 3],
    dtype: i16,
    bitpix: i16,
    pixdim: [f32; 4],
    slope: f32,
    inter: f32,
    qform: Option<([f32; 3], [f32; 3])>,
    sform: Option<[[f32; 4]; 3]>,
}

impl Header {
    fn new(dims: [i16; 3], dtype: i16, bitpix: i16) -> Self {
        Header {
            dims,
            dtype,
            bitpix,
            pixdim: [1.0, 1.0, 1.0, 1.0],
            slope: 0.0,
            inter: 0.0,
            qform: None,
            sform: None,
        }
    }

    fn bytes(&self, payload: &[u8]) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        let dim = [3, self.dims[0], self.dims[1], self.dims[2], 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&self.dtype.to_le_bytes());
        h[72..74].copy_from_slice(&self.bitpix.to_le_bytes());
        for (i, p) in self.pixdim.iter().enumerate() {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[112..116].copy_from_slice(&self.slope.to_le_bytes());
        h[116..120].copy_from_slice(&self.inter.to_le_bytes());
        if let Some((q, o)) = self.qform {
            h[252..254].copy_from_slice(&1i16.to_le_bytes());
            for (i, v) in q.iter().chain(&o).enumerate() {
                h[256 + 4 * i..260 + 4 * i].copy_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(rows) = self.sform {
            h[254..256].copy_from_slice(&1i16.to_le_bytes());
            for (r, row) in rows.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    h[280 + 16 * r + 4 * c..284 + 16 * r + 4 * c].copy_from_slice(&v.to_le_bytes());
                }
            }
        }
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }
}

fn i16_payload(v: &[i16]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

#[test]
fn int16_with_scaling_and_axis_order() {
    // i = 2 columns, j = 3 rows, k = 4 slices
    let raw: Vec<i16> = (0..24).collect();
    let mut hdr = Header::new([2, 3, 4], 4, 16);
    hdr.pixdim = [1.0, 0.5, 0.75, 2.0];
    hdr.slope = 2.0;
    hdr.inter = -1.0;
    let v = decode_nifti(&hdr.bytes(&i16_payload(&raw)), Path::new("case_07.nii")).unwrap();
    assert_eq!(v.subject_id, "case_07");
    assert_eq!(v.extents(), [4, 3, 2]);
    assert_eq!(v.geometry.spacing, [2.0, 0.75, 0.5]);
    // (k=1, j=2, i=1) sits at flat index 1 + 2·2 + 1·6 = 11
    assert_eq!(v.data[(3 + 2) * 2 + 1], 11.0 * 2.0 - 1.0);
    assert_eq!(
        v.geometry.direction,
        [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]
    );
}

#[test]
fn qform_half_turn_about_z() {
    let mut hdr = Header::new([2, 2, 2], 2, 8);
    hdr.qform = Some(([0.0, 0.0, 1.0], [10.0, 20.0, 30.0]));
    let v = decode_nifti(&hdr.bytes(&[0; 8]), Path::new("q.nii")).unwrap();
    let g = &v.geometry;
    let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6);
    assert!(close(g.direction[2], [-1.0, 0.0, 0.0]));
    assert!(close(g.direction[1], [0.0, -1.0, 0.0]));
    assert!(close(g.direction[0], [0.0, 0.0, 1.0]));
    assert_eq!(g.origin, [10.0, 20.0, 30.0]);
}

#[test]
fn sform_takes_precedence() {
    let mut hdr = Header::new([2, 2, 2], 2, 8);
    hdr.qform = Some(([0.0, 0.0, 1.0], [0.0; 3]));
    hdr.sform = Some([[0.0, 0.0, 3.0, 5.0], [0.0, -2.0, 0.0, 6.0], [1.5, 0.0, 0.0, 7.0]]);
    let v = decode_nifti(&hdr.bytes(&[0; 8]), Path::new("s.nii")).unwrap();
    let g = &v.geometry;
    assert_eq!(g.spacing, [3.0, 2.0, 1.5]);
    assert_eq!(g.direction, [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]);
    assert_eq!(g.origin, [5.0, 6.0, 7.0]);
}

#[test]
fn malformed_headers_rejected() {
    let hdr = Header::new([2, 2, 2], 2, 8);
    let good = hdr.bytes(&[0; 8]);
    let mut bad = good.clone();
    bad[344] = b'x';
    assert!(matches!(
        decode_nifti(&bad, Path::new("a.nii")),
        Err(Error::BadMagic { .. })
    ));
    assert!(matches!(
        decode_nifti(&good[..360 - 4], Path::new("a.nii")),
        Err(Error::Truncated { .. })
    ));
    let odd = Header::new([2, 2, 2], 64, 64).bytes(&[0; 64]);
    assert!(matches!(
        decode_nifti(&odd, Path::new("a.nii")),
        Err(Error::UnsupportedDtype { code: 64, .. })
    ));
}

#[test]
fn write_read_round_trip_plain_and_gzip() {
    let dir = tempfile::tempdir().unwrap();
    let mut g = Geometry::ras([3, 4, 5], [2.5, 0.8, 0.8]);
    g.direction = [[0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [-1.0, 0.0, 0.0]];
    g.origin = [-10.0, 4.5, 3.25];
    let data: Vec<f32> = (0..60).map(|i| i as f32 * 0.5 - 7.0).collect();
    let v = Volume::new("p1", g.clone(), data).unwrap();
    for name in ["p1.nii", "p1.nii.gz"] {
        let path = dir.path().join(name);
        write_nifti(&v, &path).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.subject_id, "p1");
        assert_eq!(back.data, v.data);
        assert_eq!(back.geometry.extents, g.extents);
        for a in 0..3 {
            assert!((back.geometry.spacing[a] - g.spacing[a]).abs() < 1e-6);
            assert!((back.geometry.origin[a] - g.origin[a]).abs() < 1e-6);
            assert_eq!(back.geometry.direction[a], g.direction[a]);
        }
    }
    let mask: Vec<bool> = (0..60).map(|i| i % 7 == 0).collect();
    let l = LabelVolume::from_mask("p1", g, &mask).unwrap();
    let path = dir.path().join("l.nii.gz");
    write_label(&l, &path).unwrap();
    assert_eq!(read_label(&path).unwrap().mask(), mask);
}

#[test]
fn non_binary_label_rejected() {
    let g = Geometry::ras([1, 1, 3], [1.0; 3]);
    assert!(LabelVolume::new("x", g, vec![0, 1, 2]).is_err());
}

fn pyramid(c: usize, d: usize, g: usize, seed: f32) -> FeaturePyramid<f32> {
    let n = c * d * g * g;
    let levels = std::array::from_fn(|k| {
        Tensor::new(
            (0..n).map(|i| seed + (k * n + i) as f32 * 0.125).collect(),
            &[1, c, d, g, g],
        )
        .unwrap()
    });
    FeaturePyramid::new(levels, [d, 4 * g, 4 * g]).unwrap()
}

#[test]
fn feature_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.vxf");
    let pyr = pyramid(3, 2, 2, -1.0);
    write_feature_file(&pyr, "s1", "toy-vit test", &path).unwrap();
    let f = read_feature_file(&path).unwrap();
    assert_eq!(f.subject_id, "s1");
    assert_eq!(f.encoder_tag, "toy-vit test");
    assert_eq!(f.d_emb(), 3);
    let back: FeaturePyramid<f32> = f.to_pyramid([2, 8, 8]).unwrap();
    for k in 0..4 {
        assert_eq!(back.levels[k].data(), pyr.levels[k].data());
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], FEATURE_MAGIC);
    assert_eq!(f.checksum, fnv1a64(&bytes[..bytes.len() - 8]));
}

#[test]
fn feature_file_corruption_detected() {
    let bytes = FeatureFile::from_pyramid(&pyramid(2, 1, 2, 0.0), "s", "t").encode();
    let p = Path::new("s.vxf");

    let mut flipped = bytes.clone();
    flipped[20] ^= 0x01;
    assert!(matches!(FeatureFile::decode(&flipped, p), Err(Error::Checksum { .. })));

    let mut magic = bytes.clone();
    magic[0] = b'Z';
    assert!(matches!(FeatureFile::decode(&magic, p), Err(Error::BadMagic { .. })));

    assert!(FeatureFile::decode(&bytes[..bytes.len() - 3], p).is_err());

    // rewrite with three levels and a valid checksum
    let mut f = FeatureFile::decode(&bytes, p).unwrap();
    f.levels.pop();
    let three = f.encode();
    assert!(matches!(
        FeatureFile::decode(&three, p),
        Err(Error::LevelCount {
            expected: 4,
            found: 3,
            ..
        })
    ));
}

proptest! {
    #[test]
    fn feature_bytes_round_trip(c in 1usize..4, d in 1usize..4, g in 1usize..4, seed in -5.0f32..5.0, tag in "[a-z ]{0,12}") {
        let f = FeatureFile::from_pyramid(&pyramid(c, d, g, seed), "subj", &tag);
        let back = FeatureFile::decode(&f.encode(), Path::new("x")).unwrap();
        prop_assert_eq!(back, f);
    }
}

#[test]
fn report_round_trip_and_means() {
    let dir = tempfile::tempdir().unwrap();
    let a = SubjectMetrics::from_masks("a", &[true, true, false, false], &[true, false, false, false]).unwrap();
    let b = SubjectMetrics::from_masks("b", &[false; 4], &[false; 4]).unwrap();
    assert_eq!(a.dsc, 2.0 / 3.0);
    assert_eq!(a.iou, 0.5);
    assert_eq!(a.vol_error_pct, Some(100.0));
    assert_eq!((b.dsc, b.iou, b.vol_error_pct), (1.0, 1.0, None));
    let r = EvalReport::new("multi-scale+depth", vec![a, b]).unwrap();
    assert_eq!(r.mean.dsc, (2.0 / 3.0 + 1.0) / 2.0);
    assert_eq!(r.mean.vol_error_pct, Some(100.0));
    let path = dir.path().join("report.json");
    write_report(&r, &path).unwrap();
    assert_eq!(read_report(&path).unwrap(), r);
}

#[test]
fn overlay_colours() {
    let g = Geometry::ras([1, 2, 2], [1.0; 3]);
    let v = Volume::new("s", g.clone(), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let pred = LabelVolume::new("s", g.clone(), vec![1, 0, 0, 0]).unwrap();
    let none = LabelVolume::new("s", g, vec![0; 4]).unwrap();
    let img = render_overlay(&v, &pred, &none, Plane::Axial, 0).unwrap();
    let [r, gr, b] = img.pixels[0];
    assert!(r > gr && r > b);
    assert_eq!(img.pixels[3], [255, 255, 255]);
    let ppm = img.to_ppm();
    assert!(ppm.starts_with(b"P6\n2 2\n255\n"));
    assert_eq!(ppm.len(), b"P6\n2 2\n255\n".len() + 12);
    assert!(render_overlay(&v, &pred, &none, Plane::Axial, 1).is_err());
}

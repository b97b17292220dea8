//! Volume standardization: RAS reorientation, resampling, intensity
//! normalization, foreground-centred cropping, and training augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Geometry, LabelVolume, Volume};
use crate::nn::resample_trilinear;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Voxel size in mm along (D, H, W); `None` picks the dataset's median
    /// in-plane spacing, isotropically.
    pub target_spacing: Option<[f64; 3]>,
    pub clip_percentiles: (f64, f64),
    pub crop_extent: [usize; 3],
    /// Foreground threshold on the `[0, 1]` image, before z-scoring.
    pub fg_threshold: f64,
    pub augment: bool,
    pub aug_flip_prob: f64,
    pub aug_rot90_prob: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing: None,
            clip_percentiles: (0.5, 99.5),
            crop_extent: [128; 3],
            fg_threshold: 0.05,
            augment: true,
            aug_flip_prob: 0.5,
            aug_rot90_prob: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clip_percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(Error::Config(format!(
                "clip percentiles ({lo}, {hi}) must satisfy 0 ≤ low < high ≤ 100"
            )));
        }
        if self.crop_extent.contains(&0) {
            return Err(Error::Config("crop extents must be positive".into()));
        }
        if let Some(s) = self.target_spacing {
            if s.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config(format!("target spacing {s:?} must be positive")));
            }
        }
        for p in [self.aug_flip_prob, self.aug_rot90_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augmentation probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// World axis index (R=0, A=1, S=2) each array axis should point along.
const RAS_TARGET: [usize; 3] = [2, 1, 0];

const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Axis permutation and flips taking `g` closest to the RAS frame: new axis
/// `n` is old axis `perm[n]`, reversed when `flip[n]`.
pub fn ras_transform(g: &Geometry) -> Result<([usize; 3], [bool; 3])> {
    g.validate()?;
    let score = |p: &[usize; 3]| (0..3).map(|n| g.direction[p[n]][RAS_TARGET[n]].abs()).sum::<f64>();
    let mut best = PERMUTATIONS[0];
    for p in &PERMUTATIONS[1..] {
        if score(p) > score(&best) + 1e-12 {
            best = *p;
        }
    }
    if (0..3).any(|n| g.direction[best[n]][RAS_TARGET[n]].abs() < 1e-6) {
        return Err(Error::Orientation(format!(
            "direction matrix {:?} is degenerate",
            g.direction
        )));
    }
    let flip = std::array::from_fn(|n| g.direction[best[n]][RAS_TARGET[n]] < 0.0);
    Ok((best, flip))
}

fn permute_flip<X: Copy>(g: &Geometry, data: &[X], perm: [usize; 3], flip: [bool; 3]) -> (Geometry, Vec<X>) {
    let old = g.extents;
    let ext: [usize; 3] = std::array::from_fn(|n| old[perm[n]]);
    let old_strides = [old[1] * old[2], old[2], 1];
    let mut out = Vec::with_capacity(data.len());
    for z in 0..ext[0] {
        for y in 0..ext[1] {
            for x in 0..ext[2] {
                let mut src = 0;
                for (n, i) in [z, y, x].into_iter().enumerate() {
                    let i = if flip[n] { ext[n] - 1 - i } else { i };
                    src += i * old_strides[perm[n]];
                }
                out.push(data[src]);
            }
        }
    }
    let mut origin = g.origin;
    for n in 0..3 {
        if flip[n] {
            let a = perm[n];
            for (o, d) in origin.iter_mut().zip(g.direction[a]) {
                *o += (old[a] - 1) as f64 * g.spacing[a] * d;
            }
        }
    }
    let geo = Geometry {
        extents: ext,
        spacing: std::array::from_fn(|n| g.spacing[perm[n]]),
        direction: std::array::from_fn(|n| {
            let s = if flip[n] { -1.0 } else { 1.0 };
            g.direction[perm[n]].map(|v| s * v)
        }),
        origin,
    };
    (geo, out)
}

pub fn reorient_ras(v: &Volume) -> Result<Volume> {
    let (perm, flip) = ras_transform(&v.geometry)?;
    let (geometry, data) = permute_flip(&v.geometry, &v.data, perm, flip);
    Volume::new(&v.subject_id, geometry, data)
}

pub fn reorient_label_ras(l: &LabelVolume) -> Result<LabelVolume> {
    let (perm, flip) = ras_transform(&l.geometry)?;
    let (geometry, data) = permute_flip(&l.geometry, &l.data, perm, flip);
    LabelVolume::new(&l.subject_id, geometry, data)
}

fn resampled_geometry(g: &Geometry, target: [f64; 3]) -> Geometry {
    let ext: [usize; 3] =
        std::array::from_fn(|a| ((g.extents[a] as f64 * g.spacing[a] / target[a]).round() as usize).max(1));
    let mut origin = g.origin;
    for a in 0..3 {
        // world position of the first output sample under align-corners-false
        let first = 0.5 * g.extents[a] as f64 / ext[a] as f64 - 0.5;
        for (o, d) in origin.iter_mut().zip(g.direction[a]) {
            *o += first * g.spacing[a] * d;
        }
    }
    Geometry {
        extents: ext,
        spacing: target,
        direction: g.direction,
        origin,
    }
}

/// Trilinear resampling to `target` spacing; extents become `round(n·sp/target)`.
pub fn resample(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    let geometry = resampled_geometry(&v.geometry, target);
    let data = resample_trilinear(&v.data, v.geometry.extents, geometry.extents);
    Volume::new(&v.subject_id, geometry, data)
}

fn nearest_index(i: usize, in_n: usize, out_n: usize) -> usize {
    (((i as f64 + 0.5) * in_n as f64 / out_n as f64) as usize).min(in_n - 1)
}

/// Nearest-neighbour resampling for label maps.
pub fn resample_label(l: &LabelVolume, target: [f64; 3]) -> Result<LabelVolume> {
    let geometry = resampled_geometry(&l.geometry, target);
    let (i, o) = (l.geometry.extents, geometry.extents);
    let mut data = Vec::with_capacity(geometry.voxel_count());
    for z in 0..o[0] {
        let sz = nearest_index(z, i[0], o[0]);
        for y in 0..o[1] {
            let sy = nearest_index(y, i[1], o[1]);
            for x in 0..o[2] {
                data.push(l.data[(sz * i[1] + sy) * i[2] + nearest_index(x, i[2], o[2])]);
            }
        }
    }
    LabelVolume::new(&l.subject_id, geometry, data)
}

/// Percentile `p ∈ [0, 100]` by linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Clip to the given percentiles and rescale to `[0, 1]`.
pub fn clip_minmax(data: &[f32], percentiles: (f64, f64)) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(Error::Normalize("empty volume".into()));
    }
    let mut sorted: Vec<f64> = data.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, percentiles.0);
    let hi = percentile(&sorted, percentiles.1);
    if !(hi > lo) {
        return Err(Error::Normalize(format!(
            "intensity range [{lo}, {hi}] is empty after clipping"
        )));
    }
    Ok(data
        .iter()
        .map(|&v| ((v as f64).clamp(lo, hi) - lo) / (hi - lo))
        .map(|v| v as f32)
        .collect())
}

/// Subtract the mean and divide by the (population) standard deviation.
pub fn zscore(data: &[f32]) -> Result<Vec<f32>> {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::Normalize("zero standard deviation".into()));
    }
    Ok(data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect())
}

/// Percentile clipping, min-max scaling and z-scoring.
pub fn normalize(v: &Volume, percentiles: (f64, f64)) -> Result<Volume> {
    let data = zscore(&clip_minmax(&v.data, percentiles)?)?;
    Volume::new(&v.subject_id, v.geometry.clone(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    /// Window origin; negative where the volume is zero-padded.
    pub start: [isize; 3],
    pub extent: [usize; 3],
    /// True when no voxel exceeded the threshold and the geometric centre was used.
    pub fallback: bool,
}

/// Mean voxel index of `mask`, or `None` when it is empty.
pub fn center_of_mass(mask: impl Iterator<Item = bool>, extents: [usize; 3]) -> Option<[f64; 3]> {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for (i, m) in mask.enumerate() {
        if m {
            let idx = [
                i / (extents[1] * extents[2]),
                i / extents[2] % extents[1],
                i % extents[2],
            ];
            for a in 0..3 {
                sum[a] += idx[a] as f64;
            }
            count += 1;
        }
    }
    (count > 0).then(|| sum.map(|s| s / count as f64))
}

/// Window of `crop` centred on the thresholded centre of mass of `unit`,
/// kept inside the volume where it fits.
pub fn crop_window(unit: &[f32], extents: [usize; 3], crop: [usize; 3], threshold: f64) -> CropWindow {
    let com = center_of_mass(unit.iter().map(|&v| v as f64 > threshold), extents);
    let start = std::array::from_fn(|a| {
        let (n, c) = (extents[a] as isize, crop[a] as isize);
        if n <= c {
            return -((c - n) / 2);
        }
        match com {
            Some(m) => (m[a].round() as isize - c / 2).clamp(0, n - c),
            None => (n - c) / 2,
        }
    });
    CropWindow {
        start,
        extent: crop,
        fallback: com.is_none(),
    }
}

fn extract<X: Copy + Default>(data: &[X], ext: [usize; 3], w: &CropWindow) -> Vec<X> {
    let c = w.extent;
    let mut out = vec![X::default(); c.iter().product()];
    for z in 0..c[0] {
        let sz = w.start[0] + z as isize;
        if sz < 0 || sz >= ext[0] as isize {
            continue;
        }
        for y in 0..c[1] {
            let sy = w.start[1] + y as isize;
            if sy < 0 || sy >= ext[1] as isize {
                continue;
            }
            for x in 0..c[2] {
                let sx = w.start[2] + x as isize;
                if sx >= 0 && sx < ext[2] as isize {
                    out[(z * c[1] + y) * c[2] + x] = data[(sz as usize * ext[1] + sy as usize) * ext[2] + sx as usize];
                }
            }
        }
    }
    out
}

fn cropped_geometry(g: &Geometry, w: &CropWindow) -> Geometry {
    let mut origin = g.origin;
    for a in 0..3 {
        for (o, d) in origin.iter_mut().zip(g.direction[a]) {
            *o += w.start[a] as f64 * g.spacing[a] * d;
        }
    }
    Geometry {
        extents: w.extent,
        spacing: g.spacing,
        direction: g.direction,
        origin,
    }
}

pub fn apply_crop(v: &Volume, w: &CropWindow) -> Result<Volume> {
    Volume::new(
        &v.subject_id,
        cropped_geometry(&v.geometry, w),
        extract(&v.data, v.extents(), w),
    )
}

pub fn apply_crop_label(l: &LabelVolume, w: &CropWindow) -> Result<LabelVolume> {
    LabelVolume::new(
        &l.subject_id,
        cropped_geometry(&l.geometry, w),
        extract(&l.data, l.extents(), w),
    )
}

/// Crop image and label with the window found on the `[0, 1]` image.
pub fn foreground_crop(
    v: &Volume,
    l: &LabelVolume,
    unit: &[f32],
    cfg: &PreprocessConfig,
) -> Result<(Volume, LabelVolume, CropWindow)> {
    if l.extents() != v.extents() {
        return Err(Error::shape("foreground_crop", &v.extents(), &l.extents()));
    }
    let w = crop_window(unit, v.extents(), cfg.crop_extent, cfg.fg_threshold);
    Ok((apply_crop(v, &w)?, apply_crop_label(l, &w)?, w))
}

/// Isotropic spacing at the median of all in-plane spacings.
pub fn median_inplane_spacing(geometries: &[Geometry]) -> Option<[f64; 3]> {
    let mut s: Vec<f64> = geometries.iter().flat_map(|g| [g.spacing[1], g.spacing[2]]).collect();
    if s.is_empty() {
        return None;
    }
    s.sort_by(f64::total_cmp);
    let m = percentile(&s, 50.0);
    Some([m; 3])
}

/// Outcome of the deterministic pipeline for one subject.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub image: Volume,
    pub label: Option<LabelVolume>,
    pub window: CropWindow,
}

/// Reorient, resample, normalize and crop. The label, when given, follows
/// the image geometry exactly.
pub fn standardize(
    image: &Volume,
    label: Option<&LabelVolume>,
    target: [f64; 3],
    cfg: &PreprocessConfig,
) -> Result<Standardized> {
    cfg.validate()?;
    let img = resample(&reorient_ras(image)?, target)?;
    let unit = clip_minmax(&img.data, cfg.clip_percentiles)?;
    let z = Volume::new(&img.subject_id, img.geometry.clone(), zscore(&unit)?)?;
    let window = crop_window(&unit, z.extents(), cfg.crop_extent, cfg.fg_threshold);
    let label = label
        .map(|l| -> Result<LabelVolume> {
            let l = resample_label(&reorient_label_ras(l)?, target)?;
            if l.extents() != z.extents() {
                return Err(Error::shape("standardize", &z.extents(), &l.extents()));
            }
            apply_crop_label(&l, &window)
        })
        .transpose()?;
    Ok(Standardized {
        image: apply_crop(&z, &window)?,
        label,
        window,
    })
}

/// A draw of flips and an in-plane quarter-turn rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentation {
    pub flips: [bool; 3],
    /// `(plane axes, quarter turns)`; planes with unequal extents are never rotated.
    pub rotation: Option<([usize; 2], u8)>,
}

const PLANES: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flips: [false; 3],
        rotation: None,
    };

    pub fn sample<R: Rng>(rng: &mut R, extents: [usize; 3], flip_prob: f64, rot_prob: f64) -> Self {
        let flips = std::array::from_fn(|_| rng.random::<f64>() < flip_prob);
        let rotation = if rng.random::<f64>() < rot_prob {
            let k = rng.random_range(1..=3u8);
            let plane = PLANES[rng.random_range(0..3)];
            (extents[plane[0]] == extents[plane[1]]).then_some((plane, k))
        } else {
            None
        };
        Augmentation { flips, rotation }
    }

    /// Where voxel `p` of an `extents` volume lands.
    pub fn map(&self, mut p: [usize; 3], extents: [usize; 3]) -> [usize; 3] {
        for a in 0..3 {
            if self.flips[a] {
                p[a] = extents[a] - 1 - p[a];
            }
        }
        if let Some(([a, b], k)) = self.rotation {
            for _ in 0..k {
                // one quarter turn: (i_a, i_b) -> (n_b - 1 - i_b, i_a)
                let (ia, ib) = (p[a], p[b]);
                p[a] = extents[b] - 1 - ib;
                p[b] = ia;
            }
        }
        p
    }

    pub fn apply<X: Copy + Default>(&self, data: &[X], extents: [usize; 3]) -> Vec<X> {
        if *self == Self::IDENTITY {
            return data.to_vec();
        }
        let mut out = vec![X::default(); data.len()];
        let mut i = 0;
        for z in 0..extents[0] {
            for y in 0..extents[1] {
                for x in 0..extents[2] {
                    let [nz, ny, nx] = self.map([z, y, x], extents);
                    out[(nz * extents[1] + ny) * extents[2] + nx] = data[i];
                    i += 1;
                }
            }
        }
        out
    }
}

/// Transform image and label identically.
pub fn augment<R: Rng>(
    v: &Volume,
    l: &LabelVolume,
    cfg: &PreprocessConfig,
    rng: &mut R,
) -> Result<(Volume, LabelVolume, Augmentation)> {
    if l.extents() != v.extents() {
        return Err(Error::shape("augment", &v.extents(), &l.extents()));
    }
    let aug = Augmentation::sample(rng, v.extents(), cfg.aug_flip_prob, cfg.aug_rot90_prob);
    let e = v.extents();
    Ok((
        Volume::new(&v.subject_id, v.geometry.clone(), aug.apply(&v.data, e))?,
        LabelVolume::new(&l.subject_id, l.geometry.clone(), aug.apply(&l.data, e))?,
        aug,
    ))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp(ext: [usize; 3]) -> Volume {
        let n = ext.iter().product::<usize>();
        Volume::new(
            "s",
            Geometry::ras(ext, [1.0, 1.0, 1.0]),
            (0..n).map(|v| v as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ras_volume_unchanged() {
        let v = ramp([2, 3, 4]);
        assert_eq!(reorient_ras(&v).unwrap(), v);
    }

    #[test]
    fn flipped_axis_is_reversed() {
        let mut v = ramp([1, 1, 3]);
        v.geometry.direction[2] = [-1.0, 0.0, 0.0];
        let r = reorient_ras(&v).unwrap();
        assert_eq!(r.data, vec![2.0, 1.0, 0.0]);
        assert_eq!(r.geometry.direction[2], [1.0, 0.0, 0.0]);
        assert_eq!(r.geometry.origin, [-2.0, 0.0, 0.0]);
        assert_eq!(reorient_ras(&r).unwrap(), r);
    }

    #[test]
    fn percentile_interpolates() {
        let s: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile(&s, 0.5), 0.5);
        assert_eq!(percentile(&s, 100.0), 100.0);
        assert_eq!(percentile(&[1.0, 3.0], 50.0), 2.0);
    }

    #[test]
    fn minmax_of_linear_values() {
        let data: Vec<f32> = (0..=100).map(|v| v as f32).collect();
        let u = clip_minmax(&data, (0.0, 100.0)).unwrap();
        for (a, b) in u.iter().zip(&data) {
            assert!((a - b / 100.0).abs() < 1e-7);
        }
        assert!(clip_minmax(&[2.0; 5], (0.0, 100.0)).is_err());
    }

    #[test]
    fn crop_identity_and_corner() {
        let unit = vec![0.5f32; 64];
        let w = crop_window(&unit, [4, 4, 4], [4, 4, 4], 0.05);
        assert_eq!(w.start, [0, 0, 0]);
        let mut corner = vec![0.0f32; 1000];
        corner[0] = 1.0;
        let w = crop_window(&corner, [10, 10, 10], [4, 4, 4], 0.05);
        assert_eq!(w.start, [0, 0, 0]);
        assert!(!w.fallback);
        let w = crop_window(&vec![0.0; 1000], [10, 10, 10], [4, 4, 4], 0.05);
        assert!(w.fallback);
        assert_eq!(w.start, [3, 3, 3]);
    }

    #[test]
    fn small_volume_is_padded() {
        let v = ramp([2, 2, 2]);
        let w = crop_window(&[1.0; 8], [2, 2, 2], [4, 4, 4], 0.05);
        assert_eq!(w.start, [-1, -1, -1]);
        let c = apply_crop(&v, &w).unwrap();
        assert_eq!(c.extents(), [4, 4, 4]);
        assert_eq!(c.data[(4 + 1) * 4 + 1], 0.0);
        assert_eq!(c.data[((2 * 4) + 2) * 4 + 2], 7.0);
        assert_eq!(c.data.iter().filter(|&&x| x != 0.0).count(), 7);
    }

    #[test]
    fn four_quarter_turns_identity() {
        let v = ramp([3, 3, 2]);
        let mut data = v.data.clone();
        let aug = Augmentation {
            flips: [false; 3],
            rotation: Some(([0, 1], 1)),
        };
        for _ in 0..4 {
            data = aug.apply(&data, v.extents());
        }
        assert_eq!(data, v.data);
    }

    #[test]
    fn zero_probabilities_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(
                Augmentation::sample(&mut rng, [4, 4, 4], 0.0, 0.0),
                Augmentation::IDENTITY
            );
        }
    }
}

//! Binary PPM overlays: grayscale slice, predicted mask tinted red, ground
//! truth outlined in green.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::volume::{LabelVolume, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    /// Fixed depth; rows are height, columns width.
    Axial,
    /// Fixed height; rows are depth (superior at the top), columns width.
    Coronal,
    /// Fixed width; rows are depth (superior at the top), columns height.
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// Volume axis held fixed by this plane.
    pub fn fixed_axis(self) -> usize {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        }
    }

    /// `(rows, cols)` of the image for a `(D, H, W)` volume.
    pub fn image_extents(self, e: [usize; 3]) -> (usize, usize) {
        match self {
            Plane::Axial => (e[1], e[2]),
            Plane::Coronal => (e[0], e[2]),
            Plane::Sagittal => (e[0], e[1]),
        }
    }

    fn voxel(self, e: [usize; 3], index: usize, r: usize, c: usize) -> usize {
        let [z, y, x] = match self {
            Plane::Axial => [index, r, c],
            Plane::Coronal => [e[0] - 1 - r, index, c],
            Plane::Sagittal => [e[0] - 1 - r, c, index],
        };
        (z * e[1] + y) * e[2] + x
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

/// An RGB image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Rgb {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

pub fn render_overlay(
    volume: &Volume,
    pred: &LabelVolume,
    gt: &LabelVolume,
    plane: Plane,
    index: usize,
) -> Result<Rgb> {
    let e = volume.extents();
    if pred.extents() != e || gt.extents() != e {
        return Err(Error::shape("overlay", &pred.extents(), &e));
    }
    let axis = plane.fixed_axis();
    if index >= e[axis] {
        return Err(Error::OutOfBounds {
            dim: axis,
            offset: index,
            extent: 1,
            size: e[axis],
        });
    }
    let (rows, cols) = plane.image_extents(e);
    let at = |r: usize, c: usize| plane.voxel(e, index, r, c);
    let (lo, hi) = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| volume.data[at(r, c)])
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gt_at = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols && gt.data[at(r as usize, c as usize)] == 1
    };
    let mut pixels = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let g = (((volume.data[at(r, c)] - lo) / span) * 255.0).round() as u8;
            let mut px = [g, g, g];
            if pred.data[at(r, c)] == 1 {
                px = [((g as u16 + 255) / 2) as u8, g / 2, g / 2];
            }
            let (ri, ci) = (r as isize, c as isize);
            let edge = gt_at(ri, ci)
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|(dr, dc)| !gt_at(ri + dr, ci + dc));
            if edge {
                px = [0, 255, 0];
            }
            pixels.push(px);
        }
    }
    Ok(Rgb {
        width: cols,
        height: rows,
        pixels,
    })
}

pub fn write_overlay(
    volume: &Volume,
    pred: &LabelVolume,
    gt: &LabelVolume,
    plane: Plane,
    index: usize,
    path: &Path,
) -> Result<()> {
    fs::write(path, render_overlay(volume, pred, gt, plane, index)?.to_ppm())?;
    Ok(())
}

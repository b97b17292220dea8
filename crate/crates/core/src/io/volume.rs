use crate::error::{Error, Result};

/// Spatial frame of a `(D, H, W)` voxel grid.
///
/// `direction[a]` is the world (RAS+) unit vector of array axis `a`, and
/// `spacing[a]` the voxel size along it in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub direction: [[f64; 3]; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    /// RAS-aligned grid: depth along +S, height along +A, width along +R.
    pub fn ras(extents: [usize; 3], spacing: [f64; 3]) -> Self {
        Geometry {
            extents,
            spacing,
            direction: [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]],
            origin: [0.0; 3],
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn determinant(&self) -> f64 {
        let [a, b, c] = self.direction;
        a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.contains(&0) {
            return Err(Error::Orientation(format!(
                "extents {:?} must be positive",
                self.extents
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Orientation(format!(
                "spacing {:?} must be positive",
                self.spacing
            )));
        }
        let det = self.determinant();
        if (det.abs() - 1.0).abs() > 1e-3 {
            return Err(Error::Orientation(format!(
                "direction matrix has determinant {det:.6}, expected ±1"
            )));
        }
        Ok(())
    }

    /// World position of voxel `(z, y, x)`.
    pub fn world(&self, idx: [f64; 3]) -> [f64; 3] {
        let mut p = self.origin;
        for a in 0..3 {
            for (pc, dc) in p.iter_mut().zip(self.direction[a]) {
                *pc += idx[a] * self.spacing[a] * dc;
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub subject_id: String,
    pub geometry: Geometry,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(subject_id: &str, geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.voxel_count() {
            return Err(Error::shape("volume", &[data.len()], &geometry.extents));
        }
        Ok(Volume {
            subject_id: subject_id.to_string(),
            geometry,
            data,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.geometry.extents
    }
}

/// Binary mask; every voxel is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub subject_id: String,
    pub geometry: Geometry,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(subject_id: &str, geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.voxel_count() {
            return Err(Error::shape("label_volume", &[data.len()], &geometry.extents));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid("label_volume", format!("label value {v} is not binary")));
        }
        Ok(LabelVolume {
            subject_id: subject_id.to_string(),
            geometry,
            data,
        })
    }

    pub fn from_mask(subject_id: &str, geometry: Geometry, mask: &[bool]) -> Result<Self> {
        Self::new(subject_id, geometry, mask.iter().map(|&b| b as u8).collect())
    }

    /// Interpret scalar voxels as a label map; anything other than 0 or 1 is rejected.
    pub fn from_volume(v: Volume) -> Result<Self> {
        if let Some(x) = v.data.iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(Error::invalid(
                "label_volume",
                format!("subject '{}' has non-binary label value {x}", v.subject_id),
            ));
        }
        let data = v.data.iter().map(|&x| x as u8).collect();
        Ok(LabelVolume {
            subject_id: v.subject_id,
            geometry: v.geometry,
            data,
        })
    }

    pub fn mask(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v == 1).collect()
    }

    pub fn extents(&self) -> [usize; 3] {
        self.geometry.extents
    }
}

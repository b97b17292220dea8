//! Non-overlapping sub-cube tiling of a volume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    volume_extents: [usize; 3],
    cube_extents: [usize; 3],
    offsets: Vec<[usize; 3]>,
}

const AXES: [&str; 3] = ["depth", "height", "width"];

impl Partition {
    /// Tile `volume_extents` with cubes of `cube_extents`; offsets are in
    /// lexicographic `(z, y, x)` order.
    pub fn new(volume_extents: [usize; 3], cube_extents: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if volume_extents[a] == 0 || cube_extents[a] == 0 {
                return Err(Error::Partition(format!("{} extent must be positive", AXES[a])));
            }
            if !volume_extents[a].is_multiple_of(cube_extents[a]) {
                return Err(Error::Partition(format!(
                    "{} axis: volume extent {} is not divisible by cube extent {}",
                    AXES[a], volume_extents[a], cube_extents[a]
                )));
            }
        }
        let counts: Vec<usize> = (0..3).map(|a| volume_extents[a] / cube_extents[a]).collect();
        let mut offsets = Vec::with_capacity(counts.iter().product());
        for z in 0..counts[0] {
            for y in 0..counts[1] {
                for x in 0..counts[2] {
                    offsets.push([z * cube_extents[0], y * cube_extents[1], x * cube_extents[2]]);
                }
            }
        }
        Ok(Partition {
            volume_extents,
            cube_extents,
            offsets,
        })
    }

    /// Single cube covering the whole volume.
    pub fn trivial(volume_extents: [usize; 3]) -> Self {
        Self::new(volume_extents, volume_extents).expect("whole volume always tiles itself")
    }

    /// Split a cubic volume into `cubes` equal cubes (1, 8, 27, ...).
    pub fn from_cube_count(volume_extents: [usize; 3], cubes: usize) -> Result<Self> {
        let per_axis = (cubes as f64).cbrt().round() as usize;
        if per_axis == 0 || per_axis.pow(3) != cubes {
            return Err(Error::Partition(format!("cube count {cubes} is not a perfect cube")));
        }
        let mut cube = [0; 3];
        for a in 0..3 {
            if !volume_extents[a].is_multiple_of(per_axis) {
                return Err(Error::Partition(format!(
                    "{} axis: extent {} cannot be split into {per_axis} cubes",
                    AXES[a], volume_extents[a]
                )));
            }
            cube[a] = volume_extents[a] / per_axis;
        }
        Self::new(volume_extents, cube)
    }

    pub fn volume_extents(&self) -> [usize; 3] {
        self.volume_extents
    }

    pub fn cube_extents(&self) -> [usize; 3] {
        self.cube_extents
    }

    pub fn offsets(&self) -> &[[usize; 3]] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_cubes_of_64() {
        let p = Partition::new([128; 3], [64; 3]).unwrap();
        assert_eq!(p.len(), 8);
    }

    #[test]
    fn single_cube_of_128() {
        let p = Partition::new([128; 3], [128; 3]).unwrap();
        assert_eq!(p.offsets(), &[[0, 0, 0]]);
    }

    #[test]
    fn offsets_are_lexicographic() {
        let p = Partition::new([16; 3], [8; 3]).unwrap();
        assert_eq!(p.len(), 8);
        assert_eq!(p.offsets()[0], [0, 0, 0]);
        assert_eq!(p.offsets()[1], [0, 0, 8]);
        assert_eq!(p.offsets()[7], [8, 8, 8]);
    }

    #[test]
    fn non_divisible_names_axis() {
        let err = Partition::new([16, 15, 16], [8; 3]).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn cube_count() {
        assert_eq!(Partition::from_cube_count([128; 3], 8).unwrap().cube_extents(), [64; 3]);
        assert_eq!(Partition::from_cube_count([128; 3], 1).unwrap().len(), 1);
        assert!(Partition::from_cube_count([128; 3], 4).is_err());
    }
}

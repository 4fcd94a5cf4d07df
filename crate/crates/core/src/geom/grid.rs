use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sentinel label for unoccupied voxels.
pub const FREE: u8 = 255;

pub const VOX_MAGIC: &[u8; 16] = b"DEGO-VOX1\0\0\0\0\0\0\0";

const EXTENT_TOLERANCE: f64 = 1e-9;

/// Axis-aligned voxel discretization. Voxels are stored x-major, then y, then z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub min_corner: [f64; 3],
    pub max_corner: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

pub fn make_grid_spec(
    min_corner: [f64; 3],
    max_corner: [f64; 3],
    voxel_size: f64,
) -> Result<VoxelGridSpec> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::NonPositiveSize(format!("voxel_size = {voxel_size}")));
    }
    let mut dims = [0usize; 3];
    for axis in 0..3 {
        let extent = max_corner[axis] - min_corner[axis];
        if !(extent > 0.0) {
            return Err(Error::NonPositiveSize(format!(
                "extent {extent} on axis {axis}"
            )));
        }
        let cells = (extent / voxel_size).round();
        if cells < 1.0 || (extent - cells * voxel_size).abs() > EXTENT_TOLERANCE {
            return Err(Error::NonDivisibleExtent {
                axis,
                extent,
                voxel_size,
            });
        }
        dims[axis] = cells as usize;
    }
    Ok(VoxelGridSpec {
        min_corner,
        max_corner,
        voxel_size,
        dims,
    })
}

impl VoxelGridSpec {
    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn linear_index(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn unravel(&self, linear: usize) -> [usize; 3] {
        let z = linear % self.dims[2];
        let y = (linear / self.dims[2]) % self.dims[1];
        let x = linear / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|k| self.min_corner[k] + (idx[k] as f64 + 0.5) * self.voxel_size)
    }

    /// Index of the voxel containing `point`; points on the max faces are outside.
    pub fn world_to_voxel(&self, point: [f64; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let p = point[k];
            if !(p >= self.min_corner[k] && p < self.max_corner[k]) {
                return None;
            }
            let cell = ((p - self.min_corner[k]) / self.voxel_size).floor() as usize;
            idx[k] = cell.min(self.dims[k] - 1);
        }
        Some(idx)
    }

    pub fn contains(&self, point: [f64; 3]) -> bool {
        self.world_to_voxel(point).is_some()
    }

    pub fn same_layout(&self, other: &VoxelGridSpec) -> bool {
        self.dims == other.dims
            && (0..3).all(|k| {
                (self.min_corner[k] - other.min_corner[k]).abs() <= EXTENT_TOLERANCE
                    && (self.max_corner[k] - other.max_corner[k]).abs() <= EXTENT_TOLERANCE
            })
            && (self.voxel_size - other.voxel_size).abs() <= EXTENT_TOLERANCE
    }

    pub(crate) fn ensure_same(&self, other: &VoxelGridSpec) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::SpecMismatch(format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }
}

/// Latent voxel feature field plus the accumulated splat weight per voxel.
#[derive(Clone, Debug)]
pub struct FeatureVolume {
    pub spec: VoxelGridSpec,
    pub channels: usize,
    /// `num_voxels * channels`, voxel-major.
    pub data: Vec<f64>,
    pub weight: Vec<f64>,
}

impl FeatureVolume {
    pub fn zeros(spec: VoxelGridSpec, channels: usize) -> Self {
        let n = spec.num_voxels();
        FeatureVolume {
            spec,
            channels,
            data: vec![0.0; n * channels],
            weight: vec![0.0; n],
        }
    }

    pub fn feature(&self, voxel: usize) -> &[f64] {
        &self.data[voxel * self.channels..(voxel + 1) * self.channels]
    }
}

/// Per-voxel class ids with [`FREE`] marking empty space.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticLabelGrid {
    pub spec: VoxelGridSpec,
    pub labels: Vec<u8>,
}

impl SemanticLabelGrid {
    pub fn free(spec: VoxelGridSpec) -> Self {
        let n = spec.num_voxels();
        SemanticLabelGrid {
            spec,
            labels: vec![FREE; n],
        }
    }

    pub fn get(&self, idx: [usize; 3]) -> u8 {
        self.labels[self.spec.linear_index(idx)]
    }

    pub fn set(&mut self, idx: [usize; 3], label: u8) {
        let i = self.spec.linear_index(idx);
        self.labels[i] = label;
    }

    pub fn is_occupied(&self, idx: [usize; 3]) -> bool {
        self.get(idx) != FREE
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.labels.len() != self.spec.num_voxels() {
            return Err(Error::shape(
                "label grid",
                self.spec.num_voxels(),
                self.labels.len(),
            ));
        }
        match self
            .labels
            .iter()
            .find(|&&l| l != FREE && l as usize >= num_classes)
        {
            Some(l) => Err(Error::Invalid(format!(
                "label {l} outside 0..{num_classes}"
            ))),
            None => Ok(()),
        }
    }

    pub fn write_vox<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(VOX_MAGIC)?;
        for d in self.spec.dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        out.write_all(&self.labels)
    }

    /// Reads a DEGO-VOX1 stream; the header dims must match `spec`.
    pub fn read_vox<R: Read>(spec: VoxelGridSpec, input: R) -> Result<Self> {
        let (dims, labels) = read_vox_raw(input)?;
        if dims != spec.dims {
            return Err(Error::SpecMismatch(format!(
                "file dims {:?}, expected {:?}",
                dims, spec.dims
            )));
        }
        Ok(SemanticLabelGrid { spec, labels })
    }
}

pub fn read_vox_raw<R: Read>(mut input: R) -> Result<([usize; 3], Vec<u8>)> {
    let mut magic = [0u8; 16];
    read_exact_or_truncated(&mut input, &mut magic, "voxel header")?;
    if &magic != VOX_MAGIC {
        return Err(Error::BadMagic("voxel grid".into()));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        read_exact_or_truncated(&mut input, &mut b, "voxel dims")?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let mut labels = vec![0u8; dims.iter().product()];
    read_exact_or_truncated(&mut input, &mut labels, "voxel labels")?;
    Ok((dims, labels))
}

pub(crate) fn read_exact_or_truncated<R: Read>(
    input: &mut R,
    buf: &mut [u8],
    what: &str,
) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::TruncatedFile(what.to_string()),
        _ => Error::io(what, e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn occ3d() -> VoxelGridSpec {
        make_grid_spec([-40.0, -40.0, -1.0], [40.0, 40.0, 5.4], 0.4).unwrap()
    }

    #[test]
    fn grid_spec_examples() {
        assert_eq!(occ3d().dims, [200, 200, 16]);
        let unit = make_grid_spec([0.0; 3], [1.0; 3], 1.0).unwrap();
        assert_eq!(unit.dims, [1, 1, 1]);
        assert!(matches!(
            make_grid_spec([0.0; 3], [1.0; 3], 0.3),
            Err(Error::NonDivisibleExtent { .. })
        ));
        assert!(matches!(
            make_grid_spec([0.0; 3], [1.0; 3], 0.0),
            Err(Error::NonPositiveSize(_))
        ));
        assert!(matches!(
            make_grid_spec([0.0; 3], [1.0, -1.0, 1.0], 0.5),
            Err(Error::NonPositiveSize(_))
        ));
    }

    #[test]
    fn world_to_voxel_examples() {
        let spec = occ3d();
        assert_eq!(spec.world_to_voxel([-40.0, -40.0, -1.0]), Some([0, 0, 0]));
        assert_eq!(spec.world_to_voxel([0.0, 0.0, 0.0]), Some([100, 100, 2]));
        assert_eq!(spec.world_to_voxel([40.0, 0.0, 0.0]), None);
        assert_eq!(spec.world_to_voxel([0.0, 0.0, -1.01]), None);
    }

    #[test]
    fn voxel_center_round_trips_every_index() {
        let spec = make_grid_spec([-3.0, -2.0, -1.0], [3.0, 2.0, 1.4], 0.4).unwrap();
        for linear in 0..spec.num_voxels() {
            let idx = spec.unravel(linear);
            assert_eq!(spec.linear_index(idx), linear);
            assert_eq!(spec.world_to_voxel(spec.voxel_center(idx)), Some(idx));
        }
        let spec = occ3d();
        for x in (0..200).step_by(7) {
            for y in (0..200).step_by(13) {
                for z in 0..16 {
                    let idx = [x, y, z];
                    assert_eq!(spec.world_to_voxel(spec.voxel_center(idx)), Some(idx));
                }
            }
        }
    }

    #[test]
    fn vox_round_trip_and_errors() {
        let spec = make_grid_spec([0.0; 3], [2.0, 1.0, 1.5], 0.5).unwrap();
        let mut grid = SemanticLabelGrid::free(spec.clone());
        grid.set([1, 0, 2], 4);
        grid.set([3, 1, 0], 0);
        let mut bytes = Vec::new();
        grid.write_vox(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 16 + 12 + spec.num_voxels());
        assert_eq!(&bytes[16..20], &4u32.to_le_bytes());
        let back = SemanticLabelGrid::read_vox(spec.clone(), bytes.as_slice()).unwrap();
        assert_eq!(back, grid);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            SemanticLabelGrid::read_vox(spec.clone(), bad.as_slice()),
            Err(Error::BadMagic(_))
        ));
        assert!(matches!(
            SemanticLabelGrid::read_vox(spec, &bytes[..bytes.len() - 1]),
            Err(Error::TruncatedFile(_))
        ));
    }

    #[test]
    fn label_validation() {
        let spec = make_grid_spec([0.0; 3], [1.0; 3], 0.5).unwrap();
        let mut grid = SemanticLabelGrid::free(spec);
        assert!(grid.validate(15).is_ok());
        grid.labels[0] = 14;
        assert!(grid.validate(15).is_ok());
        grid.labels[1] = 15;
        assert!(grid.validate(15).is_err());
    }
}

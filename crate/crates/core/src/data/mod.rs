//! CT volumes, masks, Hounsfield normalisation and slice labelling, plus
//! patch extraction, phantom generation and the on-disk formats.

mod io;
mod patches;
mod phantom;

use serde::{Deserialize, Serialize};

pub use io::{
    export_png, read_mask, read_patches, read_volume, write_mask, write_patch_manifest, write_patches, write_volume,
};
pub use patches::{
    extract_test_patches, extract_train_patches, fit_slice, resize_bilinear, resize_nearest, stitch, ExtractConfig, PatchOrigin, PatchSample,
    SizePolicy, TestPatch,
};
pub use phantom::{make_phantom, Phantom, PhantomConfig};

use crate::error::{Error, Result};

/// Lower and upper bounds of the Hounsfield window.
pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 3071.0;

/// A stack of axial slices, `dims = (slices, height, width)`, stored slice
/// major. Values are Hounsfield units or, after [`normalize_hu`], [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: Option<[f32; 3]>,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        check_dims(dims, voxels.len())?;
        Ok(Volume { dims, spacing: None, voxels })
    }

    pub fn slices(&self) -> usize {
        self.dims[0]
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        let plane = self.dims[1] * self.dims[2];
        &self.voxels[i * plane..(i + 1) * plane]
    }
}

/// Binary annotation paired with a [`Volume`]; 1 marks infection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVolume {
    pub dims: [usize; 3],
    pub voxels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: [usize; 3], voxels: Vec<u8>) -> Result<Self> {
        check_dims(dims, voxels.len())?;
        if let Some(v) = voxels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!("mask voxel value {v} is not binary")));
        }
        Ok(MaskVolume { dims, voxels })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        MaskVolume { dims, voxels: vec![0; dims.iter().product()] }
    }

    pub fn slice(&self, i: usize) -> &[u8] {
        let plane = self.dims[1] * self.dims[2];
        &self.voxels[i * plane..(i + 1) * plane]
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().map(|&v| v as usize).sum()
    }
}

fn check_dims(dims: [usize; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::shape(format!("volume dims {dims:?} must be positive")));
    }
    if dims.iter().product::<usize>() != len {
        return Err(Error::shape(format!("volume dims {dims:?} do not match {len} voxels")));
    }
    Ok(())
}

/// Clamps to the Hounsfield window and maps it linearly onto [0, 1].
pub fn normalize_hu_value(hu: f32) -> f32 {
    (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

pub fn normalize_hu(raw: &Volume) -> Volume {
    Volume { dims: raw.dims, spacing: raw.spacing, voxels: raw.voxels.iter().map(|&v| normalize_hu_value(v)).collect() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SliceLabel {
    Infected,
    NonInfected,
}

impl SliceLabel {
    pub fn of_mask(mask: &[u8]) -> Self {
        if mask.iter().any(|&v| v != 0) {
            SliceLabel::Infected
        } else {
            SliceLabel::NonInfected
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SliceLabel::Infected => "INFECTED",
            SliceLabel::NonInfected => "NON_INFECTED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "INFECTED" => Some(SliceLabel::Infected),
            "NON_INFECTED" => Some(SliceLabel::NonInfected),
            _ => None,
        }
    }
}

/// Per-slice infection labels of a mask volume.
pub fn label_slices(mask: &MaskVolume) -> Vec<SliceLabel> {
    (0..mask.dims[0]).map(|i| SliceLabel::of_mask(mask.slice(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hu_window_end_points() {
        assert_eq!(normalize_hu_value(-1024.0), 0.0);
        assert_eq!(normalize_hu_value(3071.0), 1.0);
        assert!((normalize_hu_value(1023.5) - 0.5).abs() < 1e-7);
        assert_eq!(normalize_hu_value(-5000.0), 0.0);
        assert_eq!(normalize_hu_value(9000.0), 1.0);
    }

    #[test]
    fn slice_labels() {
        let mut voxels = vec![0u8; 2 * 4 * 4];
        voxels[16 + 5] = 1;
        let mask = MaskVolume::new([2, 4, 4], voxels).unwrap();
        assert_eq!(label_slices(&mask), [SliceLabel::NonInfected, SliceLabel::Infected]);
    }

    #[test]
    fn volumes_validate_dims() {
        assert!(Volume::new([1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Volume::new([0, 2, 2], vec![]).is_err());
        assert!(MaskVolume::new([1, 1, 2], vec![0, 2]).is_err());
    }
}

//! Volume (`CTV1`), mask (`MSK1`) and patch store (`PCH1`) files, the patch
//! manifest CSV and grayscale PNG export.

use std::io::{Read, Write};
use std::path::Path;

use image::{GrayImage, Luma};

use super::{MaskVolume, PatchOrigin, PatchSample, SliceLabel, Volume};
use crate::binio::{len_u32, Reader, Writer};
use crate::error::{Error, Result};

const VOLUME_MAGIC: &[u8; 4] = b"CTV1";
const MASK_MAGIC: &[u8; 4] = b"MSK1";
const PATCH_MAGIC: &[u8; 4] = b"PCH1";

fn write_dims<W: Write>(w: &mut Writer<W>, dims: [usize; 3]) -> Result<()> {
    for d in dims {
        w.u32(len_u32(d, "volume extent")?)?;
    }
    Ok(())
}

fn read_dims<R: Read>(r: &mut Reader<R>) -> Result<[usize; 3]> {
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    if dims.contains(&0) || dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).is_none_or(|n| n > 1 << 31) {
        return Err(r.fail(format!("implausible volume dims {dims:?}")));
    }
    Ok(dims)
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    let mut w = Writer::create(path)?;
    w.bytes(VOLUME_MAGIC)?;
    write_dims(&mut w, volume.dims)?;
    w.f32s(volume.voxels.iter().copied())?;
    w.finish().map(drop)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut r = Reader::open(path)?;
    r.magic(VOLUME_MAGIC)?;
    let dims = read_dims(&mut r)?;
    let voxels = r.f32s(dims.iter().product())?;
    r.finish()?;
    Volume::new(dims, voxels)
}

pub fn write_mask(path: &Path, mask: &MaskVolume) -> Result<()> {
    let mut w = Writer::create(path)?;
    w.bytes(MASK_MAGIC)?;
    write_dims(&mut w, mask.dims)?;
    w.bytes(&mask.voxels)?;
    w.finish().map(drop)
}

pub fn read_mask(path: &Path) -> Result<MaskVolume> {
    let mut r = Reader::open(path)?;
    r.magic(MASK_MAGIC)?;
    let dims = read_dims(&mut r)?;
    let voxels = r.bytes(dims.iter().product())?;
    r.finish()?;
    MaskVolume::new(dims, voxels).map_err(|e| Error::format(path, e.to_string()))
}

fn label_code(label: SliceLabel) -> u8 {
    match label {
        SliceLabel::NonInfected => 0,
        SliceLabel::Infected => 1,
    }
}

pub fn write_patches(path: &Path, patches: &[PatchSample]) -> Result<()> {
    let size = patches.first().map_or(0, |p| p.size);
    if patches.iter().any(|p| p.size != size) {
        return Err(Error::InvalidInput("patch store needs a uniform patch size".into()));
    }
    let mut w = Writer::create(path)?;
    w.bytes(PATCH_MAGIC)?;
    w.u32(len_u32(patches.len(), "patch count")?)?;
    w.u32(len_u32(size, "patch size")?)?;
    for p in patches {
        w.u32(len_u32(p.origin.patient.len(), "patient id length")?)?;
        w.bytes(p.origin.patient.as_bytes())?;
        for v in [p.origin.slice, p.origin.row, p.origin.col] {
            w.u32(len_u32(v, "patch origin")?)?;
        }
        w.bytes(&[label_code(p.origin.slice_label)])?;
        w.f32s(p.image.iter().copied())?;
        w.bytes(&p.mask)?;
    }
    w.finish().map(drop)
}

pub fn read_patches(path: &Path) -> Result<Vec<PatchSample>> {
    let mut r = Reader::open(path)?;
    r.magic(PATCH_MAGIC)?;
    let count = r.u32()? as usize;
    let size = r.u32()? as usize;
    if size > 4096 {
        return Err(r.fail(format!("implausible patch size {size}")));
    }
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        if len > 1024 {
            return Err(r.fail(format!("implausible patient id length {len}")));
        }
        let patient = String::from_utf8(r.bytes(len)?).map_err(|_| r.fail("patient id is not UTF-8"))?;
        let (slice, row, col) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let slice_label = match r.bytes(1)?[0] {
            0 => SliceLabel::NonInfected,
            1 => SliceLabel::Infected,
            other => return Err(r.fail(format!("bad label code {other}"))),
        };
        let image = r.f32s(size * size)?;
        let mask = r.bytes(size * size)?;
        if mask.iter().any(|&m| m > 1) {
            return Err(r.fail("patch mask is not binary"));
        }
        out.push(PatchSample::new(size, image, mask, PatchOrigin { patient, slice, row, col, slice_label }));
    }
    r.finish()?;
    Ok(out)
}

/// CSV with one row per patch: patient, slice, label, slice label, offsets.
pub fn write_patch_manifest(path: &Path, patches: &[PatchSample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let wrap = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["index", "patient", "slice", "label", "slice_label", "row", "col", "roi_pixels"]).map_err(wrap)?;
    for (i, p) in patches.iter().enumerate() {
        let roi: usize = p.mask.iter().map(|&m| m as usize).sum();
        w.write_record([
            i.to_string(),
            p.origin.patient.clone(),
            p.origin.slice.to_string(),
            p.label.name().to_string(),
            p.origin.slice_label.name().to_string(),
            p.origin.row.to_string(),
            p.origin.col.to_string(),
            roi.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `[0, 1]` intensities as an 8-bit grayscale PNG.
pub fn export_png(path: &Path, data: &[f32], h: usize, w: usize) -> Result<()> {
    if data.len() != h * w {
        return Err(Error::shape(format!("{} values cannot form a {h}x{w} image", data.len())));
    }
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(data[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

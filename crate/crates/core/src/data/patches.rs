//! Training patch sampling and the non-overlapping test tiling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SliceLabel;
use crate::error::{Error, Result};

/// What to do with slices whose extents are not multiples of the patch size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizePolicy {
    #[default]
    Reject,
    /// Resize to the nearest multiple of the patch size (bilinear for images,
    /// nearest for masks).
    Resample,
}

impl SizePolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reject" => Ok(SizePolicy::Reject),
            "resample" => Ok(SizePolicy::Resample),
            _ => Err(Error::config(format!("unknown size policy `{s}` (expected reject or resample)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub patch_size: usize,
    /// Random boxes drawn over the infection of each infected slice.
    pub roi_boxes: usize,
    /// Whether infected slices also emit every border cell of the tiling grid.
    pub boundary_patches: bool,
    /// Random patches drawn from each non-infected slice.
    pub non_infected_patches: usize,
    pub size_policy: SizePolicy,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            patch_size: 128,
            roi_boxes: 20,
            boundary_patches: true,
            non_infected_patches: 12,
            size_policy: SizePolicy::Reject,
        }
    }
}

/// Where a patch came from. `slice_label` is the label of the whole source
/// slice; the patch's own label reflects its own mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub patient: String,
    pub slice: usize,
    pub row: usize,
    pub col: usize,
    pub slice_label: SliceLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub size: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    /// INFECTED iff this patch's mask has a positive pixel.
    pub label: SliceLabel,
    pub origin: PatchOrigin,
}

impl PatchSample {
    pub fn new(size: usize, image: Vec<f32>, mask: Vec<u8>, origin: PatchOrigin) -> Self {
        let label = SliceLabel::of_mask(&mask);
        PatchSample { size, image, mask, label, origin }
    }
}

pub(crate) fn crop<T: Copy>(src: &[T], width: usize, row: usize, col: usize, size: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(size * size);
    for r in row..row + size {
        out.extend_from_slice(&src[r * width + col..r * width + col + size]);
    }
    out
}

/// Brings a slice to extents that tile exactly by `patch`, per `policy`.
/// Returns the (possibly resampled) image, mask and new extents.
pub fn fit_slice(
    image: &[f32],
    mask: Option<&[u8]>,
    h: usize,
    w: usize,
    patch: usize,
    policy: SizePolicy,
) -> Result<(Vec<f32>, Option<Vec<u8>>, usize, usize)> {
    if patch == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    if h.is_multiple_of(patch) && w.is_multiple_of(patch) && h > 0 && w > 0 {
        return Ok((image.to_vec(), mask.map(<[u8]>::to_vec), h, w));
    }
    match policy {
        SizePolicy::Reject => Err(Error::shape(format!("slice {h}x{w} is not a multiple of the {patch} patch size"))),
        SizePolicy::Resample => {
            let snap = |n: usize| (((n as f64 / patch as f64).round() as usize).max(1)) * patch;
            let (nh, nw) = (snap(h), snap(w));
            Ok((resize_bilinear(image, h, w, nh, nw), mask.map(|m| resize_nearest(m, h, w, nh, nw)), nh, nw))
        }
    }
}

/// Pixel-centre aligned bilinear resize.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] as f64 * (1.0 - tx) + src[y0 * w + x1] as f64 * tx;
            let bottom = src[y1 * w + x0] as f64 * (1.0 - tx) + src[y1 * w + x1] as f64 * tx;
            out.push((top * (1.0 - ty) + bottom * ty) as f32);
        }
    }
    out
}

pub fn resize_nearest<T: Copy>(src: &[T], h: usize, w: usize, nh: usize, nw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let sy = ((y * h) / nh).min(h - 1);
        for x in 0..nw {
            out.push(src[sy * w + ((x * w) / nw).min(w - 1)]);
        }
    }
    out
}

/// Inclusive prefix sums with a zero border: `(h + 1) x (w + 1)`.
fn summed_area(mask: &[u8], h: usize, w: usize) -> Vec<u32> {
    let mut s = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += mask[y * w + x] as u32;
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[u32], w: usize, r: usize, c: usize, size: usize) -> u32 {
    let stride = w + 1;
    s[(r + size) * stride + c + size] + s[r * stride + c] - s[r * stride + c + size] - s[(r + size) * stride + c]
}

/// Training patches of one slice. Infected slices yield `roi_boxes` boxes,
/// drawn uniformly among the offsets whose box overlaps the infection, then
/// (optionally) every border cell of the non-overlapping grid. Non-infected
/// slices yield `non_infected_patches` uniformly placed patches.
#[allow(clippy::too_many_arguments)]
pub fn extract_train_patches(
    image: &[f32],
    mask: &[u8],
    h: usize,
    w: usize,
    patient: &str,
    slice: usize,
    cfg: &ExtractConfig,
    rng: &mut impl Rng,
) -> Result<Vec<PatchSample>> {
    if image.len() != h * w || mask.len() != h * w {
        return Err(Error::shape(format!("slice buffers do not match {h}x{w}")));
    }
    let (image, mask, h, w) = fit_slice(image, Some(mask), h, w, cfg.patch_size, cfg.size_policy)?;
    let mask = mask.expect("mask supplied");
    let p = cfg.patch_size;
    let slice_label = SliceLabel::of_mask(&mask);
    let make = |row: usize, col: usize| {
        let origin = PatchOrigin { patient: patient.to_string(), slice, row, col, slice_label };
        PatchSample::new(p, crop(&image, w, row, col, p), crop(&mask, w, row, col, p), origin)
    };
    let mut out = Vec::new();
    match slice_label {
        SliceLabel::Infected => {
            let sat = summed_area(&mask, h, w);
            let mut offsets = Vec::new();
            for r in 0..=h - p {
                for c in 0..=w - p {
                    if box_sum(&sat, w, r, c, p) > 0 {
                        offsets.push((r, c));
                    }
                }
            }
            for _ in 0..cfg.roi_boxes {
                let (r, c) = offsets[rng.random_range(0..offsets.len())];
                out.push(make(r, c));
            }
            if cfg.boundary_patches {
                let (gr, gc) = (h / p, w / p);
                for i in 0..gr {
                    for j in 0..gc {
                        if i == 0 || j == 0 || i == gr - 1 || j == gc - 1 {
                            out.push(make(i * p, j * p));
                        }
                    }
                }
            }
        }
        SliceLabel::NonInfected => {
            for _ in 0..cfg.non_infected_patches {
                out.push(make(rng.random_range(0..=h - p), rng.random_range(0..=w - p)));
            }
        }
    }
    Ok(out)
}

/// One cell of the non-overlapping test tiling.
#[derive(Clone, Debug, PartialEq)]
pub struct TestPatch<T> {
    pub row: usize,
    pub col: usize,
    pub data: Vec<T>,
}

/// Row-major tiling of an `h x w` slice into `size x size` cells.
pub fn extract_test_patches<T: Copy>(slice: &[T], h: usize, w: usize, size: usize) -> Result<Vec<TestPatch<T>>> {
    if size == 0 || h == 0 || w == 0 || !h.is_multiple_of(size) || !w.is_multiple_of(size) {
        return Err(Error::shape(format!("slice {h}x{w} does not tile into {size}x{size} patches")));
    }
    if slice.len() != h * w {
        return Err(Error::shape(format!("slice buffer of {} values does not match {h}x{w}", slice.len())));
    }
    let mut out = Vec::with_capacity((h / size) * (w / size));
    for row in (0..h).step_by(size) {
        for col in (0..w).step_by(size) {
            out.push(TestPatch { row, col, data: crop(slice, w, row, col, size) });
        }
    }
    Ok(out)
}

/// Inverse of [`extract_test_patches`].
pub fn stitch<T: Copy + Default>(patches: &[TestPatch<T>], h: usize, w: usize, size: usize) -> Result<Vec<T>> {
    let mut out = vec![T::default(); h * w];
    let mut covered = vec![false; h * w];
    for p in patches {
        if p.data.len() != size * size || p.row + size > h || p.col + size > w {
            return Err(Error::shape(format!("patch at ({}, {}) does not fit a {h}x{w} slice", p.row, p.col)));
        }
        for r in 0..size {
            let dst = (p.row + r) * w + p.col;
            out[dst..dst + size].copy_from_slice(&p.data[r * size..(r + 1) * size]);
            covered[dst..dst + size].iter_mut().for_each(|c| *c = true);
        }
    }
    if covered.iter().any(|&c| !c) {
        return Err(Error::shape("patches do not cover the slice"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SeedRng;
    use rand::SeedableRng;

    #[test]
    fn test_tiling_round_trip() {
        let slice: Vec<f32> = (0..512 * 512).map(|i| i as f32).collect();
        let patches = extract_test_patches(&slice, 512, 512, 128).unwrap();
        assert_eq!(patches.len(), 16);
        assert_eq!((patches[5].row, patches[5].col), (128, 128));
        assert_eq!((patches[7].row, patches[7].col), (128, 384));
        assert_eq!(stitch(&patches, 512, 512, 128).unwrap(), slice);
        assert!(extract_test_patches(&slice[..500 * 512], 500, 512, 128).is_err());
    }

    #[test]
    fn infected_slice_patch_budget() {
        let mut mask = vec![0u8; 512 * 512];
        mask[300 * 512 + 200] = 1;
        let image = vec![0.5f32; 512 * 512];
        let mut rng = SeedRng::seed_from_u64(4);
        let patches = extract_train_patches(&image, &mask, 512, 512, "P1", 0, &ExtractConfig::default(), &mut rng).unwrap();
        assert_eq!(patches.len(), 32);
        for p in &patches[..20] {
            assert_eq!(p.label, SliceLabel::Infected);
            assert!(p.origin.row <= 300 && 300 < p.origin.row + 128);
            assert!(p.origin.col <= 200 && 200 < p.origin.col + 128);
        }
        assert!(patches.iter().all(|p| p.origin.slice_label == SliceLabel::Infected));
    }

    #[test]
    fn non_infected_slice() {
        let mask = vec![0u8; 512 * 512];
        let image = vec![0.0f32; 512 * 512];
        let mut rng = SeedRng::seed_from_u64(1);
        let patches = extract_train_patches(&image, &mask, 512, 512, "P2", 3, &ExtractConfig::default(), &mut rng).unwrap();
        assert_eq!(patches.len(), 12);
        assert!(patches.iter().all(|p| p.label == SliceLabel::NonInfected && p.mask.iter().all(|&m| m == 0)));
    }

    #[test]
    fn size_policy() {
        let image = vec![0.25f32; 500 * 520];
        assert!(fit_slice(&image, None, 500, 520, 128, SizePolicy::Reject).is_err());
        let (out, _, h, w) = fit_slice(&image, None, 500, 520, 128, SizePolicy::Resample).unwrap();
        assert_eq!((h, w), (512, 512));
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}

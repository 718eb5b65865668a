//! Synthetic chest CT volumes with known infection masks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{MaskVolume, Volume};
use crate::error::{Error, Result};
use crate::SeedRng;

const AIR_HU: f32 = -1000.0;
const BODY_HU: f32 = 40.0;
const LUNG_HU: f32 = -850.0;
const LESION_EDGE_HU: f32 = -450.0;
const LESION_CORE_HU: f32 = -100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Square slice extent in pixels.
    pub size: usize,
    pub slices: usize,
    /// Share of the lung area covered by lesions on each infected slice.
    pub lesion_fraction: f64,
    /// Share of slices carrying lesions.
    pub infected_slice_fraction: f64,
    /// Standard deviation of additive Gaussian noise, in HU.
    pub noise_hu: f64,
    pub max_blobs: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 512,
            slices: 8,
            lesion_fraction: 0.10,
            infected_slice_fraction: 0.5,
            noise_hu: 15.0,
            max_blobs: 3,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.size < 32 {
            problems.push(format!("size must be at least 32, got {}", self.size));
        }
        if self.slices == 0 {
            problems.push("slices must be positive".to_string());
        }
        if !(0.0..=0.9).contains(&self.lesion_fraction) {
            problems.push(format!("lesion_fraction must lie in [0, 0.9], got {}", self.lesion_fraction));
        }
        if !(0.0..=1.0).contains(&self.infected_slice_fraction) {
            problems.push(format!("infected_slice_fraction must lie in [0, 1], got {}", self.infected_slice_fraction));
        }
        if !(self.noise_hu >= 0.0 && self.noise_hu.is_finite()) {
            problems.push(format!("noise_hu must be non-negative, got {}", self.noise_hu));
        }
        if self.max_blobs == 0 {
            problems.push("max_blobs must be positive".to_string());
        }
        match problems.len() {
            0 => Ok(()),
            1 => Err(Error::Config(problems.remove(0))),
            _ => Err(Error::ConfigKeys(problems)),
        }
    }
}

/// A generated patient: raw HU volume, infection mask and lung fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub mask: MaskVolume,
    pub lungs: MaskVolume,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    r: f64,
}

/// Builds one phantom. Output depends only on `seed` and `cfg`.
pub fn make_phantom(seed: u64, cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let mut rng = SeedRng::seed_from_u64(seed);
    let s = cfg.size as f64;
    let n = cfg.size;
    let plane = n * n;
    let jitter = |rng: &mut SeedRng, spread: f64| 1.0 + rng.random_range(-spread..spread);

    let body = Ellipse { cy: s / 2.0, cx: s / 2.0, ry: 0.33 * s * jitter(&mut rng, 0.05), rx: 0.42 * s * jitter(&mut rng, 0.05) };
    let body_hu = BODY_HU + rng.random_range(-10.0..10.0);
    let lung_hu = LUNG_HU + rng.random_range(-20.0..20.0);
    let lung_rx = 0.14 * s * jitter(&mut rng, 0.05);
    let lung_ry = 0.22 * s * jitter(&mut rng, 0.05);

    let infected_count =
        if cfg.lesion_fraction > 0.0 { (cfg.infected_slice_fraction * cfg.slices as f64).round() as usize } else { 0 };
    let mut order: Vec<usize> = (0..cfg.slices).collect();
    order.shuffle(&mut rng);
    let mut infected = vec![false; cfg.slices];
    for &i in &order[..infected_count] {
        infected[i] = true;
    }

    let noise = Normal::new(0.0, cfg.noise_hu).map_err(|e| Error::config(e.to_string()))?;
    let mut voxels = Vec::with_capacity(cfg.slices * plane);
    let mut mask = Vec::with_capacity(cfg.slices * plane);
    let mut lungs = Vec::with_capacity(cfg.slices * plane);
    for (k, &is_infected) in infected.iter().enumerate() {
        let z = 0.75 + 0.25 * (std::f64::consts::PI * (k as f64 + 0.5) / cfg.slices as f64).sin();
        let fields = [
            Ellipse { cy: 0.48 * s, cx: 0.30 * s, ry: lung_ry * z, rx: lung_rx * z },
            Ellipse { cy: 0.48 * s, cx: 0.70 * s, ry: lung_ry * z, rx: lung_rx * z },
        ];
        let lung: Vec<u8> = (0..plane).map(|i| fields.iter().any(|f| f.contains(i / n, i % n)) as u8).collect();
        let mut lesion_hu = vec![f32::NAN; plane];
        let mut lesion = vec![0u8; plane];
        if is_infected {
            let blobs = place_blobs(&lung, n, cfg, &mut rng);
            rasterize(&blobs, &lung, n, &mut lesion, Some(&mut lesion_hu));
        }
        for i in 0..plane {
            let (y, x) = (i / n, i % n);
            let base = if lesion[i] == 1 {
                lesion_hu[i]
            } else if lung[i] == 1 {
                lung_hu
            } else if body.contains(y, x) {
                body_hu
            } else {
                AIR_HU
            };
            voxels.push(base + noise.sample(&mut rng) as f32);
        }
        mask.extend_from_slice(&lesion);
        lungs.extend_from_slice(&lung);
    }
    let dims = [cfg.slices, n, n];
    Ok(Phantom {
        volume: Volume::new(dims, voxels)?,
        mask: MaskVolume::new(dims, mask)?,
        lungs: MaskVolume::new(dims, lungs)?,
    })
}

/// Chooses blob centres inside the lungs and rescales the radii until the
/// clipped lesion area matches the requested fraction of lung area.
fn place_blobs(lung: &[u8], n: usize, cfg: &PhantomConfig, rng: &mut SeedRng) -> Vec<Blob> {
    let lung_px: Vec<usize> = (0..lung.len()).filter(|&i| lung[i] == 1).collect();
    let target = cfg.lesion_fraction * lung_px.len() as f64;
    let count = rng.random_range(1..=cfg.max_blobs);
    let mut blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let c = lung_px[rng.random_range(0..lung_px.len())];
            let r = (target / (count as f64 * std::f64::consts::PI)).sqrt() * rng.random_range(0.8..1.2);
            Blob { cy: (c / n) as f64 + 0.5, cx: (c % n) as f64 + 0.5, r: r.max(1.0) }
        })
        .collect();
    let mut scratch = vec![0u8; lung.len()];
    for _ in 0..12 {
        scratch.fill(0);
        rasterize(&blobs, lung, n, &mut scratch, None);
        let area = scratch.iter().map(|&v| v as f64).sum::<f64>().max(1.0);
        let ratio = target / area;
        if (ratio - 1.0).abs() < 0.01 {
            break;
        }
        let scale = ratio.sqrt().clamp(0.5, 2.0);
        for b in &mut blobs {
            b.r = (b.r * scale).max(1.0);
        }
    }
    blobs
}

fn rasterize(blobs: &[Blob], lung: &[u8], n: usize, mask: &mut [u8], mut hu: Option<&mut [f32]>) {
    for b in blobs {
        let y0 = (b.cy - b.r).floor().max(0.0) as usize;
        let y1 = ((b.cy + b.r).ceil() as usize).min(n);
        let x0 = (b.cx - b.r).floor().max(0.0) as usize;
        let x1 = ((b.cx + b.r).ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * n + x;
                let d2 = ((y as f64 + 0.5 - b.cy).powi(2) + (x as f64 + 0.5 - b.cx).powi(2)) / (b.r * b.r);
                if d2 >= 1.0 || lung[i] == 0 {
                    continue;
                }
                mask[i] = 1;
                if let Some(hu) = hu.as_deref_mut() {
                    let v = LESION_EDGE_HU + (LESION_CORE_HU - LESION_EDGE_HU) * (1.0 - d2) as f32;
                    hu[i] = if hu[i].is_nan() { v } else { hu[i].max(v) };
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{label_slices, SliceLabel};

    fn small() -> PhantomConfig {
        PhantomConfig { size: 128, slices: 4, ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(make_phantom(3, &small()).unwrap(), make_phantom(3, &small()).unwrap());
        assert_ne!(make_phantom(3, &small()).unwrap().volume, make_phantom(4, &small()).unwrap().volume);
    }

    #[test]
    fn zero_fraction_is_clean() {
        let p = make_phantom(1, &PhantomConfig { lesion_fraction: 0.0, ..small() }).unwrap();
        assert_eq!(p.mask.count(), 0);
        assert!(label_slices(&p.mask).iter().all(|&l| l == SliceLabel::NonInfected));
    }

    #[test]
    fn lesions_stay_in_lungs() {
        let p = make_phantom(2, &small()).unwrap();
        assert!(p.mask.count() > 0);
        assert!(p.mask.voxels.iter().zip(&p.lungs.voxels).all(|(&m, &l)| m <= l));
        assert_eq!(label_slices(&p.mask).iter().filter(|&&l| l == SliceLabel::Infected).count(), 2);
    }
}

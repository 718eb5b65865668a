//! Overlap metrics, ROC AUC, severity grading and visual overlays.

use std::fmt;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{MaskVolume, Volume};
use crate::error::{Error, Result};

/// Pixel tallies of a binary prediction against a binary truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Counts of both maps empty: no positive predicted and none present.
    fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn dsc(&self) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }

    pub fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 if self.fn_ == 0 => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }

    pub fn sensitivity(&self) -> f64 {
        match self.tp + self.fn_ {
            0 if self.fp == 0 => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("prediction has {} pixels, truth {}", pred.len(), truth.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn binarize(probs: &[f32], threshold: f32) -> Vec<u8> {
    probs.iter().map(|&p| (p >= threshold) as u8).collect()
}

/// Area under the ROC curve via the Mann-Whitney rank statistic, tied
/// scores sharing their average rank.
pub fn roc_auc(probs: &[f32], truth: &[u8]) -> Result<f64> {
    if probs.len() != truth.len() {
        return Err(Error::shape(format!("{} scores for {} labels", probs.len(), truth.len())));
    }
    let positives = truth.iter().filter(|&&t| t != 0).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::NotApplicable("ROC AUC needs both classes in the truth map".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| truth[k] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Population mean and standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CtGrade {
    Ct0,
    Ct1,
    Ct2,
    Ct3,
    Ct4,
}

impl CtGrade {
    /// Bands closed at the top: 0 is CT-0, (0, 25] CT-1, (25, 50] CT-2,
    /// (50, 75] CT-3, above 75 CT-4.
    pub fn from_involvement(pct: f64) -> Self {
        if pct <= 0.0 {
            CtGrade::Ct0
        } else if pct <= 25.0 {
            CtGrade::Ct1
        } else if pct <= 50.0 {
            CtGrade::Ct2
        } else if pct <= 75.0 {
            CtGrade::Ct3
        } else {
            CtGrade::Ct4
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CtGrade::Ct0 => "CT-0",
            CtGrade::Ct1 => "CT-1",
            CtGrade::Ct2 => "CT-2",
            CtGrade::Ct3 => "CT-3",
            CtGrade::Ct4 => "CT-4",
        }
    }
}

impl fmt::Display for CtGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Region against which involvement is measured.
#[derive(Clone, Copy, Debug)]
pub enum SeverityReference<'a> {
    Lungs(&'a MaskVolume),
    /// Voxels of a raw HU volume above `floor_hu`.
    Body { volume: &'a Volume, floor_hu: f32 },
}

pub const BODY_FLOOR_HU: f32 = -500.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityGrade {
    pub grade: CtGrade,
    pub involvement_pct: f64,
    pub reference: String,
    pub reference_voxels: u64,
    pub infected_voxels: u64,
}

pub fn severity_grade(mask: &MaskVolume, reference: SeverityReference<'_>) -> Result<SeverityGrade> {
    let (inside, label): (Vec<bool>, &str) = match reference {
        SeverityReference::Lungs(lungs) => {
            if lungs.dims != mask.dims {
                return Err(Error::shape(format!("lung mask dims {:?} differ from {:?}", lungs.dims, mask.dims)));
            }
            (lungs.voxels.iter().map(|&v| v != 0).collect(), "lungs")
        }
        SeverityReference::Body { volume, floor_hu } => {
            if volume.dims != mask.dims {
                return Err(Error::shape(format!("volume dims {:?} differ from {:?}", volume.dims, mask.dims)));
            }
            (volume.voxels.iter().map(|&v| v > floor_hu).collect(), "body")
        }
    };
    let reference_voxels = inside.iter().filter(|&&b| b).count() as u64;
    if reference_voxels == 0 {
        return Err(Error::InvalidInput(format!("severity reference region ({label}) is empty")));
    }
    let infected_voxels = mask.voxels.iter().zip(&inside).filter(|&(&m, &r)| m != 0 && r).count() as u64;
    let involvement_pct = 100.0 * infected_voxels as f64 / reference_voxels as f64;
    Ok(SeverityGrade {
        grade: CtGrade::from_involvement(involvement_pct),
        involvement_pct,
        reference: label.to_string(),
        reference_voxels,
        infected_voxels,
    })
}

/// Piecewise-linear jet ramp: blue, cyan, green, yellow, red at 0, 1/4,
/// 1/2, 3/4, 1.
pub fn jet_color(v: f32) -> [u8; 3] {
    const STOPS: [[f32; 3]; 5] = [[0., 0., 1.], [0., 1., 1.], [0., 1., 0.], [1., 1., 0.], [1., 0., 0.]];
    let t = v.clamp(0.0, 1.0) * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f32;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let x = STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f;
        *o = (x * 255.0).round() as u8;
    }
    out
}

/// Colours probabilities at or above `threshold` with the jet ramp blended at
/// `alpha` over the grayscale `base`; other pixels show the base only.
pub fn jet_overlay(probs: &[f32], base: &[f32], h: usize, w: usize, threshold: f32, alpha: f32) -> Result<RgbImage> {
    if probs.len() != h * w || base.len() != h * w {
        return Err(Error::shape(format!("overlay inputs do not match {h}x{w}")));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let g = base[i].clamp(0.0, 1.0) * 255.0;
        if probs[i] < threshold {
            let g = g.round() as u8;
            return Rgb([g, g, g]);
        }
        let c = jet_color(probs[i]);
        Rgb(c.map(|v| (alpha * v as f32 + (1.0 - alpha) * g).round() as u8))
    }))
}

/// Scores of one predicted volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub name: String,
    pub counts: ConfusionCounts,
    pub dsc: f64,
    pub precision: f64,
    pub sensitivity: f64,
    /// `None` when the truth holds a single class.
    pub auc: Option<f64>,
}

pub fn score_volume(name: &str, pred: &MaskVolume, probs: Option<&[f32]>, truth: &MaskVolume) -> Result<VolumeScore> {
    if pred.dims != truth.dims {
        return Err(Error::shape(format!("{name}: prediction dims {:?} differ from truth {:?}", pred.dims, truth.dims)));
    }
    let counts = confusion(&pred.voxels, &truth.voxels)?;
    let auc = match probs {
        Some(p) => match roc_auc(p, &truth.voxels) {
            Ok(a) => Some(a),
            Err(Error::NotApplicable(_)) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    Ok(VolumeScore {
        name: name.to_string(),
        counts,
        dsc: counts.dsc(),
        precision: counts.precision(),
        sensitivity: counts.sensitivity(),
        auc,
    })
}

/// Per-volume scores with their population mean and SD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub volumes: Vec<VolumeScore>,
    pub dsc: (f64, f64),
    pub precision: (f64, f64),
    pub sensitivity: (f64, f64),
    /// Over the volumes where AUC is defined.
    pub auc: Option<(f64, f64)>,
}

impl MetricReport {
    pub fn from_scores(volumes: Vec<VolumeScore>) -> Self {
        let col = |f: fn(&VolumeScore) -> f64| mean_sd(&volumes.iter().map(f).collect::<Vec<_>>());
        let aucs: Vec<f64> = volumes.iter().filter_map(|v| v.auc).collect();
        MetricReport {
            dsc: col(|v| v.dsc),
            precision: col(|v| v.precision),
            sensitivity: col(|v| v.sensitivity),
            auc: (!aucs.is_empty()).then(|| mean_sd(&aucs)),
            volumes,
        }
    }

    pub fn summary(&self) -> String {
        let fmt = |(m, s): (f64, f64)| format!("{m:.4} ± {s:.4}");
        let mut out = format!(
            "volumes: {}\nDSC: {}\nPrecision: {}\nSensitivity: {}\n",
            self.volumes.len(),
            fmt(self.dsc),
            fmt(self.precision),
            fmt(self.sensitivity)
        );
        out.push_str(&match self.auc {
            Some(a) => format!("AUC: {}\n", fmt(a)),
            None => "AUC: n/a\n".to_string(),
        });
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let wrap = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(["volume", "tp", "fp", "tn", "fn", "dsc", "precision", "sensitivity", "auc"]).map_err(wrap)?;
        let auc = |a: Option<f64>| a.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        for v in &self.volumes {
            let c = v.counts;
            w.write_record([
                v.name.clone(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.tn.to_string(),
                c.fn_.to_string(),
                format!("{:.6}", v.dsc),
                format!("{:.6}", v.precision),
                format!("{:.6}", v.sensitivity),
                auc(v.auc),
            ])
            .map_err(wrap)?;
        }
        for (label, pick) in [("mean", 0usize), ("sd", 1)] {
            let g = |p: (f64, f64)| format!("{:.6}", if pick == 0 { p.0 } else { p.1 });
            w.write_record([
                label.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                g(self.dsc),
                g(self.precision),
                g(self.sensitivity),
                self.auc.map_or_else(|| "NA".to_string(), g),
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Renders a 2x2 confusion matrix (rows: truth negative/positive, columns:
/// predicted negative/positive) as shaded cells, each row normalised.
pub fn confusion_png(path: &Path, c: &ConfusionCounts, cell: u32) -> Result<()> {
    let rows = [[c.tn, c.fp], [c.fn_, c.tp]];
    let img = RgbImage::from_fn(2 * cell, 2 * cell, |x, y| {
        let (r, col) = ((y / cell) as usize, (x / cell) as usize);
        let total = rows[r][0] + rows[r][1];
        let frac = if total == 0 { 0.0 } else { rows[r][col] as f64 / total as f64 };
        let shade = (255.0 * (1.0 - frac)).round() as u8;
        Rgb([shade, shade, 255])
    });
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

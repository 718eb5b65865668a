//! Single-model training: Adam, run-time augmentation, label-proportional
//! batching and best-validation checkpoint selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::{PatchSample, SliceLabel};
use crate::error::{Error, Result};
use crate::eval::ConfusionCounts;
use crate::losses::{self, LossConfig};
use crate::network::{forward, ModelState};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};
use crate::SeedRng;

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![T::zero(); n], vec![T::zero(); n])).unzip();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam: {} moment buffers for {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(format!("adam: tensor {i} length mismatch")));
            }
        }
        self.t += 1;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let step = T::from_f64_lossy(self.lr * (1.0 - self.beta2.powi(self.t as i32)).sqrt() / (1.0 - self.beta1.powi(self.t as i32)));
        let eps_hat = T::from_f64_lossy(self.eps * (1.0 - self.beta2.powi(self.t as i32)).sqrt());
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() + eps_hat);
            }
        }
        Ok(())
    }
}

/// One Adam update of every parameter of `state`.
pub fn adam_step<T: Scalar>(state: &mut ModelState<T>, grads: &[&[T]], opt: &mut Adam<T>) -> Result<()> {
    let mut params: Vec<&mut [T]> = state.params_mut().map(|p| p.tensor.data_mut()).collect();
    opt.step(&mut params, grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute shift as a fraction of the patch extent.
    pub shift_frac: f64,
    /// Maximum absolute relative zoom.
    pub zoom_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, rotation_deg: 10.0, shift_frac: 0.2, zoom_frac: 0.2 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(0.0..=180.0).contains(&self.rotation_deg) {
            problems.push(format!("augment.rotation_deg must lie in [0, 180], got {}", self.rotation_deg));
        }
        if !(0.0..1.0).contains(&self.shift_frac) {
            problems.push(format!("augment.shift_frac must lie in [0, 1), got {}", self.shift_frac));
        }
        if !(0.0..1.0).contains(&self.zoom_frac) {
            problems.push(format!("augment.zoom_frac must lie in [0, 1), got {}", self.zoom_frac));
        }
        problems
    }
}

/// A similarity transform about the patch centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub angle_deg: f64,
    /// Shift in pixels (rows, columns).
    pub shift: (f64, f64),
    pub zoom: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { angle_deg: 0.0, shift: (0.0, 0.0), zoom: 1.0 };

    pub fn sample(cfg: &AugmentConfig, size: usize, rng: &mut impl Rng) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let angle_deg = sym(rng, cfg.rotation_deg);
        let dy = sym(rng, cfg.shift_frac) * size as f64;
        let dx = sym(rng, cfg.shift_frac) * size as f64;
        let zoom = 1.0 + sym(rng, cfg.zoom_frac);
        Transform { angle_deg, shift: (dy, dx), zoom }
    }

    /// Maps an output pixel to its source coordinates.
    fn source(&self, y: f64, x: f64, centre: f64) -> (f64, f64) {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (ty, tx) = (y - centre - self.shift.0, x - centre - self.shift.1);
        let sy = (c * ty - s * tx) / self.zoom + centre;
        let sx = (s * ty + c * tx) / self.zoom + centre;
        (sy, sx)
    }
}

/// Applies `t` to a square image (bilinear) and its mask (nearest), filling
/// samples from outside the patch with zero.
pub fn apply_transform(image: &[f32], mask: &[u8], size: usize, t: &Transform) -> (Vec<f32>, Vec<u8>) {
    let centre = (size as f64 - 1.0) / 2.0;
    let n = size as isize;
    let pix = |y: isize, x: isize| if y < 0 || x < 0 || y >= n || x >= n { 0.0 } else { image[(y * n + x) as usize] as f64 };
    let mut out_img = Vec::with_capacity(size * size);
    let mut out_mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (sy, sx) = t.source(y as f64, x as f64, centre);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (iy, ix) = (y0 as isize, x0 as isize);
            let v = if fy == 0.0 && fx == 0.0 {
                pix(iy, ix)
            } else {
                (pix(iy, ix) * (1.0 - fx) + pix(iy, ix + 1) * fx) * (1.0 - fy)
                    + (pix(iy + 1, ix) * (1.0 - fx) + pix(iy + 1, ix + 1) * fx) * fy
            };
            out_img.push(v as f32);
            let (ny, nx) = (sy.round() as isize, sx.round() as isize);
            out_mask.push(if ny < 0 || nx < 0 || ny >= n || nx >= n { 0 } else { mask[(ny * n + nx) as usize] });
        }
    }
    (out_img, out_mask)
}

/// Draws one transform and applies it to both the patch and its mask.
pub fn augment(image: &[f32], mask: &[u8], size: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Vec<f32>, Vec<u8>) {
    if !cfg.enabled {
        return (image.to_vec(), mask.to_vec());
    }
    let t = Transform::sample(cfg, size, rng);
    apply_transform(image, mask, size, &t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Each infected patch appears this many times per epoch.
    pub infected_oversample: usize,
    /// Binarisation threshold for the DSC columns of the learning curve.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 70,
            learning_rate: 0.001,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            infected_oversample: 1,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.infected_oversample == 0 {
            problems.push("infected_oversample must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            problems.push(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        if let Err(e) = self.loss.validate() {
            problems.push(e.to_string());
        }
        problems.extend(self.augment.validate());
        match problems.len() {
            0 => Ok(()),
            1 => Err(Error::Config(problems.remove(0))),
            _ => Err(Error::ConfigKeys(problems)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Pooled DSC of the training-mode predictions seen during the epoch.
    pub train_dsc: f64,
    pub val_loss: Option<f64>,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub epochs: Vec<EpochStats>,
}

impl LearningCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let wrap = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(["epoch", "train_loss", "train_dsc", "val_loss", "val_dsc"]).map_err(wrap)?;
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.6}", e.train_loss),
                format!("{:.6}", e.train_dsc),
                opt(e.val_loss),
                opt(e.val_dsc),
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Result of [`train`]. `state` is the checkpoint with the best validation
/// DSC (earliest on ties), or the last epoch when there is no validation set.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub state: ModelState<T>,
    pub curve: LearningCurve,
    pub best_epoch: usize,
    pub best_val_dsc: Option<f64>,
}

/// Visiting order for one epoch: infected and non-infected patches are
/// shuffled separately and interleaved so every stretch of the order holds
/// both labels in proportion to their counts.
pub fn epoch_order(labels: &[SliceLabel], oversample: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            SliceLabel::Infected => pos.extend(std::iter::repeat_n(i, oversample.max(1))),
            SliceLabel::NonInfected => neg.push(i),
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let total = pos.len() + neg.len();
    let mut out = Vec::with_capacity(total);
    let (mut a, mut b) = (0usize, 0usize);
    while out.len() < total {
        // Take from whichever list is furthest behind its proportional share.
        let take_pos = b >= neg.len() || (a < pos.len() && a * neg.len() <= b * pos.len());
        if take_pos {
            out.push(pos[a]);
            a += 1;
        } else {
            out.push(neg[b]);
            b += 1;
        }
    }
    out
}

fn batch_tensors<T: Scalar>(
    samples: &[PatchSample],
    idx: &[usize],
    augment_cfg: Option<(&AugmentConfig, &mut SeedRng)>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let size = samples[idx[0]].size;
    let plane = size * size;
    let mut x = Vec::with_capacity(idx.len() * plane);
    let mut y = Vec::with_capacity(idx.len() * plane);
    let mut aug = augment_cfg;
    for &i in idx {
        let s = &samples[i];
        if s.size != size || s.image.len() != plane || s.mask.len() != plane {
            return Err(Error::shape("training patches must share one size"));
        }
        match aug.as_mut() {
            Some((cfg, rng)) if cfg.enabled => {
                let (img, m) = augment(&s.image, &s.mask, size, cfg, *rng);
                x.extend(img.into_iter().map(|v| T::from_f64_lossy(v as f64)));
                y.extend(m.into_iter().map(|v| T::from_f64_lossy(v as f64)));
            }
            _ => {
                x.extend(s.image.iter().map(|&v| T::from_f64_lossy(v as f64)));
                y.extend(s.mask.iter().map(|&v| T::from_f64_lossy(v as f64)));
            }
        }
    }
    Ok((Tensor::new(vec![idx.len(), 1, size, size], x)?, y))
}

fn tally<T: Scalar>(pred: &[T], target: &[T], threshold: f64, counts: &mut ConfusionCounts) {
    let thr = T::from_f64_lossy(threshold);
    for (&p, &t) in pred.iter().zip(target) {
        match (p >= thr, t > T::zero()) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, false) => counts.tn += 1,
            (false, true) => counts.fn_ += 1,
        }
    }
}

/// Mean loss and pooled DSC of `model` on `samples` in inference mode.
pub fn evaluate_patches<T: Scalar>(
    model: &ModelState<T>,
    samples: &[PatchSample],
    loss: &LossConfig,
    batch_size: usize,
    threshold: f64,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no patches to evaluate".into()));
    }
    let mut counts = ConfusionCounts::default();
    let mut loss_sum = 0.0;
    let all: Vec<usize> = (0..samples.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (x, y) = batch_tensors::<T>(samples, chunk, None)?;
        let p = model.predict(&x)?;
        loss_sum += losses::loss_value(loss, p.data(), &y)?.to_f64_lossy() * chunk.len() as f64;
        tally(p.data(), &y, threshold, &mut counts);
    }
    Ok((loss_sum / samples.len() as f64, counts.dsc()))
}

/// Trains `model` on `train_set`, tracking `val_set` after every epoch.
pub fn train<T: Scalar>(
    model: ModelState<T>,
    train_set: &[PatchSample],
    val_set: &[PatchSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let (h, w) = model.spec().input_size;
    if let Some(bad) = train_set.iter().chain(val_set).find(|p| (p.size, p.size) != (h, w)) {
        return Err(Error::shape(format!("patch of size {} does not match model input {h}x{w}", bad.size)));
    }
    let mut order_rng = SeedRng::seed_from_u64(cfg.seed);
    let mut aug_rng = SeedRng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);
    let mut drop_rng = SeedRng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(2);

    let labels: Vec<SliceLabel> = train_set.iter().map(|p| p.label).collect();
    let mut state = model;
    let mut opt = Adam::<T>::new(cfg.learning_rate, state.params().iter().map(|p| p.tensor.numel()));
    let mut curve = LearningCurve::default();
    let mut best: Option<(usize, f64, ModelState<T>)> = None;

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(&labels, cfg.infected_oversample, &mut order_rng);
        let mut counts = ConfusionCounts::default();
        let mut loss_sum = 0.0;
        for (batch_no, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = batch_tensors::<T>(train_set, idx, Some((&cfg.augment, &mut aug_rng)))?;
            let diverged = |loss: f64| Error::Diverged { epoch, batch: batch_no + 1, loss };
            let mut graph = Graph::new();
            let params = state.bind(&mut graph, true);
            let xv = graph.constant(x);
            let out = match forward(&mut graph, state.spec(), &params, xv, Some(&mut drop_rng)) {
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                other => other?,
            };
            tally(graph.value(out.output).data(), &y, cfg.threshold, &mut counts);
            let loss = match losses::apply(&mut graph, &cfg.loss, out.output, &y) {
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                other => other?,
            };
            let lv = graph.value(loss).item()?.to_f64_lossy();
            if !lv.is_finite() {
                return Err(diverged(lv));
            }
            loss_sum += lv * idx.len() as f64;
            graph.backward(loss)?;
            let grads: Vec<&[T]> = params
                .vars()
                .iter()
                .map(|&v| graph.grad(v).ok_or_else(|| Error::Autograd("parameter without gradient".into())))
                .collect::<Result<_>>()?;
            adam_step(&mut state, &grads, &mut opt)?;
            if state.params().iter().any(|p| !p.tensor.all_finite()) {
                return Err(diverged(lv));
            }
        }
        let (val_loss, val_dsc) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, d) = evaluate_patches(&state, val_set, &cfg.loss, cfg.batch_size, cfg.threshold)?;
            (Some(l), Some(d))
        };
        curve.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_dsc: counts.dsc(),
            val_loss,
            val_dsc,
        });
        let score = val_dsc.unwrap_or(f64::NEG_INFINITY);
        let improves = match &best {
            None => true,
            Some(_) if val_dsc.is_none() => true,
            Some((_, s, _)) => score > *s,
        };
        if improves {
            best = Some((epoch, score, state.clone()));
        }
    }
    let (best_epoch, score, best_state) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        state: best_state,
        curve,
        best_epoch,
        best_val_dsc: score.is_finite().then_some(score),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PatchOrigin;
    use crate::network::{ModelSpec, Variant};

    #[test]
    fn first_adam_step_is_lr() {
        let mut opt = Adam::<f64>::new(0.01, [1]);
        let mut p = [0.5f64];
        opt.step(&mut [&mut p], &[&[1.0]]).unwrap();
        assert!((p[0] - (0.5 - 0.01 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_and_bowl() {
        let mut opt = Adam::<f64>::new(0.05, [2]);
        let mut p = [1.0f64, -2.0];
        opt.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, [1.0, -2.0]);

        let mut opt = Adam::<f64>::new(0.05, [1]);
        let mut w = [1.0f64];
        for _ in 0..200 {
            let g = [2.0 * w[0]];
            opt.step(&mut [&mut w], &[&g]).unwrap();
        }
        assert!(w[0].abs() < 1e-2, "w = {}", w[0]);
        assert!(opt.step(&mut [&mut w], &[&[0.0, 1.0]]).is_err());
    }

    #[test]
    fn augment_identity_cases() {
        let img: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
        let mask: Vec<u8> = (0..64).map(|i| (i % 3 == 0) as u8).collect();
        let (a, b) = apply_transform(&img, &mask, 8, &Transform::IDENTITY);
        assert_eq!((a.as_slice(), b.as_slice()), (img.as_slice(), mask.as_slice()));
        let off = AugmentConfig { enabled: false, ..Default::default() };
        let mut rng = SeedRng::seed_from_u64(0);
        assert_eq!(augment(&img, &mask, 8, &off, &mut rng), (img.clone(), mask.clone()));
    }

    #[test]
    fn epoch_order_is_proportional_permutation() {
        let labels: Vec<SliceLabel> =
            (0..30).map(|i| if i % 3 == 0 { SliceLabel::Infected } else { SliceLabel::NonInfected }).collect();
        let mut rng = SeedRng::seed_from_u64(2);
        let order = epoch_order(&labels, 1, &mut rng);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..30).collect::<Vec<_>>());
        for chunk in order.chunks(6) {
            let pos = chunk.iter().filter(|&&i| labels[i] == SliceLabel::Infected).count();
            assert_eq!(pos, 2);
        }
        assert_eq!(epoch_order(&labels, 3, &mut rng).len(), 50);
    }

    fn toy_set() -> Vec<PatchSample> {
        (0..8)
            .map(|k| {
                let mut image = vec![0.1f32; 256];
                let mut mask = vec![0u8; 256];
                if k % 2 == 0 {
                    let (r0, c0) = (2 + k % 5, 3 + k % 7);
                    for r in r0..r0 + 6 {
                        for c in c0..c0 + 6 {
                            image[r * 16 + c] = 0.9;
                            mask[r * 16 + c] = 1;
                        }
                    }
                }
                let origin = PatchOrigin {
                    patient: "T".into(),
                    slice: k,
                    row: 0,
                    col: 0,
                    slice_label: SliceLabel::of_mask(&mask),
                };
                PatchSample::new(16, image, mask, origin)
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let spec = ModelSpec::new(Variant::AmcNet).with_base_channels(1).with_input_size(16, 16);
        let model = ModelState::<f32>::build(&spec).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, learning_rate: 0.0, ..Default::default() };
        let out = train(model.clone(), &toy_set(), &toy_set(), &cfg).unwrap();
        assert_eq!(out.state, model);
        assert_eq!(out.curve.epochs.len(), 2);
    }

    #[test]
    fn same_seed_same_curve() {
        let spec = ModelSpec::new(Variant::UNet).with_base_channels(2).with_input_size(16, 16);
        let model = ModelState::<f32>::build(&spec).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 4, seed: 9, ..Default::default() };
        let a = train(model.clone(), &toy_set(), &toy_set()[..2], &cfg).unwrap();
        let b = train(model, &toy_set(), &toy_set()[..2], &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn rejects_bad_config_and_data() {
        let spec = ModelSpec::new(Variant::UNet).with_base_channels(1).with_input_size(16, 16);
        let model = ModelState::<f32>::build(&spec).unwrap();
        let cfg = TrainConfig { epochs: 0, batch_size: 0, ..Default::default() };
        assert!(matches!(train(model.clone(), &toy_set(), &[], &cfg), Err(Error::ConfigKeys(k)) if k.len() == 2));
        assert!(train(model, &[], &[], &TrainConfig::default()).is_err());
    }
}

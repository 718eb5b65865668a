//! Segmentation losses on probability maps against binary masks.
//!
//! Every loss is exposed twice: a value-only function for direct use and
//! [`loss_and_grad`], which returns the value together with its analytic
//! gradient with respect to the predicted probabilities. Pixel-wise losses
//! (focal, cross-entropy) are averaged over every pixel of the batch; the
//! region losses (Dice, IoU, Tversky) sum over every pixel of the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before any logarithm.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// Alpha-balanced focal loss.
    Focal,
    Dice,
    /// Binary cross-entropy plus Dice.
    CrossEntropyDice,
    Iou,
    Tversky,
    FocalTversky,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Focal,
        LossKind::Dice,
        LossKind::CrossEntropyDice,
        LossKind::Iou,
        LossKind::Tversky,
        LossKind::FocalTversky,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Focal => "FL",
            LossKind::Dice => "DL",
            LossKind::CrossEntropyDice => "CEDL",
            LossKind::Iou => "IOU",
            LossKind::Tversky => "TL",
            LossKind::FocalTversky => "FTL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_uppercase().as_str() {
            "FL" | "FOCAL" => LossKind::Focal,
            "DL" | "DICE" => LossKind::Dice,
            "CEDL" => LossKind::CrossEntropyDice,
            "IOU" | "JACCARD" => LossKind::Iou,
            "TL" | "TVERSKY" => LossKind::Tversky,
            "FTL" | "FOCAL_TVERSKY" => LossKind::FocalTversky,
            _ => return None,
        })
    }
}

/// Exponent applied to the Tversky loss by the focal Tversky loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FtlExponent {
    /// `TL^(1/gamma)`.
    Reciprocal,
    /// `TL^gamma`.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Additive smoothing term of the region losses.
    pub smooth: f64,
    pub ftl_exponent: FtlExponent,
}

impl LossConfig {
    /// Defaults per kind: focal alpha 0.8 / gamma 2; Tversky alpha 0.7,
    /// beta 0.3; focal Tversky gamma 2; smoothing 1.
    pub fn new(kind: LossKind) -> Self {
        let (alpha, beta) = match kind {
            LossKind::Focal => (0.8, 0.0),
            LossKind::Tversky | LossKind::FocalTversky => (0.7, 0.3),
            _ => (0.0, 0.0),
        };
        LossConfig { kind, alpha, beta, gamma: 2.0, smooth: 1.0, ftl_exponent: FtlExponent::Reciprocal }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::config(format!("loss alpha/beta must be >= 0 (alpha={}, beta={})", self.alpha, self.beta)));
        }
        if !(self.gamma > 0.0) && self.kind != LossKind::Focal {
            return Err(Error::config(format!("loss gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.smooth >= 0.0) {
            return Err(Error::config(format!("loss smoothing must be >= 0, got {}", self.smooth)));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::new(LossKind::Focal)
    }
}

fn check(pred_len: usize, target_len: usize) -> Result<()> {
    if pred_len != target_len {
        return Err(Error::shape(format!("loss: prediction has {pred_len} pixels, mask has {target_len}")));
    }
    if pred_len == 0 {
        return Err(Error::shape("loss over an empty map"));
    }
    Ok(())
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let lo = c::<T>(EPS);
    let hi = T::one() - lo;
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

/// Pixel-mean binary cross-entropy.
pub fn cross_entropy<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    Ok(cross_entropy_grad(pred, target, false)?.0)
}

fn cross_entropy_grad<T: Scalar>(pred: &[T], target: &[T], with_grad: bool) -> Result<(T, Vec<T>)> {
    check(pred.len(), target.len())?;
    let n = T::from_usize(pred.len()).unwrap();
    let mut total = T::zero();
    let mut grad = if with_grad { Vec::with_capacity(pred.len()) } else { Vec::new() };
    for (&p, &y) in pred.iter().zip(target) {
        let (pc, inside) = clamp_prob(p);
        total -= y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
        if with_grad {
            let d = if inside { -y / pc + (T::one() - y) / (T::one() - pc) } else { T::zero() };
            grad.push(d / n);
        }
    }
    Ok((total / n, grad))
}

/// Pixel-mean alpha-balanced focal loss `-alpha (1 - p_t)^gamma ln(p_t)`,
/// where `p_t` is `p` on positive pixels and `1 - p` on negative ones.
pub fn focal_loss<T: Scalar>(pred: &[T], target: &[T], alpha: T, gamma: T) -> Result<T> {
    Ok(focal_grad(pred, target, alpha, gamma, false)?.0)
}

fn focal_grad<T: Scalar>(pred: &[T], target: &[T], alpha: T, gamma: T, with_grad: bool) -> Result<(T, Vec<T>)> {
    check(pred.len(), target.len())?;
    let n = T::from_usize(pred.len()).unwrap();
    let one = T::one();
    let mut total = T::zero();
    let mut grad = if with_grad { Vec::with_capacity(pred.len()) } else { Vec::new() };
    for (&p, &y) in pred.iter().zip(target) {
        let (pc, inside) = clamp_prob(p);
        let q = one - pc;
        // positive-pixel term: -a q^g ln p ; negative-pixel term: -a p^g ln q
        let pos = -alpha * q.powf(gamma) * pc.ln();
        let neg = -alpha * pc.powf(gamma) * q.ln();
        total += y * pos + (one - y) * neg;
        if with_grad {
            let d = if inside {
                let dpos = alpha * (gamma * pow_m1(q, gamma) * pc.ln() - q.powf(gamma) / pc);
                let dneg = -alpha * (gamma * pow_m1(pc, gamma) * q.ln() - pc.powf(gamma) / q);
                y * dpos + (one - y) * dneg
            } else {
                T::zero()
            };
            grad.push(d / n);
        }
    }
    Ok((total / n, grad))
}

/// `x^(g-1)`, with the `g == 0` case (whose derivative term vanishes) kept finite.
fn pow_m1<T: Scalar>(x: T, g: T) -> T {
    if g == T::zero() {
        T::zero()
    } else {
        x.powf(g - T::one())
    }
}

struct Overlap<T> {
    inter: T,
    sum_y: T,
    sum_p: T,
}

fn overlap<T: Scalar>(pred: &[T], target: &[T]) -> Overlap<T> {
    let mut o = Overlap { inter: T::zero(), sum_y: T::zero(), sum_p: T::zero() };
    for (&p, &y) in pred.iter().zip(target) {
        o.inter += p * y;
        o.sum_y += y;
        o.sum_p += p;
    }
    o
}

/// `1 - (2 sum(y p) + s) / (sum(y) + sum(p) + s)`.
pub fn dice_loss<T: Scalar>(pred: &[T], target: &[T], smooth: T) -> Result<T> {
    Ok(dice_grad(pred, target, smooth, false)?.0)
}

fn dice_grad<T: Scalar>(pred: &[T], target: &[T], smooth: T, with_grad: bool) -> Result<(T, Vec<T>)> {
    check(pred.len(), target.len())?;
    let o = overlap(pred, target);
    let two = c::<T>(2.0);
    let num = two * o.inter + smooth;
    let den = o.sum_y + o.sum_p + smooth;
    if den == T::zero() {
        return Ok((T::zero(), vec![T::zero(); if with_grad { pred.len() } else { 0 }]));
    }
    let grad = if with_grad {
        target.iter().map(|&y| -(two * y * den - num) / (den * den)).collect()
    } else {
        Vec::new()
    };
    Ok((T::one() - num / den, grad))
}

/// Jaccard loss with the standard union: `1 - (I + s) / (sum(y) + sum(p) - I + s)`.
pub fn iou_loss<T: Scalar>(pred: &[T], target: &[T], smooth: T) -> Result<T> {
    Ok(iou_grad(pred, target, smooth, false)?.0)
}

fn iou_grad<T: Scalar>(pred: &[T], target: &[T], smooth: T, with_grad: bool) -> Result<(T, Vec<T>)> {
    check(pred.len(), target.len())?;
    let o = overlap(pred, target);
    let num = o.inter + smooth;
    let den = o.sum_y + o.sum_p - o.inter + smooth;
    if den == T::zero() {
        return Ok((T::zero(), vec![T::zero(); if with_grad { pred.len() } else { 0 }]));
    }
    let grad = if with_grad {
        target.iter().map(|&y| -(y * den - num * (T::one() - y)) / (den * den)).collect()
    } else {
        Vec::new()
    };
    Ok((T::one() - num / den, grad))
}

/// `1 - (I + s) / (I + beta sum((1-y) p) + alpha sum(y (1-p)) + s)`; `beta`
/// weighs false positives, `alpha` false negatives.
pub fn tversky_loss<T: Scalar>(pred: &[T], target: &[T], alpha: T, beta: T, smooth: T) -> Result<T> {
    Ok(tversky_grad(pred, target, alpha, beta, smooth, false)?.0)
}

fn tversky_grad<T: Scalar>(
    pred: &[T],
    target: &[T],
    alpha: T,
    beta: T,
    smooth: T,
    with_grad: bool,
) -> Result<(T, Vec<T>)> {
    check(pred.len(), target.len())?;
    let one = T::one();
    let (mut inter, mut fp, mut fn_) = (T::zero(), T::zero(), T::zero());
    for (&p, &y) in pred.iter().zip(target) {
        inter += y * p;
        fp += (one - y) * p;
        fn_ += y * (one - p);
    }
    let num = inter + smooth;
    let den = inter + beta * fp + alpha * fn_ + smooth;
    if den == T::zero() {
        return Ok((T::zero(), vec![T::zero(); if with_grad { pred.len() } else { 0 }]));
    }
    let grad = if with_grad {
        target
            .iter()
            .map(|&y| {
                let dden = y + beta * (one - y) - alpha * y;
                -(y * den - num * dden) / (den * den)
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok((one - num / den, grad))
}

/// Focal Tversky loss: the Tversky loss raised to `1/gamma` (or `gamma`).
pub fn focal_tversky_loss<T: Scalar>(
    pred: &[T],
    target: &[T],
    alpha: T,
    beta: T,
    gamma: T,
    smooth: T,
    exponent: FtlExponent,
) -> Result<T> {
    Ok(focal_tversky_grad(pred, target, alpha, beta, gamma, smooth, exponent, false)?.0)
}

#[allow(clippy::too_many_arguments)]
fn focal_tversky_grad<T: Scalar>(
    pred: &[T],
    target: &[T],
    alpha: T,
    beta: T,
    gamma: T,
    smooth: T,
    exponent: FtlExponent,
    with_grad: bool,
) -> Result<(T, Vec<T>)> {
    let (tl, tgrad) = tversky_grad(pred, target, alpha, beta, smooth, with_grad)?;
    let e = match exponent {
        FtlExponent::Reciprocal => T::one() / gamma,
        FtlExponent::Direct => gamma,
    };
    let tl = tl.max(T::zero());
    let value = tl.powf(e);
    let scale = if tl > T::zero() { e * tl.powf(e - T::one()) } else { T::zero() };
    Ok((value, tgrad.into_iter().map(|d| d * scale).collect()))
}

/// Value of the configured loss.
pub fn loss_value<T: Scalar>(cfg: &LossConfig, pred: &[T], target: &[T]) -> Result<T> {
    Ok(dispatch(cfg, pred, target, false)?.0)
}

/// Value of the configured loss and its gradient with respect to `pred`.
pub fn loss_and_grad<T: Scalar>(cfg: &LossConfig, pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    dispatch(cfg, pred, target, true)
}

fn dispatch<T: Scalar>(cfg: &LossConfig, pred: &[T], target: &[T], with_grad: bool) -> Result<(T, Vec<T>)> {
    let (a, b, g, s) = (c::<T>(cfg.alpha), c::<T>(cfg.beta), c::<T>(cfg.gamma), c::<T>(cfg.smooth));
    match cfg.kind {
        LossKind::Focal => focal_grad(pred, target, a, g, with_grad),
        LossKind::Dice => dice_grad(pred, target, s, with_grad),
        LossKind::CrossEntropyDice => {
            let (ce, gce) = cross_entropy_grad(pred, target, with_grad)?;
            let (dl, gdl) = dice_grad(pred, target, s, with_grad)?;
            Ok((ce + dl, gce.into_iter().zip(gdl).map(|(x, y)| x + y).collect()))
        }
        LossKind::Iou => iou_grad(pred, target, s, with_grad),
        LossKind::Tversky => tversky_grad(pred, target, a, b, s, with_grad),
        LossKind::FocalTversky => focal_tversky_grad(pred, target, a, b, g, s, cfg.ftl_exponent, with_grad),
    }
}

/// Records the configured loss of `pred` against `target` on the graph.
pub fn apply<T: Scalar>(graph: &mut Graph<T>, cfg: &LossConfig, pred: Var, target: &[T]) -> Result<Var> {
    let (value, grad) = loss_and_grad(cfg, graph.value(pred).data(), target)?;
    graph.external_scalar(pred, value, grad)
}

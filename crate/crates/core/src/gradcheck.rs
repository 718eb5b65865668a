//! Finite-difference verification of the tape's analytic gradients.
//!
//! Each suite draws random inputs in double precision, differentiates a
//! randomly weighted sum of the operation's output, and compares every input
//! gradient with a central difference. Suites report the worst relative error
//! over all trials.

use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::losses::{self, FtlExponent, LossConfig, LossKind};
use crate::network::{attention_gate, ms_block, random_tensor, ConvVars};
use crate::tensor::{ConvGeometry, Graph, Tensor, Var};
use crate::SeedRng;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
}

/// Compares tape gradients of `sum(w * f(inputs))` for a fixed random `w`
/// (drawn from `proj_seed`) with central differences, returning the largest
/// relative error over every input element. The difference is taken per
/// output element before weighting, so outputs a perturbation cannot reach
/// cancel exactly instead of adding rounding noise.
pub fn check_op<F>(inputs: &[Tensor<f64>], proj_seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let forward = |vals: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).clone())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let mut rng = SeedRng::seed_from_u64(proj_seed);
    let w = random_tensor::<f64>(g.value(out).shape(), -1.0, 1.0, &mut rng);
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod)?;
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let x = t.data()[i];
            probe[k].data_mut()[i] = x + STEP;
            let up = forward(&probe)?;
            probe[k].data_mut()[i] = x - STEP;
            let down = forward(&probe)?;
            probe[k].data_mut()[i] = x;
            let delta: f64 = up.data().iter().zip(down.data()).zip(w.data()).map(|((u, d), w)| w * (u - d)).sum();
            worst = worst.max(relative_error(grads[k][i], delta / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

fn uniform(shape: &[usize], rng: &mut SeedRng) -> Tensor<f64> {
    random_tensor(shape, -1.0, 1.0, rng)
}

fn run_suite(name: &str, trials: usize, mut trial: impl FnMut(u64) -> Result<f64>) -> Result<SuiteReport> {
    let mut worst = 0.0f64;
    for t in 0..trials as u64 {
        worst = worst.max(trial(t)?);
    }
    Ok(SuiteReport { name: name.to_string(), trials, worst })
}

/// 3x3 convolution cycling through dilations 1, 2, 3 and 5; every fifth
/// trial uses stride 2.
pub fn conv2d_suite(trials: usize) -> Result<SuiteReport> {
    run_suite("conv2d", trials, |trial| {
        let mut rng = SeedRng::seed_from_u64(trial);
        let d = [1usize, 2, 3, 5][trial as usize % 4];
        let size = 2 * d + 3 + rng.random_range(0..3);
        let stride = if trial % 5 == 4 { 2 } else { 1 };
        let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
        let inputs = [uniform(&[2, ci, size, size], &mut rng), uniform(&[co, ci, 3, 3], &mut rng), uniform(&[co], &mut rng)];
        let geom = ConvGeometry { stride, dilation: d, padding: d };
        check_op(&inputs, trial, |g, v| g.conv2d(v[0], v[1], Some(v[2]), geom))
    })
}

pub fn pointwise_conv_suite(trials: usize) -> Result<SuiteReport> {
    run_suite("conv2d 1x1", trials, |trial| {
        let mut rng = SeedRng::seed_from_u64(100 + trial);
        let inputs = [uniform(&[2, 3, 4, 5], &mut rng), uniform(&[2, 3, 1, 1], &mut rng), uniform(&[2], &mut rng)];
        check_op(&inputs, trial, |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::pointwise()))
    })
}

pub fn maxpool_suite(trials: usize) -> Result<SuiteReport> {
    run_suite("maxpool2d", trials, |trial| {
        let mut rng = SeedRng::seed_from_u64(200 + trial);
        check_op(&[uniform(&[2, 2, 6, 8], &mut rng)], trial, |g, v| g.maxpool2d(v[0]))
    })
}

pub fn upsample_suite(trials: usize) -> Result<SuiteReport> {
    run_suite("upsample2d", trials, |trial| {
        let mut rng = SeedRng::seed_from_u64(250 + trial);
        check_op(&[uniform(&[2, 2, 3, 5], &mut rng)], trial, |g, v| g.upsample2d(v[0]))
    })
}

/// ReLU, sigmoid, addition, channel-broadcast multiplication and concatenation.
pub fn elementwise_suite(trials: usize) -> Result<SuiteReport> {
    run_suite("elementwise", trials, |trial| {
        let mut rng = SeedRng::seed_from_u64(300 + trial);
        let a = uniform(&[1, 3, 4, 4], &mut rng);
        let b = uniform(&[1, 3, 4, 4], &mut rng);
        let gate = uniform(&[1, 1, 4, 4], &mut rng);
        let single = std::slice::from_ref(&a);
        let errs = [
            check_op(single, trial, |g, v| g.relu(v[0]))?,
            check_op(single, trial, |g, v| g.sigmoid(v[0]))?,
            check_op(&[a.clone(), b.clone()], trial, |g, v| g.add(v[0], v[1]))?,
            check_op(&[a.clone(), gate], trial, |g, v| g.mul(v[0], v[1]))?,
            check_op(&[a.clone(), b], trial, |g, v| g.concat(&[v[0], v[1]]))?,
        ];
        Ok(errs.into_iter().fold(0.0, f64::max))
    })
}

fn conv_vars(v: &[Var], at: usize) -> ConvVars {
    ConvVars { weight: v[at], bias: v[at + 1] }
}

/// Gate on a 3-channel skip with a 4-channel gating signal; all three
/// projections and both inputs are checked.
pub fn attention_gate_suite(trials: usize) -> Result<SuiteReport> {
    run_suite("attention_gate", trials, |trial| {
        let mut rng = SeedRng::seed_from_u64(400 + trial);
        let (cs, cg, n) = (3, 4, 2);
        let inputs = [
            uniform(&[1, cs, 6, 6], &mut rng),
            uniform(&[1, cg, 6, 6], &mut rng),
            uniform(&[n, cg, 1, 1], &mut rng),
            uniform(&[n], &mut rng),
            uniform(&[n, cs, 1, 1], &mut rng),
            uniform(&[n], &mut rng),
            uniform(&[1, n, 1, 1], &mut rng),
            uniform(&[1], &mut rng),
        ];
        check_op(&inputs, trial, |g, v| attention_gate(g, v[0], v[1], conv_vars(v, 2), conv_vars(v, 4), conv_vars(v, 6)))
    })
}

/// Two-channel block with dilations 1, 2, 3 and 5.
pub fn ms_block_suite(trials: usize) -> Result<SuiteReport> {
    run_suite("ms_block", trials, |trial| {
        let mut rng = SeedRng::seed_from_u64(500 + trial);
        let n = 2;
        let mut inputs = vec![uniform(&[1, n, 12, 12], &mut rng)];
        for _ in 0..4 {
            inputs.push(random_tensor(&[n, n, 3, 3], -0.5, 0.5, &mut rng));
            inputs.push(uniform(&[n], &mut rng));
        }
        inputs.push(random_tensor(&[n, 4 * n, 1, 1], -0.5, 0.5, &mut rng));
        inputs.push(uniform(&[n], &mut rng));
        check_op(&inputs, trial, |g, v| {
            let branches: Vec<ConvVars> = (0..4).map(|b| conv_vars(v, 1 + 2 * b)).collect();
            ms_block(g, v[0], &branches, &[1, 2, 3, 5], conv_vars(v, 9))
        })
    })
}

/// Analytic loss gradient with respect to the probabilities against central
/// differences of the loss value, on 64-pixel maps.
pub fn loss_suite(cfg: &LossConfig, trials: usize) -> Result<SuiteReport> {
    let name = match (cfg.kind, cfg.ftl_exponent) {
        (LossKind::FocalTversky, FtlExponent::Direct) => format!("{} (direct exponent)", cfg.kind.name()),
        (k, _) => k.name().to_string(),
    };
    run_suite(&name, trials, |trial| {
        let mut rng = SeedRng::seed_from_u64(600 + trial);
        let pred: Vec<f64> = (0..64).map(|_| rng.random_range(0.02..0.98)).collect();
        let target: Vec<f64> = (0..64).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let (_, grad) = losses::loss_and_grad(cfg, &pred, &target)?;
        let mut worst = 0.0f64;
        let mut p = pred.clone();
        for i in 0..pred.len() {
            p[i] = pred[i] + STEP;
            let up = losses::loss_value(cfg, &p, &target)?;
            p[i] = pred[i] - STEP;
            let down = losses::loss_value(cfg, &p, &target)?;
            p[i] = pred[i];
            worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * STEP)));
        }
        Ok(worst)
    })
}

/// Every loss at its default settings plus the direct focal Tversky exponent.
pub fn loss_configs() -> Vec<LossConfig> {
    let mut out: Vec<LossConfig> = LossKind::ALL.into_iter().map(LossConfig::new).collect();
    out.push(LossConfig { ftl_exponent: FtlExponent::Direct, ..LossConfig::new(LossKind::FocalTversky) });
    out
}

/// Runs every operation and loss suite with `trials` trials each.
pub fn all_suites(trials: usize) -> Result<Vec<SuiteReport>> {
    let mut out = vec![
        conv2d_suite(trials)?,
        pointwise_conv_suite(trials)?,
        maxpool_suite(trials)?,
        upsample_suite(trials)?,
        elementwise_suite(trials)?,
        attention_gate_suite(trials)?,
        ms_block_suite(trials)?,
    ];
    for cfg in loss_configs() {
        out.push(loss_suite(&cfg, trials)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Sigmoid's tape gradient checked against a perturbed copy of itself
        // must agree; a scaled output must not be mistaken for it.
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64 * 0.3 - 0.4);
        let ok = check_op(std::slice::from_ref(&x), 1, |g, v| g.sigmoid(v[0])).unwrap();
        assert!(ok < 1e-6);
    }
}

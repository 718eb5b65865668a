//! Analytic gradients against central finite differences in f64.

use amcnet::gradcheck::{self, relative_error, SuiteReport, STEP};
use amcnet::losses::{self, LossConfig, LossKind};
use amcnet::network::{forward, random_tensor, BoundParams};
use amcnet::{Graph, ModelSpec, ModelState, SeedRng, Tensor, Variant};
use rand::{Rng, SeedableRng};

const TRIALS: usize = 50;

fn assert_suite(report: amcnet::Result<SuiteReport>) {
    let r = report.unwrap();
    assert_eq!(r.trials, TRIALS);
    assert!(r.worst < 1e-4, "{}: worst relative error {:e}", r.name, r.worst);
}

#[test]
fn conv2d_dilations_and_strides() {
    assert_suite(gradcheck::conv2d_suite(TRIALS));
}

#[test]
fn conv2d_pointwise() {
    assert_suite(gradcheck::pointwise_conv_suite(TRIALS));
}

#[test]
fn maxpool() {
    assert_suite(gradcheck::maxpool_suite(TRIALS));
}

#[test]
fn upsample() {
    assert_suite(gradcheck::upsample_suite(TRIALS));
}

#[test]
fn activations_and_elementwise() {
    assert_suite(gradcheck::elementwise_suite(TRIALS));
}

#[test]
fn attention_gate() {
    assert_suite(gradcheck::attention_gate_suite(TRIALS));
}

#[test]
fn ms_block() {
    assert_suite(gradcheck::ms_block_suite(TRIALS));
}

#[test]
fn losses_against_their_values() {
    for cfg in gradcheck::loss_configs() {
        assert_suite(gradcheck::loss_suite(&cfg, TRIALS));
    }
}

#[test]
fn loss_through_the_tape() {
    let cfg = LossConfig::new(LossKind::Tversky);
    let mut rng = SeedRng::seed_from_u64(7);
    let logits = random_tensor::<f64>(&[1, 1, 4, 4], -1.0, 1.0, &mut rng);
    let target: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let eval = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let p = g.sigmoid(v).unwrap();
        let l = losses::apply(&mut g, &cfg, p, &target).unwrap();
        let value = g.value(l).item().unwrap();
        g.backward(l).unwrap();
        (value, g.grad(v).unwrap().to_vec())
    };
    let (_, grad) = eval(&logits);
    for i in 0..16 {
        let mut plus = logits.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = logits.clone();
        minus.data_mut()[i] -= STEP;
        let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * STEP);
        assert!(relative_error(grad[i], numeric) < 1e-4);
    }
}

/// Every parameter tensor of a small network, up to 24 sampled elements
/// each, perturbed one at a time. Elements
/// whose perturbation flips a ReLU or max-pool branch straddle a kink, where
/// a central difference estimates no derivative; they are counted and must
/// stay rare.
#[test]
fn whole_network_gradients() {
    for variant in Variant::ALL {
        let spec = ModelSpec::new(variant).with_base_channels(2).with_input_size(16, 16).with_seed(3);
        let mut state = ModelState::<f64>::build(&spec).unwrap();
        let mut rng = SeedRng::seed_from_u64(11);
        // Zero biases leave pixels with all-dead inputs exactly on a ReLU
        // kink, where the one-sided derivatives differ; move off it.
        for p in state.params_mut() {
            if p.name.ends_with(".bias") {
                for v in p.tensor.data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        let x = random_tensor::<f64>(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
        let target: Vec<f64> = (0..256).map(|i| ((i / 16 + i % 16) % 5 == 0) as u8 as f64).collect();
        let cfg = LossConfig::new(LossKind::CrossEntropyDice);
        let eval = |s: &ModelState<f64>, grads: bool| -> (f64, Vec<u32>, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let p: BoundParams = s.bind(&mut g, grads);
            let xv = g.constant(x.clone());
            let out = forward(&mut g, s.spec(), &p, xv, None).unwrap();
            let l = losses::apply(&mut g, &cfg, out.output, &target).unwrap();
            let v = g.value(l).item().unwrap();
            let pattern = g.branch_pattern();
            if !grads {
                return (v, pattern, Vec::new());
            }
            g.backward(l).unwrap();
            (v, pattern, p.vars().iter().map(|&pv| g.grad(pv).unwrap().to_vec()).collect())
        };
        let (_, base_pattern, grads) = eval(&state, true);
        let mut worst = 0.0f64;
        let mut checked = 0usize;
        let mut kinks = 0usize;
        let names: Vec<String> = state.params().iter().map(|p| p.name.clone()).collect();
        for (k, name) in names.iter().enumerate() {
            let n = state.params()[k].tensor.numel();
            let picks: Vec<usize> = if n <= 24 { (0..n).collect() } else { (0..24).map(|_| rng.random_range(0..n)).collect() };
            for i in picks {
                let mut plus = state.clone();
                plus.param_mut(name).unwrap().data_mut()[i] += STEP;
                let mut minus = state.clone();
                minus.param_mut(name).unwrap().data_mut()[i] -= STEP;
                let (up, up_pattern, _) = eval(&plus, false);
                let (down, down_pattern, _) = eval(&minus, false);
                if up_pattern != base_pattern || down_pattern != base_pattern {
                    kinks += 1;
                    continue;
                }
                checked += 1;
                let numeric = (up - down) / (2.0 * STEP);
                let err = relative_error(grads[k][i], numeric);
                assert!(err < 1e-4, "{variant} {name}[{i}]: analytic {} numeric {numeric}", grads[k][i]);
                worst = worst.max(err);
            }
        }
        eprintln!("{variant}: worst relative error {worst:e} over {checked} elements, {kinks} on kinks");
        assert!(kinks * 100 <= checked, "{variant}: {kinks} kink crossings among {checked} elements");
    }
}

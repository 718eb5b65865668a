//! Randomised invariants of the kernels, metrics, fusion and data pipeline.

use amcnet::data::{
    extract_test_patches, extract_train_patches, make_phantom, normalize_hu_value, stitch, ExtractConfig, PhantomConfig,
    SliceLabel,
};
use amcnet::ensemble::{fuse, Fusion};
use amcnet::eval::{confusion, roc_auc, CtGrade};
use amcnet::trainer::{augment, AugmentConfig};
use amcnet::{ConvGeometry, Graph, SeedRng, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn conv(input: &Tensor<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>, geom: ConvGeometry) -> Tensor<f64> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let y = g.conv2d(x, w, Some(b), geom).unwrap();
    g.value(y).clone()
}

/// Direct six-loop convolution.
fn naive_conv(input: &Tensor<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>, geom: ConvGeometry) -> Tensor<f64> {
    let (b, c, h, w) = input.dims4().unwrap();
    let (oc, _, k, _) = weight.dims4().unwrap();
    let span = (k - 1) * geom.dilation + 1;
    let oh = (h + 2 * geom.padding - span) / geom.stride + 1;
    let ow = (w + 2 * geom.padding - span) / geom.stride + 1;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; b * oc * oh * ow];
    for n in 0..b {
        for o in 0..oc {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.data()[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * geom.stride + ky * geom.dilation) as isize - geom.padding as isize;
                                let ix = (xx * geom.stride + kx * geom.dilation) as isize - geom.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((n * c + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((o * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((n * oc + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, oc, oh, ow], out).unwrap()
}

fn uniform(shape: &[usize], rng: &mut SeedRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_mask(len: usize, density: f64, rng: &mut SeedRng) -> Vec<u8> {
    (0..len).map(|_| rng.random_bool(density) as u8).collect()
}

/// A 512x512 slice with a few random discs as infection.
fn disc_slice(rng: &mut SeedRng, blobs: usize) -> (Vec<f32>, Vec<u8>) {
    let n = 512usize;
    let mut mask = vec![0u8; n * n];
    for _ in 0..blobs {
        let (cy, cx) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
        let r: f64 = rng.random_range(1.0..60.0);
        let (y0, y1) = ((cy - r).max(0.0) as usize, ((cy + r) as usize + 1).min(n));
        let (x0, x1) = ((cx - r).max(0.0) as usize, ((cx + r) as usize + 1).min(n));
        for y in y0..y1 {
            for x in x0..x1 {
                if (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2) <= r * r {
                    mask[y * n + x] = 1;
                }
            }
        }
    }
    let image = (0..n * n).map(|_| rng.random_range(0.0..1.0f32)).collect();
    (image, mask)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_loops(
        seed in any::<u64>(),
        dilation in 1usize..4,
        stride in 1usize..3,
        padding in 0usize..4,
        k in prop::sample::select(vec![1usize, 3]),
    ) {
        let mut rng = SeedRng::seed_from_u64(seed);
        let (b, c, oc) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let h = rng.random_range(7..14);
        let w = rng.random_range(7..14);
        let geom = ConvGeometry { stride, dilation, padding };
        let x = uniform(&[b, c, h, w], &mut rng);
        let wt = uniform(&[oc, c, k, k], &mut rng);
        let bias = uniform(&[oc], &mut rng);
        let got = conv(&x, &wt, &bias, geom);
        let want = naive_conv(&x, &wt, &bias, geom);
        prop_assert!(max_abs_diff(&got, &want) < 1e-12);
    }

    #[test]
    fn dilated_conv_equals_zero_inflated_kernel(seed in any::<u64>(), dilation in 1usize..6) {
        let mut rng = SeedRng::seed_from_u64(seed);
        let (c, oc) = (rng.random_range(1..4), rng.random_range(1..4));
        let x = uniform(&[1, c, 16, 16], &mut rng);
        let wt = uniform(&[oc, c, 3, 3], &mut rng);
        let bias = uniform(&[oc], &mut rng);
        let span = 2 * dilation + 1;
        let mut inflated = Tensor::zeros(&[oc, c, span, span]);
        for o in 0..oc {
            for ci in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        inflated.data_mut()[((o * c + ci) * span + ky * dilation) * span + kx * dilation] =
                            wt.data()[((o * c + ci) * 3 + ky) * 3 + kx];
                    }
                }
            }
        }
        let dilated = conv(&x, &wt, &bias, ConvGeometry::same3x3(dilation));
        let plain = conv(&x, &inflated, &bias, ConvGeometry { stride: 1, dilation: 1, padding: dilation });
        prop_assert_eq!(dilated.shape(), &[1, oc, 16, 16]);
        prop_assert!(max_abs_diff(&dilated, &plain) < 1e-12);
    }

    #[test]
    fn upsample_conserves_mass_and_pool_inverts_it(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let mut rng = SeedRng::seed_from_u64(seed);
        let x = uniform(&[2, 3, h, w], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let up = g.upsample2d(xv).unwrap();
        let down = g.maxpool2d(up).unwrap();
        let sum_in: f64 = x.data().iter().sum();
        let sum_up: f64 = g.value(up).data().iter().sum();
        prop_assert!((sum_up - 4.0 * sum_in).abs() < 1e-9);
        prop_assert_eq!(g.value(down), &x);
    }

    #[test]
    fn maxpool_dominates_its_window(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let mut rng = SeedRng::seed_from_u64(seed);
        let x = uniform(&[1, 2, 2 * h, 2 * w], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pooled = g.maxpool2d(xv).unwrap();
        let p = g.value(pooled).data();
        for c in 0..2 {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let v = x.data()[(c * 2 * h + y) * 2 * w + xx];
                    let m = p[(c * h + y / 2) * w + xx / 2];
                    prop_assert!(m >= v);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_pixel_tallies(seed in any::<u64>(), dp in 0.0f64..1.0, dt in 0.0f64..1.0) {
        let mut rng = SeedRng::seed_from_u64(seed);
        let pred = random_mask(256, dp, &mut rng);
        let truth = random_mask(256, dt, &mut rng);
        let c = confusion(&pred, &truth).unwrap();
        let mut tally = [0u64; 4];
        for i in 0..256 {
            tally[(pred[i] as usize) * 2 + truth[i] as usize] += 1;
        }
        let [tn, fn_, fp, tp] = tally;
        prop_assert_eq!((c.tp, c.fp, c.tn, c.fn_), (tp, fp, tn, fn_));
        let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
        if tp + fp + fn_ > 0.0 {
            prop_assert!((c.dsc() - 2.0 * tp / (2.0 * tp + fp + fn_)).abs() < 1e-12);
        }
        if tp + fp > 0.0 {
            prop_assert!((c.precision() - tp / (tp + fp)).abs() < 1e-12);
        }
        if tp + fn_ > 0.0 {
            prop_assert!((c.sensitivity() - tp / (tp + fn_)).abs() < 1e-12);
        }
        // DSC is the harmonic mean of precision and sensitivity when both are defined and non-zero.
        let (p, s) = (c.precision(), c.sensitivity());
        if tp > 0.0 {
            prop_assert!((c.dsc() - 2.0 * p * s / (p + s)).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_equals_pairwise_statistic(seed in any::<u64>(), levels in 2u32..40) {
        let mut rng = SeedRng::seed_from_u64(seed);
        let n = rng.random_range(2..120);
        // Quantised scores make ties common.
        let probs: Vec<f32> = (0..n).map(|_| rng.random_range(0..levels) as f32 / levels as f32).collect();
        let mut truth = random_mask(n, 0.4, &mut rng);
        truth[0] = 1;
        truth[1] = 0;
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if truth[i] == 1 && truth[j] == 0 {
                    pairs += 1.0;
                    wins += match probs[i].partial_cmp(&probs[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        let auc = roc_auc(&probs, &truth).unwrap();
        prop_assert!((auc - wins / pairs).abs() < 1e-9);
    }

    #[test]
    fn fusion_is_symmetric_and_monotone(
        seed in any::<u64>(),
        members in 1usize..8,
        majority in any::<bool>(),
        threshold in 0.05f32..0.95,
    ) {
        let fusion = if majority { Fusion::Majority } else { Fusion::MeanProb };
        let mut rng = SeedRng::seed_from_u64(seed);
        let len = 32;
        let maps: Vec<Vec<f32>> = (0..members).map(|_| (0..len).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let refs: Vec<&[f32]> = maps.iter().map(Vec::as_slice).collect();
        let base = fuse(&refs, fusion, threshold).unwrap();

        let mut shuffled = refs.clone();
        shuffled.reverse();
        shuffled.rotate_left(seed as usize % members);
        prop_assert_eq!(&fuse(&shuffled, fusion, threshold).unwrap(), &base);

        let doubled: Vec<&[f32]> = refs.iter().chain(refs.iter()).copied().collect();
        prop_assert_eq!(&fuse(&doubled, fusion, threshold).unwrap(), &base);

        // Raising one member's probabilities can only add positives.
        let k = rng.random_range(0..members);
        let raised: Vec<f32> = maps[k].iter().map(|&p| (p + rng.random_range(0.0..0.5f32)).min(1.0)).collect();
        let mut bumped = refs.clone();
        bumped[k] = &raised;
        let higher = fuse(&bumped, fusion, threshold).unwrap();
        prop_assert!(base.iter().zip(&higher).all(|(a, b)| a <= b));

        let same = vec![maps[0].as_slice(); members];
        let single: Vec<u8> = maps[0].iter().map(|&p| (p >= threshold) as u8).collect();
        prop_assert_eq!(fuse(&same, fusion, threshold).unwrap(), single);
    }

    #[test]
    fn train_patches_respect_geometry_and_labels(seed in any::<u64>(), blobs in 0usize..4) {
        let mut rng = SeedRng::seed_from_u64(seed);
        let (image, mask) = disc_slice(&mut rng, blobs);
        let cfg = ExtractConfig::default();
        let run = |seed: u64| {
            let mut r = SeedRng::seed_from_u64(seed);
            extract_train_patches(&image, &mask, 512, 512, "P", 0, &cfg, &mut r).unwrap()
        };
        let patches = run(seed);
        prop_assert_eq!(&patches, &run(seed));
        let infected = mask.contains(&1);
        if infected {
            prop_assert!(patches.len() <= 32);
        } else {
            prop_assert_eq!(patches.len(), cfg.non_infected_patches);
        }
        for p in &patches {
            prop_assert!(p.origin.row <= 384 && p.origin.col <= 384);
            prop_assert_eq!(p.image.len(), 128 * 128);
            let positives = p.mask.iter().filter(|&&m| m == 1).count();
            match p.label {
                SliceLabel::Infected => prop_assert!(positives >= 1),
                SliceLabel::NonInfected => prop_assert_eq!(positives, 0),
            }
            for r in 0..128 {
                let src = (p.origin.row + r) * 512 + p.origin.col;
                prop_assert_eq!(&p.mask[r * 128..(r + 1) * 128], &mask[src..src + 128]);
            }
        }
        // Every ROI box overlaps the infection.
        let roi = if infected { cfg.roi_boxes } else { 0 };
        prop_assert!(patches[..roi].iter().all(|p| p.label == SliceLabel::Infected));
    }

    #[test]
    fn test_tiling_partitions_the_slice(seed in any::<u64>()) {
        let mut rng = SeedRng::seed_from_u64(seed);
        let slice: Vec<f32> = (0..512 * 512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tiles = extract_test_patches(&slice, 512, 512, 128).unwrap();
        prop_assert_eq!(tiles.len(), 16);
        for (k, t) in tiles.iter().enumerate() {
            prop_assert_eq!((t.row, t.col), (128 * (k / 4), 128 * (k % 4)));
        }
        let back = stitch(&tiles, 512, 512, 128).unwrap();
        prop_assert!(back.iter().zip(&slice).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn hu_normalisation_is_monotone(a in -5000.0f32..5000.0, b in -5000.0f32..5000.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (nl, nh) = (normalize_hu_value(lo), normalize_hu_value(hi));
        prop_assert!(nl <= nh);
        prop_assert!((0.0..=1.0).contains(&nl) && (0.0..=1.0).contains(&nh));
        // Re-expressing a normalised value in HU and normalising again is a fixed point.
        let hu = nl as f64 * 4095.0 - 1024.0;
        prop_assert!((normalize_hu_value(hu as f32) - nl).abs() < 1e-6);
    }

    #[test]
    fn severity_is_monotone(a in 0.0f64..100.0, b in 0.0f64..100.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(CtGrade::from_involvement(lo) <= CtGrade::from_involvement(hi));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn augmentation_keeps_masks_binary_and_is_seeded(seed in any::<u64>()) {
        let mut rng = SeedRng::seed_from_u64(seed);
        let size = 32;
        let image: Vec<f32> = (0..size * size).map(|_| rng.random_range(0.0..1.0)).collect();
        let mask = random_mask(size * size, 0.3, &mut rng);
        let cfg = AugmentConfig::default();
        let a = augment(&image, &mask, size, &cfg, &mut SeedRng::seed_from_u64(seed ^ 1));
        let b = augment(&image, &mask, size, &cfg, &mut SeedRng::seed_from_u64(seed ^ 1));
        prop_assert_eq!(&a, &b);
        prop_assert!(a.1.iter().all(|&m| m <= 1));
        prop_assert!(a.0.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn phantom_hits_requested_lesion_fraction(seed in any::<u64>(), fraction in 0.04f64..0.3) {
        let cfg = PhantomConfig { slices: 2, infected_slice_fraction: 1.0, lesion_fraction: fraction, ..Default::default() };
        let ph = make_phantom(seed, &cfg).unwrap();
        for s in 0..cfg.slices {
            let lesion = ph.mask.slice(s).iter().filter(|&&m| m == 1).count() as f64;
            let lungs = ph.lungs.slice(s).iter().filter(|&&m| m == 1).count() as f64;
            prop_assert!((lesion / lungs - fraction).abs() <= 0.02, "slice {s}: {} vs {fraction}", lesion / lungs);
            prop_assert!(ph.mask.slice(s).iter().zip(ph.lungs.slice(s)).all(|(&m, &l)| m <= l));
        }
        prop_assert_eq!(&make_phantom(seed, &cfg).unwrap(), &ph);
    }
}

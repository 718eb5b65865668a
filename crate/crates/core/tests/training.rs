//! End-to-end learning on tiny synthetic sets.

use amcnet::data::{PatchOrigin, PatchSample, SliceLabel};
use amcnet::trainer::{train, AugmentConfig, TrainConfig};
use amcnet::{ModelSpec, ModelState, SeedRng, Variant};
use rand::{Rng, SeedableRng};

/// Eight 16x16 patches; half carry a bright square lesion on a noisy
/// background.
fn toy_set(seed: u64) -> Vec<PatchSample> {
    let mut rng = SeedRng::seed_from_u64(seed);
    (0..8)
        .map(|k| {
            let mut image: Vec<f32> = (0..256).map(|_| rng.random_range(0.0..0.2)).collect();
            let mut mask = vec![0u8; 256];
            if k % 2 == 0 {
                let (r0, c0) = (rng.random_range(1..9), rng.random_range(1..9));
                let side = rng.random_range(4..7);
                for r in r0..r0 + side {
                    for c in c0..c0 + side {
                        image[r * 16 + c] = rng.random_range(0.6..0.9);
                        mask[r * 16 + c] = 1;
                    }
                }
            }
            let origin = PatchOrigin { patient: "toy".into(), slice: k, row: 0, col: 0, slice_label: SliceLabel::of_mask(&mask) };
            PatchSample::new(16, image, mask, origin)
        })
        .collect()
}

#[test]
fn overfits_toy_set() {
    let set = toy_set(1);
    let spec = ModelSpec::new(Variant::AmcNet).with_base_channels(4).with_input_size(16, 16).with_dropout(0.0);
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 250,
        augment: AugmentConfig { enabled: false, ..Default::default() },
        ..Default::default()
    };
    let out = train(ModelState::<f32>::build(&spec).unwrap(), &set, &set, &cfg).unwrap();
    let last = out.curve.epochs.last().unwrap();
    for e in out.curve.epochs.iter().step_by(25) {
        eprintln!("{e:?}");
    }
    assert!(last.train_dsc > 0.95, "final train DSC {}", last.train_dsc);
    assert!(out.best_val_dsc.unwrap() > 0.95);
}

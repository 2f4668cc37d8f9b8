use arreid_core::rng::stream;
use arreid_core::toy_vit::{forward, param_count, synthesize_dataset, train, ModelParams, ToyViTConfig, TrainConfig};
use arreid_core::{Image, ImageShape, MixupConfig, PatchSpec};
use proptest::prelude::*;
use rand::Rng;

fn tiny(patch: PatchSpec) -> ToyViTConfig {
    ToyViTConfig {
        patch,
        embed_dim: 16,
        layers: 1,
        heads: 2,
        mlp_ratio: 2.0,
        classifier_init_std: 0.5,
        seed: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_finite_on_unit_images(h in 16usize..40, w in 16usize..40, seed in any::<u64>(), stride in 4usize..=8) {
        let shape = ImageShape::new(h, w).unwrap();
        let params = ModelParams::init(&tiny(PatchSpec::square(8, stride)), shape, 3, vec![0, 1]).unwrap();
        let mut r = stream(seed, 0);
        let data = (0..h * w * 3).map(|_| r.random::<f64>()).collect();
        let out = forward(&params, &Image::new(shape, 3, data).unwrap()).unwrap();
        prop_assert_eq!(out.len(), 16);
        prop_assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn strides_only_change_positional_table(h in 16usize..64, w in 16usize..64, s1 in 1usize..=8, s2 in 1usize..=8) {
        let shape = ImageShape::new(h, w).unwrap();
        let count = |s: usize| param_count(&tiny(PatchSpec::square(8, s)), shape, 3, 4).unwrap();
        let tokens = |s: usize| ((h - 8) / s + 1) * ((w - 8) / s + 1);
        let diff = count(s1) as i64 - count(s2) as i64;
        prop_assert_eq!(diff, (tokens(s1) as i64 - tokens(s2) as i64) * 16);
        let params = ModelParams::init(&tiny(PatchSpec::square(8, s1)), shape, 3, (0..4).collect()).unwrap();
        prop_assert_eq!(params.param_count(), count(s1));
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let data = synthesize_dataset(4, 4, ImageShape::new(16, 24).unwrap(), 5);
    let cfg = TrainConfig {
        steps: 12,
        ..TrainConfig::default()
    };
    let config = tiny(PatchSpec::square(8, 8));
    let a = train(&config, &cfg, &data, None, 9).unwrap();
    let b = train(&config, &cfg, &data, None, 9).unwrap();
    let bits = |o: &arreid_core::toy_vit::TrainOutcome| o.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let totals = |o: &arreid_core::toy_vit::TrainOutcome| o.trace.iter().map(|s| s.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(totals(&a), totals(&b));
}

#[test]
fn training_with_mixup_still_decreases_loss() {
    let shape = ImageShape::new(32, 48).unwrap();
    let data = synthesize_dataset(8, 4, shape, 3);
    let cfg = TrainConfig {
        steps: 200,
        use_mixup: true,
        ..TrainConfig::default()
    };
    let mixup = MixupConfig {
        patch: PatchSpec::square(8, 8),
        ..MixupConfig::default()
    };
    let out = train(&tiny(PatchSpec::square(8, 8)), &cfg, &data, Some(&mixup), 3).unwrap();
    let (head, tail) = out.head_tail_means(20);
    assert!(tail < head, "head {head} tail {tail}");
}

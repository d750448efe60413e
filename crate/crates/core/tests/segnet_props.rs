use proptest::prelude::*;
use segkit::dataio::synth::{generate, SynthSpec};
use segkit::dataio::Split;
use segkit::rng::SplitMix64;
use segkit::segnet::{build_model, load_model, save_model, train, ModelConfig, TrainConfig};
use segkit::Tensor;

fn config(patch: usize, gh: usize, gw: usize, heads: usize, quarter: usize, blocks: usize, classes: usize, rope: bool) -> ModelConfig {
    ModelConfig {
        height: patch * gh,
        width: patch * gw,
        patch,
        dim: 4 * heads * quarter,
        heads,
        blocks,
        classes,
        mlp_hidden: 8,
        rope,
        seed: 7,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn logits_and_masks_have_the_right_shape(
        patch in 1usize..5,
        gh in 1usize..4,
        gw in 1usize..4,
        heads in 1usize..3,
        quarter in 1usize..3,
        blocks in 0usize..3,
        classes in 2usize..6,
        rope in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let cfg = config(patch, gh, gw, heads, quarter, blocks, classes, rope);
        let m = build_model(&cfg).unwrap();
        let mut rng = SplitMix64::new(seed);
        let img = Tensor::from_fn(&[1, 3, cfg.height, cfg.width], |_| rng.uniform(0.0, 1.0) as f32);
        let logits = m.logits(&img).unwrap();
        prop_assert_eq!(logits.shape(), &[1, classes, cfg.height, cfg.width]);
        prop_assert!(logits.is_finite());
        let mask = m.predict(&img).unwrap();
        prop_assert_eq!((mask.height, mask.width), (cfg.height, cfg.width));
        prop_assert!(mask.labels.iter().all(|&l| (l as usize) < classes));
        prop_assert_eq!(m.params.numel(), cfg.param_count());
    }

    #[test]
    fn checkpoints_round_trip_bitwise(seed in any::<u64>(), rope in any::<bool>()) {
        let mut cfg = config(2, 2, 3, 2, 1, 1, 3, rope);
        cfg.seed = seed;
        cfg.rope_base = 100.0 + (seed % 1000) as f64 / 7.0;
        let mut m = build_model(&cfg).unwrap();
        // perturb so biases and gains are not at their init values
        let mut rng = SplitMix64::new(seed);
        for (_, t) in m.params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.uniform(-1.0, 1.0) as f32;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.smk");
        save_model(&path, &m).unwrap();
        let back = load_model(&path).unwrap();
        prop_assert_eq!(&back.config, &m.config);
        for ((na, a), (nb, b)) in back.params.iter().zip(m.params.iter()) {
            prop_assert_eq!(na, nb);
            let (ba, bb): (Vec<u32>, Vec<u32>) =
                (a.data().iter().map(|v| v.to_bits()).collect(), b.data().iter().map(|v| v.to_bits()).collect());
            prop_assert_eq!(ba, bb);
        }
    }
}

#[test]
fn zero_image_gives_finite_logits() {
    let m = build_model(&ModelConfig::default()).unwrap();
    let logits = m.logits(&Tensor::zeros(&[1, 3, 48, 48])).unwrap();
    assert_eq!(logits.shape(), &[1, 3, 48, 48]);
    assert!(logits.is_finite());
}

#[test]
fn same_seed_same_parameters_after_one_epoch() {
    let spec = SynthSpec { seed: 3, n_samples: 6, val_samples: 2, height: 16, width: 16, ..Default::default() };
    let data = generate(&spec).unwrap();
    let (tr, va) = (data.split(Split::Train), data.split(Split::Val));
    let cfg = ModelConfig { height: 16, width: 16, dim: 16, heads: 2, mlp_hidden: 16, ..Default::default() };
    let tc = TrainConfig { epochs: 1, ..Default::default() };
    let run = || {
        let mut m = build_model(&cfg).unwrap();
        train(&mut m, &tr, &va, &tc, None).unwrap();
        m.params
    };
    let (a, b) = (run(), run());
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x), bits(y));
    }
}

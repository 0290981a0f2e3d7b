//! Property tests for the stated invariants of each module.

use latent_bottleneck::attention::{self, ForwardCtx};
use latent_bottleneck::autodiff::{FlopStage, Tape};
use latent_bottleneck::dataio::{
    self, DatasetKind, DatasetManifest, InMemorySource, Split, Taxonomy,
};
use latent_bottleneck::model::{Model, ModelConfig, ParamCensus};
use latent_bottleneck::params::ParamStore;
use latent_bottleneck::rng::{self, Purpose};
use latent_bottleneck::selftest::permutation_invariance_error;
use latent_bottleneck::tensor::{self, LAYER_NORM_EPS};
use latent_bottleneck::{Error, Tensor};
use proptest::prelude::*;

fn tensor_strategy(shape: Vec<usize>, range: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(-range..range, n)
        .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(1usize..5, 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_are_distributions(x in shape_strategy().prop_flat_map(|s| tensor_strategy(s, 50.0))) {
        let axis = x.rank() - 1;
        let y = tensor::softmax(&x, axis).unwrap();
        let k = x.shape()[axis];
        for row in y.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(x in shape_strategy().prop_flat_map(|s| tensor_strategy(s, 10.0))) {
        let c = *x.shape().last().unwrap();
        let (y, _) = tensor::layer_norm(&x, &Tensor::ones(vec![c]), &Tensor::zeros(vec![c]), LAYER_NORM_EPS).unwrap();
        for row in y.data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() / c as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(p, q, r, s)| {
            (tensor_strategy(vec![p, q], 2.0), tensor_strategy(vec![q, r], 2.0), tensor_strategy(vec![r, s], 2.0))
        })
    ) {
        let left = tensor::matmul(&tensor::matmul(&a, &b).unwrap(), &c).unwrap();
        let right = tensor::matmul(&a, &tensor::matmul(&b, &c).unwrap()).unwrap();
        for (l, r) in left.data().iter().zip(right.data()) {
            prop_assert!((l - r).abs() <= 1e-4 * l.abs().max(r.abs()).max(1.0));
        }
    }

    #[test]
    fn attention_weight_rows_sum_to_one(seed in 0u64..1000, causal in any::<bool>()) {
        let cfg = ModelConfig { causal_latent: causal, seed, ..ModelConfig::tiny() };
        let model = Model::<f32>::new(cfg).unwrap();
        let x = Tensor::rand_uniform(vec![2, 8, 8, 3], 0.0, 1.0, &mut rng::stream(seed, Purpose::Bench, &[]));
        let mut tape = Tape::new().capture_attention();
        let mut r = rng::stream(seed, Purpose::Dropout, &[]);
        let mut ctx = ForwardCtx::eval(&mut r);
        model.forward(&mut tape, &x, &mut ctx).unwrap();
        // two cross-attention maps and two latent maps, one per repeat
        prop_assert_eq!(tape.captured().len(), 4);
        for (_, w) in tape.captured() {
            let k = *w.shape().last().unwrap();
            for row in w.data().chunks(k) {
                prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn every_split_partitions_the_manifest(
        counts in proptest::collection::vec(10usize..60, 2..6),
        fraction in 0.05f64..0.5,
        seed in any::<u64>(),
    ) {
        let tax = Taxonomy {
            fine: (0..counts.len()).map(|i| format!("f{i}")).collect(),
            coarse: vec!["a".into(), "b".into()],
            coarse_of: (0..counts.len()).map(|i| i % 2).collect(),
            aliases: Vec::new(),
        };
        let m = DatasetManifest::synthetic(DatasetKind::Custom, tax, &counts).unwrap();
        let s = dataio::split(&m, fraction, seed).unwrap();
        let total: usize = counts.iter().sum();
        let train = s.indices(Split::Train);
        let test = s.indices(Split::Test);
        prop_assert_eq!(train.len() + test.len(), total);
        prop_assert_eq!(train.len(), ((1.0 - fraction) * total as f64 + 1e-9).floor() as usize);
        let realised = train.len() as f64 / total as f64;
        for (class, &n) in counts.iter().enumerate() {
            let in_train = train.iter().filter(|&&i| s.samples[i].fine == class).count();
            prop_assert!((in_train as f64 - n as f64 * realised).abs() < 1.0);
            prop_assert!(in_train >= 1 && in_train < n);
        }
        for r in &s.samples {
            prop_assert_eq!(r.coarse, s.taxonomy.coarse_of[r.fine]);
        }
        prop_assert_eq!(dataio::split(&m, fraction, seed).unwrap(), s);
    }

    #[test]
    fn pipeline_preserves_range_and_shape(
        h in 2usize..20, w in 2usize..20, target in 1usize..16, seed in any::<u64>(),
    ) {
        let img = Tensor::<f32>::rand_uniform(vec![h, w, 3], 0.0, 1.0, &mut rng::stream(seed, Purpose::Synthetic, &[]));
        let bytes = dataio::encode_bmp(&img).unwrap();
        let decoded = dataio::decode_image(&bytes).unwrap();
        let resized = dataio::resize(&decoded, target).unwrap();
        let aug = dataio::augment(&resized, &mut rng::stream(seed, Purpose::Augment, &[0, 0])).unwrap();
        prop_assert_eq!(aug.shape(), &[target, target, 3]);
        prop_assert!(aug.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn cross_attention_ignores_data_row_order() {
    let err = permutation_invariance_error(20, 5).unwrap();
    assert!(err <= 1e-5, "max change {err}");
}

#[test]
fn cross_attention_params_do_not_depend_on_data_length() {
    let small = ModelConfig::sipakmed();
    let large = ModelConfig {
        num_classes: 3,
        ..ModelConfig::herlev()
    };
    let (a, b) = (small.param_specs(), large.param_specs());
    let count = |specs: &[latent_bottleneck::params::ParamSpec], prefix: &str| -> usize {
        specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(|s| s.numel())
            .sum()
    };
    for prefix in [
        "cross.",
        "transformer.",
        "latent_array",
        "final_norm.",
        "head.",
    ] {
        assert_eq!(count(&a, prefix), count(&b, prefix), "{prefix}");
    }
    assert_ne!(count(&a, "embed."), count(&b, "embed."));
}

#[test]
fn latent_flops_do_not_change_with_data_length() {
    let run = |image_size: usize| {
        let cfg = ModelConfig {
            image_size,
            ..ModelConfig::tiny()
        };
        let model = Model::<f32>::new(cfg).unwrap();
        let mut tape = Tape::new();
        let mut r = rng::stream(0, Purpose::Dropout, &[]);
        let mut ctx = ForwardCtx::eval(&mut r);
        model
            .forward(
                &mut tape,
                &Tensor::zeros(vec![1, image_size, image_size, 3]),
                &mut ctx,
            )
            .unwrap();
        (
            tape.flops().stage_total(FlopStage::LatentTransformer),
            tape.flops().stage_total(FlopStage::CrossAttention),
        )
    };
    let (l8, c8) = run(8);
    let (l16, c16) = run(16);
    assert_eq!(l8, l16);
    assert!(c16 > c8);
}

#[test]
fn gradients_reach_every_parameter() {
    let model = Model::<f64>::new(ModelConfig {
        share_weights: false,
        ..ModelConfig::tiny()
    })
    .unwrap();
    let x = Tensor::rand_uniform(
        vec![3, 8, 8, 3],
        0.0,
        1.0,
        &mut rng::stream(2, Purpose::Bench, &[]),
    );
    let mut r = rng::stream(0, Purpose::Dropout, &[]);
    let mut ctx = ForwardCtx::eval(&mut r);
    let (_, _, grads) = model.loss_and_grads(&x, &[0, 1, 1], &mut ctx).unwrap();
    for e in model.params.entries() {
        let g = grads.get(&e.name).unwrap();
        assert_eq!(g.shape(), e.tensor.shape());
        assert!(
            g.data().iter().any(|&v| v != 0.0),
            "{} has an all-zero gradient",
            e.name
        );
    }
}

#[test]
fn logits_finite_in_strict_mode_for_100_seeds() {
    for seed in 0..100 {
        let model = Model::<f32>::new(ModelConfig {
            seed,
            ..ModelConfig::tiny()
        })
        .unwrap();
        let x = Tensor::rand_uniform(
            vec![2, 8, 8, 3],
            0.0,
            1.0,
            &mut rng::stream(seed, Purpose::Bench, &[]),
        );
        let mut tape = Tape::new().strict_finite(true);
        let mut r = rng::stream(seed, Purpose::Dropout, &[]);
        let mut ctx = ForwardCtx::eval(&mut r);
        let logits = model.forward(&mut tape, &x, &mut ctx).unwrap();
        assert!(tape.value(logits).is_finite());
    }
}

#[test]
fn strict_mode_names_the_failing_op() {
    let mut tape = Tape::<f32>::new().strict_finite(true);
    let a = tape.constant(Tensor::full(vec![2], 1e30));
    let err = tape.mul(a, a).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "mul" }), "{err}");
}

#[test]
fn parameter_names_are_a_function_of_the_config() {
    let cfg = ModelConfig {
        share_weights: false,
        repeats: 3,
        ..ModelConfig::tiny()
    };
    let a: Vec<String> = Model::<f32>::new(cfg.clone())
        .unwrap()
        .params
        .names()
        .map(str::to_string)
        .collect();
    let b: Vec<String> = Model::<f32>::new(ModelConfig {
        seed: 99,
        ..cfg.clone()
    })
    .unwrap()
    .params
    .names()
    .map(str::to_string)
    .collect();
    assert_eq!(a, b);
    let specs: Vec<String> = cfg.param_specs().into_iter().map(|s| s.name).collect();
    assert_eq!(a, specs);
}

#[test]
fn census_scales_with_repeats_only_when_unshared() {
    let shared = ModelConfig {
        repeats: 3,
        ..ModelConfig::tiny()
    };
    let single = ModelConfig {
        repeats: 1,
        ..ModelConfig::tiny()
    };
    let unshared = ModelConfig {
        share_weights: false,
        ..shared.clone()
    };
    let census = |c: &ModelConfig| ParamCensus::of(&Model::<f32>::new(c.clone()).unwrap().params);
    assert_eq!(census(&shared).blocks(), census(&single).blocks());
    assert_eq!(census(&unshared).blocks(), 3 * census(&single).blocks());
}

#[test]
fn augmentation_does_not_depend_on_thread_count() {
    let data: InMemorySource = dataio::synthetic_blobs(8, 2, 12, 3);
    let idx: Vec<usize> = (0..16).rev().collect();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| dataio::assemble_batch(&data, &idx, Some((5, 2))).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn eval_forward_is_deterministic_and_cross_attention_shape_is_m_free() {
    let store = ParamStore::<f32>::initialize(
        &attention::cross_attention_specs("c", 16, 16),
        &mut rng::stream(1, Purpose::Init, &[]),
    )
    .unwrap();
    let latent = Tensor::<f32>::randn(
        vec![1, 4, 16],
        1.0,
        &mut rng::stream(2, Purpose::Bench, &[]),
    );
    for m in [16, 256, 1296] {
        let data = Tensor::<f32>::randn(
            vec![1, m, 16],
            1.0,
            &mut rng::stream(3, Purpose::Bench, &[m as u64]),
        );
        let a = attention::cross_attend(&store, "c", 4, &latent, &data).unwrap();
        let b = attention::cross_attend(&store, "c", 4, &latent, &data).unwrap();
        assert_eq!(a.shape(), &[1, 4, 16]);
        assert_eq!(a, b);
    }
}

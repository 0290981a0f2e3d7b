//! Analytic gradients against central finite differences, in 64-bit.

use std::collections::BTreeMap;

use latent_bottleneck::attention::{self, ForwardCtx, TransformerBlockParams};
use latent_bottleneck::autodiff::{Tape, Var};
use latent_bottleneck::gradcheck::{self, GradCheckReport};
use latent_bottleneck::model::{forward_bound, Model, ModelConfig};
use latent_bottleneck::params::{BoundParams, ParamStore};
use latent_bottleneck::rng::{self, Purpose};
use latent_bottleneck::{Result, Tensor};

const TOL: f64 = 1e-4;
const STD: f64 = 0.3;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(
        shape.to_vec(),
        1.0,
        &mut rng::stream(seed, Purpose::Bench, &[]),
    )
}

fn params(items: &[(&str, &[usize])]) -> BTreeMap<String, Tensor<f64>> {
    items
        .iter()
        .enumerate()
        .map(|(i, (n, s))| (n.to_string(), rand(s, 100 + i as u64)))
        .collect()
}

/// Reduces any tensor to a scalar with non-uniform weights so that every
/// element's gradient is distinct.
fn weighted_sum(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(rand(&shape, 999));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn assert_ok(name: &str, report: GradCheckReport) {
    println!(
        "{name}: max rel err {:.3e} over {} elements",
        report.max_rel_error, report.checked
    );
    assert!(report.max_rel_error < TOL, "{name}: {report:?}");
}

#[test]
fn elementwise_and_layout_ops() {
    let p = params(&[("a", &[2, 3, 4]), ("b", &[3, 4]), ("c", &[2, 1, 4])]);
    let report = gradcheck::check(&p, |t, v| {
        let x = t.add(v["a"], v["b"])?;
        let x = t.mul(x, v["c"])?;
        let x = t.sub(x, v["b"])?;
        let x = t.scale(x, 0.7)?;
        let x = t.permute(x, &[2, 0, 1])?;
        let x = t.reshape(x, &[4, 6])?;
        let x = t.gelu(x)?;
        let x = t.sum_axis(x, 1)?;
        weighted_sum(t, x)
    })
    .unwrap();
    assert_ok("elementwise", report);
}

#[test]
fn matmul_with_broadcast_batches() {
    let p = params(&[("a", &[2, 3, 4]), ("w", &[4, 5]), ("b", &[1, 5, 2])]);
    let report = gradcheck::check(&p, |t, v| {
        let x = t.matmul(v["a"], v["w"])?;
        let x = t.matmul(x, v["b"])?;
        weighted_sum(t, x)
    })
    .unwrap();
    assert_ok("matmul", report);
}

#[test]
fn softmax_layer_norm_mean_broadcast() {
    let p = params(&[("x", &[2, 3, 4]), ("s", &[4]), ("o", &[4]), ("l", &[3, 4])]);
    let report = gradcheck::check(&p, |t, v| {
        let l = t.broadcast_to(v["l"], &[2, 3, 4])?;
        let x = t.add(v["x"], l)?;
        let x = t.softmax(x, 1)?;
        let x = t.layer_norm(x, v["s"], v["o"], 1e-5)?;
        let x = t.mean_axis(x, 2)?;
        weighted_sum(t, x)
    })
    .unwrap();
    assert_ok("softmax/layer_norm", report);
}

#[test]
fn cross_entropy_and_dropout() {
    let p = params(&[("logits", &[4, 3])]);
    let report = gradcheck::check(&p, |t, v| {
        let mut r = rng::stream(5, Purpose::Dropout, &[]);
        let x = t.dropout(v["logits"], 0.3, true, &mut r)?;
        t.sparse_cross_entropy(x, &[0, 2, 1, 2])
    })
    .unwrap();
    assert_ok("cross_entropy", report);
}

#[test]
fn transformer_block_with_causal_mask() {
    let specs = attention::transformer_block_specs("b", 4);
    let mut r = rng::stream(8, Purpose::Init, &[]);
    let store = ParamStore::<f64>::initialize(&specs, &mut r).unwrap();
    let mut p: BTreeMap<String, Tensor<f64>> = store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.tensor.map(|x| x * 20.0 + 0.05)))
        .collect();
    p.insert("input".into(), rand(&[2, 3, 4], 9));
    let report = gradcheck::check(&p, |t, v| {
        let bound = BoundParams::from_map(v.clone());
        let block = TransformerBlockParams::bind("b", 2, &bound)?;
        let mut r = rng::stream(0, Purpose::Dropout, &[]);
        let mut ctx = ForwardCtx::eval(&mut r);
        let y = attention::latent_transformer(t, v["input"], &[block], true, &mut ctx, "l")?;
        weighted_sum(t, y)
    })
    .unwrap();
    assert_ok("transformer block", report);
}

fn model_gradcheck(cfg: ModelConfig) -> GradCheckReport {
    let model = Model::<f64>::new(cfg.clone()).unwrap();
    let p = gradcheck::conditioned_point(&model.params, STD, 3);
    let images = Tensor::rand_uniform(
        vec![2, cfg.image_size, cfg.image_size, 3],
        0.0,
        1.0,
        &mut rng::stream(1, Purpose::Bench, &[]),
    );
    gradcheck::check(&p, |t, v| {
        let bound = BoundParams::from_map(v.clone());
        let mut r = rng::stream(0, Purpose::Dropout, &[]);
        let mut ctx = ForwardCtx::eval(&mut r);
        let logits = forward_bound(t, &bound, &cfg, &images, &mut ctx)?;
        t.sparse_cross_entropy(logits, &[0, 1])
    })
    .unwrap()
}

#[test]
fn full_model_tiny_config_shared() {
    assert_ok("model (shared)", model_gradcheck(ModelConfig::tiny()));
}

#[test]
fn full_model_tiny_config_unshared() {
    let cfg = ModelConfig {
        share_weights: false,
        ..ModelConfig::tiny()
    };
    assert_ok("model (unshared)", model_gradcheck(cfg));
}

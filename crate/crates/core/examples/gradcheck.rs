//! Finite-difference check of the full model's gradients in 64-bit.
//!
//! cargo run --release --example gradcheck

use latent_bottleneck::attention::ForwardCtx;
use latent_bottleneck::gradcheck;
use latent_bottleneck::model::{forward_bound, Model, ModelConfig};
use latent_bottleneck::params::BoundParams;
use latent_bottleneck::rng::{self, Purpose};
use latent_bottleneck::Tensor;

fn main() -> latent_bottleneck::Result<()> {
    let cfg = ModelConfig::tiny();
    let model = Model::<f64>::new(cfg.clone())?;
    // rescaled weights keep every activation away from flat regions
    let point = gradcheck::conditioned_point(&model.params, 0.3, 3);
    let images = Tensor::rand_uniform(
        vec![2, 8, 8, 3],
        0.0,
        1.0,
        &mut rng::stream(1, Purpose::Bench, &[]),
    );
    let report = gradcheck::check(&point, |tape, vars| {
        let bound = BoundParams::from_map(vars.clone());
        let mut r = rng::stream(0, Purpose::Dropout, &[]);
        let mut ctx = ForwardCtx::eval(&mut r);
        let logits = forward_bound(tape, &bound, &cfg, &images, &mut ctx)?;
        tape.sparse_cross_entropy(logits, &[0, 1])
    })?;
    println!("checked {} parameter elements", report.checked);
    println!(
        "max relative error {:.3e} at {}[{}]",
        report.max_rel_error, report.worst.0, report.worst.1
    );
    Ok(())
}

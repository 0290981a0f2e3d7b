//! Saves a model, reloads it, compares logits bit for bit, then shows that a
//! single flipped byte is rejected.
//!
//! cargo run --example checkpoint_roundtrip

use std::collections::BTreeMap;

use latent_bottleneck::checkpoint;
use latent_bottleneck::model::{Model, ModelConfig};
use latent_bottleneck::rng::{self, Purpose};
use latent_bottleneck::Tensor;

fn main() -> latent_bottleneck::Result<()> {
    let cfg = ModelConfig {
        image_size: 32,
        patch_size: 8,
        projection_dim: 32,
        latent_len: 8,
        num_heads: 4,
        ..ModelConfig::sipakmed()
    };
    let model = Model::<f32>::new(cfg)?;
    let names = vec!["Normal".to_string(), "Abnormal".into(), "Benign".into()];
    let path =
        std::env::temp_dir().join(format!("checkpoint_roundtrip_{}.ckpt", std::process::id()));
    checkpoint::save(&path, &model, &names, BTreeMap::new())?;

    let loaded = checkpoint::load(&path)?;
    let x = Tensor::rand_uniform(
        vec![2, 32, 32, 3],
        0.0,
        1.0,
        &mut rng::stream(0, Purpose::Bench, &[]),
    );
    let (a, b) = (model.logits(&x)?, loaded.model.logits(&x)?);
    let same = a
        .data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.to_bits() == q.to_bits());
    println!(
        "{} bytes, {} tensors, logits bit-identical: {same}",
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        loaded.model.params.len()
    );

    let mut bytes = std::fs::read(&path).expect("just written");
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    match checkpoint::decode(&bytes) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("corrupted copy rejected: {e}"),
    }
    let _ = std::fs::remove_file(&path);
    Ok(())
}

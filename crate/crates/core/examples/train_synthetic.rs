//! Trains a small model on generated two-class blob images and prints the
//! per-epoch curve.
//!
//! cargo run --release --example train_synthetic

use latent_bottleneck::dataio;
use latent_bottleneck::model::{Model, ModelConfig};
use latent_bottleneck::optim::{self, FitConfig, CURVES_HEADER};

fn main() -> latent_bottleneck::Result<()> {
    let data = dataio::synthetic_blobs(100, 2, 32, 7);
    let cfg = ModelConfig {
        image_size: 32,
        patch_size: 8,
        projection_dim: 32,
        latent_len: 8,
        num_heads: 4,
        latent_layers: 1,
        repeats: 2,
        dropout: 0.0,
        num_classes: 2,
        ..ModelConfig::sipakmed()
    };
    let mut model = Model::<f32>::new(cfg)?;
    println!("{} parameters", model.census().total());
    let fit = FitConfig {
        epochs: 50,
        seed: 7,
        ..FitConfig::default()
    };
    println!("{CURVES_HEADER}");
    let out = optim::fit_with(&mut model, &data, None, &fit, |r| {
        println!("{}", r.csv(true))
    })?;
    let last = out.history.last().expect("at least one epoch");
    println!("final train accuracy {:.3}", last.train_acc);
    Ok(())
}

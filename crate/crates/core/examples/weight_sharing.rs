//! Parameter census with and without weight sharing across repeats.
//!
//! cargo run --example weight_sharing

use latent_bottleneck::model::{Model, ModelConfig};

fn main() -> latent_bottleneck::Result<()> {
    println!(
        "{:<28}{:>12}{:>12}{:>12}",
        "config", "blocks", "embedding", "total"
    );
    for (label, cfg) in [
        (
            "R=1",
            ModelConfig {
                repeats: 1,
                ..ModelConfig::sipakmed()
            },
        ),
        ("R=2 shared", ModelConfig::sipakmed()),
        (
            "R=3 shared",
            ModelConfig {
                repeats: 3,
                ..ModelConfig::sipakmed()
            },
        ),
        (
            "R=3 unshared",
            ModelConfig {
                repeats: 3,
                share_weights: false,
                ..ModelConfig::sipakmed()
            },
        ),
        ("72px/2 (M=1296) R=2 shared", ModelConfig::herlev()),
    ] {
        let c = Model::<f32>::new(cfg)?.census();
        println!(
            "{label:<28}{:>12}{:>12}{:>12}",
            c.blocks(),
            c.patch_projection + c.position_embedding,
            c.total()
        );
    }
    Ok(())
}

//! Writes a synthetic image together with several random flip/zoom
//! augmentations of it as PNG files.
//!
//! cargo run --example augment_images [-- OUT_DIR]

use std::path::PathBuf;

use latent_bottleneck::dataio::{self, AugmentParams};
use latent_bottleneck::rng::{self, Purpose};

fn main() -> latent_bottleneck::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("augment_images"));
    std::fs::create_dir_all(&dir).map_err(|e| latent_bottleneck::Error::io(&dir, e))?;
    let image = dataio::synthetic_blob(1, 64, &mut rng::stream(3, Purpose::Synthetic, &[]));
    let write =
        |name: &str, img: &latent_bottleneck::Tensor<f32>| -> latent_bottleneck::Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, dataio::encode_png(img)?)
                .map_err(|e| latent_bottleneck::Error::io(&path, e))
        };
    write("original.png", &image)?;
    for i in 0..6u64 {
        let mut r = rng::stream(3, Purpose::Augment, &[0, i]);
        let p = AugmentParams::sample(&mut r);
        write(&format!("augmented_{i}.png"), &p.apply(&image)?)?;
        println!(
            "augmented_{i}.png  flip {:<5} zoom {:+.3} x {:+.3}",
            p.flip, p.zoom_h, p.zoom_w
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

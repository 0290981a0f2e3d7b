//! Stratified train/test splits for manifests with the class counts of the
//! two public Pap smear collections.
//!
//! cargo run --example split_manifest

use latent_bottleneck::dataio::{self, DatasetKind, DatasetManifest, Split, Taxonomy};

fn main() -> latent_bottleneck::Result<()> {
    for (kind, taxonomy, counts) in [
        (
            DatasetKind::Sipakmed,
            Taxonomy::sipakmed(),
            vec![787, 831, 813, 825, 793],
        ),
        (
            DatasetKind::Herlev,
            Taxonomy::herlev(),
            vec![74, 70, 98, 182, 146, 197, 150],
        ),
    ] {
        let manifest = DatasetManifest::synthetic(kind, taxonomy, &counts)?;
        let fraction = kind.default_test_fraction();
        let split = dataio::split(&manifest, fraction, 0)?;
        println!("{} (test fraction {fraction})", kind.name());
        for (i, name) in split.taxonomy.fine.iter().enumerate() {
            let train = split
                .samples
                .iter()
                .filter(|s| s.fine == i && s.split == Some(Split::Train))
                .count();
            println!("  {name:<26} {train:>4} / {:>3}", counts[i] - train);
        }
        println!(
            "  {:<26} {:>4} / {:>3}\n",
            "total",
            split.indices(Split::Train).len(),
            split.indices(Split::Test).len()
        );
    }
    Ok(())
}

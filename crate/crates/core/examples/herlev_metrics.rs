//! Screening metrics from a two-class confusion matrix, printed as JSON and CSV.
//!
//! cargo run --example herlev_metrics

use latent_bottleneck::metrics::{ConfusionMatrix, MetricsReport};

fn main() -> latent_bottleneck::Result<()> {
    // rows are the true class, columns the prediction
    let cm = ConfusionMatrix::from_counts(
        vec!["Normal".into(), "Abnormal".into()],
        vec![vec![21, 2], vec![3, 66]],
    )?;
    let report = MetricsReport::from_confusion(&cm, Some(1), None)?;
    println!("{}", report.to_json()?);
    print!("{}", report.to_csv());
    Ok(())
}

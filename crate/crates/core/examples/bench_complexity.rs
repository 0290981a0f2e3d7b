//! Analytic flop counts and measured cross-attention time as the data length
//! M grows at fixed latent length N.
//!
//! cargo run --release --example bench_complexity [-- 64,256,1296]

use latent_bottleneck::flops::{self, BenchSpec, BENCH_HEADER};

fn main() -> latent_bottleneck::Result<()> {
    let mut spec = BenchSpec::default();
    if let Some(arg) = std::env::args().nth(1) {
        spec.m_values = arg
            .split(',')
            .map(|m| m.trim().parse().expect("comma-separated sizes"))
            .collect();
    }
    let rows = flops::bench(&spec)?;
    println!("{BENCH_HEADER}");
    for r in &rows {
        println!("{}", r.csv());
    }
    if let (Some(a), Some(b)) = (rows.first(), rows.last()) {
        println!(
            "\nM {} -> {}: cross-attention flops x{:.2}, wall x{:.2}, latent flops unchanged ({})",
            a.m,
            b.m,
            b.cross_attn_flops as f64 / a.cross_attn_flops as f64,
            b.wall_ms / a.wall_ms,
            a.latent_flops
        );
    }
    Ok(())
}

//! Analytic matmul cost of a forward pass, and the benchmark that compares it
//! with wall-clock time as the data length `M` grows.
//!
//! Counts are 2 flops per multiply-add and cover matrix products only;
//! softmax, layer norm and elementwise work are linear side terms and are
//! left out. The same convention is used by the tape's [`FlopLedger`], so
//! the two can be compared exactly.
//!
//! [`FlopLedger`]: crate::autodiff::FlopLedger

use std::time::Instant;

use crate::attention::{qkv_attention, ForwardCtx, FF_EXPANSION};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub embedding: u64,
    /// Score and value products of every cross-attention (the `MN` term).
    pub cross_products: u64,
    /// Query/key/value/output projections of every cross-attention.
    pub cross_dense: u64,
    /// Score and value products of every latent self-attention (the `LN²` term).
    pub latent_products: u64,
    /// Projections and feed-forward products of every latent block.
    pub latent_dense: u64,
    pub head: u64,
}

impl FlopBreakdown {
    pub fn cross_attention(&self) -> u64 {
        self.cross_products + self.cross_dense
    }

    pub fn latent_transformer(&self) -> u64 {
        self.latent_products + self.latent_dense
    }

    pub fn total(&self) -> u64 {
        self.embedding + self.cross_attention() + self.latent_transformer() + self.head
    }
}

/// Raw sizes the cost model depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub batch: u64,
    /// Data length `M`.
    pub data_len: u64,
    /// Data width `C` (keys/values input width).
    pub data_width: u64,
    /// Latent length `N`.
    pub latent_len: u64,
    /// Model width `D`.
    pub width: u64,
    pub layers: u64,
    pub repeats: u64,
    pub patch_dim: u64,
    pub classes: u64,
}

impl Dims {
    pub fn of(cfg: &ModelConfig, batch: usize) -> Self {
        Dims {
            batch: batch as u64,
            data_len: cfg.num_patches() as u64,
            data_width: cfg.projection_dim as u64,
            latent_len: cfg.latent_len as u64,
            width: cfg.projection_dim as u64,
            layers: cfg.latent_layers as u64,
            repeats: cfg.repeats as u64,
            patch_dim: cfg.patch_dim() as u64,
            classes: cfg.num_classes as u64,
        }
    }
}

pub fn analytic(d: &Dims) -> FlopBreakdown {
    let (b, m, c, n, w) = (d.batch, d.data_len, d.data_width, d.latent_len, d.width);
    let ff = FF_EXPANSION as u64;
    let per_cross_products = 2 * (2 * b * n * m * w);
    let per_cross_dense = 2 * b * n * w * w // query
        + 2 * (2 * b * m * c * w) // key, value
        + 2 * b * n * w * w; // output
    let per_block_products = 2 * (2 * b * n * n * w);
    let per_block_dense = 4 * (2 * b * n * w * w) + 2 * (2 * b * n * w * ff * w);
    FlopBreakdown {
        embedding: 2 * b * m * d.patch_dim * w,
        cross_products: d.repeats * per_cross_products,
        cross_dense: d.repeats * per_cross_dense,
        latent_products: d.repeats * d.layers * per_block_products,
        latent_dense: d.repeats * d.layers * per_block_dense,
        head: 2 * b * w * d.classes,
    }
}

/// One row of the complexity benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub m: usize,
    pub n: usize,
    pub l: usize,
    pub d: usize,
    /// Cross-attention score + value products over all repeats.
    pub cross_attn_flops: u64,
    /// Everything inside the latent transformers over all repeats.
    pub latent_flops: u64,
    /// Cross-attention blocks plus latent transformers over all repeats.
    pub total_flops: u64,
    /// Best-of-`runs` wall time of one multi-head cross-attention core
    /// (scores, softmax, weighted values) at this `M`.
    pub wall_ms: f64,
}

pub const BENCH_HEADER: &str = "M,N,L,D,cross_attn_flops,latent_flops,total_flops,wall_ms";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.m,
            self.n,
            self.l,
            self.d,
            self.cross_attn_flops,
            self.latent_flops,
            self.total_flops,
            self.wall_ms
        )
    }
}

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub m_values: Vec<usize>,
    pub n: usize,
    pub l: usize,
    pub d: usize,
    pub heads: usize,
    pub repeats: usize,
    pub runs: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            m_values: vec![64, 128, 256, 512, 1296],
            n: 256,
            l: 4,
            d: 256,
            heads: 8,
            repeats: 2,
            runs: 5,
        }
    }
}

/// Best-of-`runs` milliseconds for one multi-head attention core with `n`
/// queries over `m` keys at width `d`.
pub fn time_cross_attention_core(
    m: usize,
    n: usize,
    d: usize,
    heads: usize,
    runs: usize,
) -> Result<f64> {
    let dh = d / heads;
    let mut rng = rng::stream(0, Purpose::Bench, &[m as u64, n as u64, d as u64]);
    let q = Tensor::<f32>::randn(vec![1, heads, n, dh], 1.0, &mut rng);
    let k = Tensor::<f32>::randn(vec![1, heads, m, dh], 1.0, &mut rng);
    let v = Tensor::<f32>::randn(vec![1, heads, m, dh], 1.0, &mut rng);
    let mut best = f64::INFINITY;
    for run in 0..=runs {
        let mut tape = Tape::<f32>::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let mut ctx = ForwardCtx::eval(&mut rng);
        let start = Instant::now();
        let out = qkv_attention(&mut tape, qv, kv, vv, None, &mut ctx, "bench")?;
        std::hint::black_box(tape.value(out));
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        // first run warms caches and the allocator
        if run > 0 {
            best = best.min(elapsed);
        }
    }
    Ok(best)
}

pub fn bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    let sizes = [spec.n, spec.l, spec.d, spec.heads, spec.repeats, spec.runs];
    if spec.m_values.is_empty() || spec.m_values.contains(&0) || sizes.contains(&0) {
        return Err(Error::arg("benchmark sizes must all be at least 1"));
    }
    if !spec.d.is_multiple_of(spec.heads) {
        return Err(Error::arg(format!(
            "D={} not divisible by {} heads",
            spec.d, spec.heads
        )));
    }
    // untimed pass at the largest size so the first row does not pay for heap growth
    let largest = *spec.m_values.iter().max().expect("checked non-empty");
    time_cross_attention_core(largest, spec.n, spec.d, spec.heads, 1)?;
    spec.m_values
        .iter()
        .map(|&m| {
            let dims = Dims {
                batch: 1,
                data_len: m as u64,
                data_width: spec.d as u64,
                latent_len: spec.n as u64,
                width: spec.d as u64,
                layers: spec.l as u64,
                repeats: spec.repeats as u64,
                patch_dim: 0,
                classes: 0,
            };
            let f = analytic(&dims);
            Ok(BenchRow {
                m,
                n: spec.n,
                l: spec.l,
                d: spec.d,
                cross_attn_flops: f.cross_products,
                latent_flops: f.latent_transformer(),
                total_flops: f.cross_attention() + f.latent_transformer(),
                wall_ms: time_cross_attention_core(m, spec.n, spec.d, spec.heads, spec.runs)?,
            })
        })
        .collect()
}

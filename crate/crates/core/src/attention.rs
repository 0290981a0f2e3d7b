//! QKV attention, the asymmetric cross-attention block and the latent
//! self-attention transformer.
//!
//! Shapes follow `[batch, positions, width]`. Heads are split out as
//! `[batch, heads, positions, head_dim]` and all attention products run as
//! batched matrix products over the leading two axes.

use rand::RngCore;

use crate::autodiff::{MatmulKind, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, Init, ParamSpec};
use crate::tensor::{Element, Tensor, LAYER_NORM_EPS};

/// Standard deviation of projection weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Feed-forward hidden width as a multiple of the model width.
pub const FF_EXPANSION: usize = 4;

/// Per-call forward settings.
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub dropout: f64,
    pub rng: &'a mut dyn RngCore,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval(rng: &'a mut dyn RngCore) -> Self {
        ForwardCtx {
            training: false,
            dropout: 0.0,
            rng,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<H> {
    /// `[in, out]`
    pub weight: H,
    /// `[out]`
    pub bias: H,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<H> {
    pub scale: H,
    pub offset: H,
}

/// Query/key/value/output projections of one attention layer. The query input
/// width and the key/value input width may differ.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<H> {
    pub query: Linear<H>,
    pub key: Linear<H>,
    pub value: Linear<H>,
    pub output: Linear<H>,
    pub heads: usize,
}

/// Pre-norms for both inputs plus the attention projections.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionParams<H> {
    pub norm_latent: LayerNormParams<H>,
    pub norm_data: LayerNormParams<H>,
    pub attention: AttentionParams<H>,
}

/// One pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlockParams<H> {
    pub norm_attention: LayerNormParams<H>,
    pub attention: AttentionParams<H>,
    pub norm_ff: LayerNormParams<H>,
    pub ff_expand: Linear<H>,
    pub ff_contract: Linear<H>,
}

// --- declarations --------------------------------------------------------

pub fn linear_specs(prefix: &str, input: usize, output: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            format!("{prefix}.weight"),
            [input, output],
            Init::Normal(INIT_STD),
        ),
        ParamSpec::new(format!("{prefix}.bias"), [output], Init::Zeros),
    ]
}

pub fn layer_norm_specs(prefix: &str, width: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.scale"), [width], Init::Ones),
        ParamSpec::new(format!("{prefix}.offset"), [width], Init::Zeros),
    ]
}

/// Attention projections: queries from `query_width`, keys and values from
/// `kv_width`, model width `width`, output projected back to `query_width`.
pub fn attention_specs(
    prefix: &str,
    query_width: usize,
    kv_width: usize,
    width: usize,
) -> Vec<ParamSpec> {
    let mut specs = linear_specs(&format!("{prefix}.query"), query_width, width);
    specs.extend(linear_specs(&format!("{prefix}.key"), kv_width, width));
    specs.extend(linear_specs(&format!("{prefix}.value"), kv_width, width));
    specs.extend(linear_specs(
        &format!("{prefix}.output"),
        width,
        query_width,
    ));
    specs
}

pub fn cross_attention_specs(
    prefix: &str,
    latent_width: usize,
    data_width: usize,
) -> Vec<ParamSpec> {
    let mut specs = layer_norm_specs(&format!("{prefix}.norm_latent"), latent_width);
    specs.extend(layer_norm_specs(&format!("{prefix}.norm_data"), data_width));
    specs.extend(attention_specs(
        &format!("{prefix}.attention"),
        latent_width,
        data_width,
        latent_width,
    ));
    specs
}

pub fn transformer_block_specs(prefix: &str, width: usize) -> Vec<ParamSpec> {
    let hidden = FF_EXPANSION * width;
    let mut specs = layer_norm_specs(&format!("{prefix}.norm_attention"), width);
    specs.extend(attention_specs(
        &format!("{prefix}.attention"),
        width,
        width,
        width,
    ));
    specs.extend(layer_norm_specs(&format!("{prefix}.norm_ff"), width));
    specs.extend(linear_specs(&format!("{prefix}.ff_expand"), width, hidden));
    specs.extend(linear_specs(
        &format!("{prefix}.ff_contract"),
        hidden,
        width,
    ));
    specs
}

// --- binding -------------------------------------------------------------

impl Linear<Var> {
    pub fn bind(prefix: &str, p: &BoundParams) -> Result<Self> {
        Ok(Linear {
            weight: p.var(&format!("{prefix}.weight"))?,
            bias: p.var(&format!("{prefix}.bias"))?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

impl LayerNormParams<Var> {
    pub fn bind(prefix: &str, p: &BoundParams) -> Result<Self> {
        Ok(LayerNormParams {
            scale: p.var(&format!("{prefix}.scale"))?,
            offset: p.var(&format!("{prefix}.offset"))?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.scale, self.offset, LAYER_NORM_EPS)
    }
}

impl AttentionParams<Var> {
    pub fn bind(prefix: &str, heads: usize, p: &BoundParams) -> Result<Self> {
        Ok(AttentionParams {
            query: Linear::bind(&format!("{prefix}.query"), p)?,
            key: Linear::bind(&format!("{prefix}.key"), p)?,
            value: Linear::bind(&format!("{prefix}.value"), p)?,
            output: Linear::bind(&format!("{prefix}.output"), p)?,
            heads,
        })
    }
}

impl CrossAttentionParams<Var> {
    pub fn bind(prefix: &str, heads: usize, p: &BoundParams) -> Result<Self> {
        Ok(CrossAttentionParams {
            norm_latent: LayerNormParams::bind(&format!("{prefix}.norm_latent"), p)?,
            norm_data: LayerNormParams::bind(&format!("{prefix}.norm_data"), p)?,
            attention: AttentionParams::bind(&format!("{prefix}.attention"), heads, p)?,
        })
    }
}

impl TransformerBlockParams<Var> {
    pub fn bind(prefix: &str, heads: usize, p: &BoundParams) -> Result<Self> {
        Ok(TransformerBlockParams {
            norm_attention: LayerNormParams::bind(&format!("{prefix}.norm_attention"), p)?,
            attention: AttentionParams::bind(&format!("{prefix}.attention"), heads, p)?,
            norm_ff: LayerNormParams::bind(&format!("{prefix}.norm_ff"), p)?,
            ff_expand: Linear::bind(&format!("{prefix}.ff_expand"), p)?,
            ff_contract: Linear::bind(&format!("{prefix}.ff_contract"), p)?,
        })
    }
}

// --- operations ----------------------------------------------------------

/// Additive mask that blocks keys after each query position.
pub fn causal_mask<T: Element>(len: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(vec![len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.data_mut()[i * len + j] = T::of(-1e9);
        }
    }
    m
}

/// `softmax(q kᵀ / √d) v` over the last two axes; leading axes broadcast.
///
/// `mask`, when given, is added to the scores before the softmax. Attention
/// weights are captured on the tape under `label` when capture is enabled,
/// and dropped out at `ctx.dropout` in training mode.
pub fn qkv_attention<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
    ctx: &mut ForwardCtx<'_>,
    label: &str,
) -> Result<Var> {
    let (qs, ks, vs) = (
        tape.shape(q).to_vec(),
        tape.shape(k).to_vec(),
        tape.shape(v).to_vec(),
    );
    if qs.len() < 2 || ks.len() < 2 || vs.len() < 2 {
        return Err(Error::dim(
            "qkv_attention",
            format!("ranks of {qs:?}, {ks:?}, {vs:?}"),
        ));
    }
    let d = qs[qs.len() - 1];
    if ks[ks.len() - 1] != d {
        return Err(Error::dim(
            "qkv_attention",
            format!("query {qs:?} vs key {ks:?} widths"),
        ));
    }
    if ks[ks.len() - 2] != vs[vs.len() - 2] {
        return Err(Error::dim(
            "qkv_attention",
            format!("key {ks:?} vs value {vs:?} lengths"),
        ));
    }
    let weights = tape.attention_weights(q, k, T::of(1.0 / (d as f64).sqrt()), mask)?;
    tape.capture(label, weights);
    let weights = tape.dropout(weights, ctx.dropout, ctx.training, ctx.rng)?;
    tape.matmul_kind(weights, v, MatmulKind::AttentionValues)
}

/// `[B, T, H·dh]` → `[B, H, T, dh]`
fn split_heads<T: Element>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, w) = (s[0], s[1], s[2]);
    if w % heads != 0 {
        return Err(Error::dim(
            "multi_head_attention",
            format!("width {w} not divisible by {heads} heads"),
        ));
    }
    let x = tape.reshape(x, &[b, t, heads, w / heads])?;
    tape.permute(x, &[0, 2, 1, 3])
}

/// `[B, H, T, dh]` → `[B, T, H·dh]`
fn merge_heads<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[s[0], s[2], s[1] * s[3]])
}

fn expect_rank3<T: Element>(tape: &Tape<T>, x: Var, what: &str) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [b, t, w] => Ok([b, t, w]),
        ref s => Err(Error::dim(
            "multi_head_attention",
            format!("{what} must be [B, T, width], got {s:?}"),
        )),
    }
}

/// Projects queries from `x_q` and keys/values from `x_kv`, attends per head,
/// concatenates heads and applies the output projection.
pub fn multi_head_attention<T: Element>(
    tape: &mut Tape<T>,
    x_q: Var,
    x_kv: Var,
    p: &AttentionParams<Var>,
    mask: Option<Var>,
    ctx: &mut ForwardCtx<'_>,
    label: &str,
) -> Result<Var> {
    let [bq, _, dq] = expect_rank3(tape, x_q, "query input")?;
    let [bk, _, dkv] = expect_rank3(tape, x_kv, "key/value input")?;
    let wq = tape.shape(p.query.weight)[0];
    let wk = tape.shape(p.key.weight)[0];
    if dq != wq || dkv != wk || bq != bk {
        return Err(Error::dim(
            "multi_head_attention",
            format!(
                "inputs {:?} / {:?} vs projection inputs {wq} / {wk}",
                tape.shape(x_q),
                tape.shape(x_kv)
            ),
        ));
    }
    let q = p.query.forward(tape, x_q)?;
    let k = p.key.forward(tape, x_kv)?;
    let v = p.value.forward(tape, x_kv)?;
    let q = split_heads(tape, q, p.heads)?;
    let k = split_heads(tape, k, p.heads)?;
    let v = split_heads(tape, v, p.heads)?;
    let heads = qkv_attention(tape, q, k, v, mask, ctx, label)?;
    let merged = merge_heads(tape, heads)?;
    p.output.forward(tape, merged)
}

/// Latent queries attend over the data array; the result is added back onto
/// the latent. Output shape is `[B, N, D]` whatever the data length.
pub fn cross_attention_block<T: Element>(
    tape: &mut Tape<T>,
    latent: Var,
    data: Var,
    p: &CrossAttentionParams<Var>,
    ctx: &mut ForwardCtx<'_>,
    label: &str,
) -> Result<Var> {
    let q = p.norm_latent.forward(tape, latent)?;
    let kv = p.norm_data.forward(tape, data)?;
    let attended = multi_head_attention(tape, q, kv, &p.attention, None, ctx, label)?;
    let attended = tape.dropout(attended, ctx.dropout, ctx.training, ctx.rng)?;
    tape.add(latent, attended)
}

/// One pre-norm block: self-attention with residual, then a GELU
/// feed-forward with residual.
pub fn transformer_block<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &TransformerBlockParams<Var>,
    mask: Option<Var>,
    ctx: &mut ForwardCtx<'_>,
    label: &str,
) -> Result<Var> {
    let h = p.norm_attention.forward(tape, x)?;
    let a = multi_head_attention(tape, h, h, &p.attention, mask, ctx, label)?;
    let a = tape.dropout(a, ctx.dropout, ctx.training, ctx.rng)?;
    let x = tape.add(x, a)?;
    let h = p.norm_ff.forward(tape, x)?;
    let h = p.ff_expand.forward(tape, h)?;
    let h = tape.gelu(h)?;
    let h = p.ff_contract.forward(tape, h)?;
    let h = tape.dropout(h, ctx.dropout, ctx.training, ctx.rng)?;
    tape.add(x, h)
}

/// Runs `blocks` in order over the latent array. Attention is bidirectional
/// unless `causal` is set.
pub fn latent_transformer<T: Element>(
    tape: &mut Tape<T>,
    latent: Var,
    blocks: &[TransformerBlockParams<Var>],
    causal: bool,
    ctx: &mut ForwardCtx<'_>,
    label: &str,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::arg("latent transformer needs at least one block"));
    }
    let mask = if causal {
        let n = tape.shape(latent)[1];
        Some(tape.constant(causal_mask(n)))
    } else {
        None
    };
    let mut x = latent;
    for (i, block) in blocks.iter().enumerate() {
        x = transformer_block(tape, x, block, mask, ctx, &format!("{label}.{i}"))?;
    }
    Ok(x)
}

/// Eval-mode cross-attention block on plain tensors: `latent` `[B, N, D]`
/// attends over `data` `[B, M, C]` with the parameters stored under `prefix`.
pub fn cross_attend<T: Element>(
    params: &crate::params::ParamStore<T>,
    prefix: &str,
    heads: usize,
    latent: &Tensor<T>,
    data: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let p = CrossAttentionParams::bind(prefix, heads, &bound)?;
    let (l, d) = (tape.constant(latent.clone()), tape.constant(data.clone()));
    let mut rng = crate::rng::stream(0, crate::rng::Purpose::Dropout, &[]);
    let mut ctx = ForwardCtx::eval(&mut rng);
    let out = cross_attention_block(&mut tape, l, d, &p, &mut ctx, "cross")?;
    Ok(tape.value(out).clone())
}

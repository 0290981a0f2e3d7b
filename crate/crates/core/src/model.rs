//! The latent-bottleneck classifier: patch embedding, repeated cross-attention
//! and latent transformer (optionally weight-shared), mean-pooled
//! classification head and loss.

use serde::{Deserialize, Serialize};

use crate::attention::{
    self, CrossAttentionParams, ForwardCtx, LayerNormParams, Linear, TransformerBlockParams,
    INIT_STD,
};
use crate::autodiff::{FlopStage, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, Init, ParamSpec, ParamStore};
use crate::rng::{self, Purpose};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Square patch side in pixels.
    pub patch_size: usize,
    pub channels: usize,
    /// Model width `D` shared by the data array and the latent array.
    pub projection_dim: usize,
    /// Number of latents `N`.
    pub latent_len: usize,
    pub num_heads: usize,
    /// Transformer blocks per latent transformer (`L`).
    pub latent_layers: usize,
    /// Cross-attend + latent-transformer repeats (`R`).
    pub repeats: usize,
    pub share_weights: bool,
    pub dropout: f64,
    pub num_classes: usize,
    /// Causal masking inside the latent transformer; off by default.
    #[serde(default)]
    pub causal_latent: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::sipakmed()
    }
}

impl ModelConfig {
    /// 224×224 inputs, 14×14 patches, three coarse classes.
    pub fn sipakmed() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 14,
            channels: 3,
            projection_dim: 256,
            latent_len: 256,
            num_heads: 8,
            latent_layers: 4,
            repeats: 2,
            share_weights: true,
            dropout: 0.2,
            num_classes: 3,
            causal_latent: false,
            seed: 0,
        }
    }

    /// 72×72 inputs, 2×2 patches, two coarse classes.
    pub fn herlev() -> Self {
        ModelConfig {
            image_size: 72,
            patch_size: 2,
            num_classes: 2,
            ..Self::sipakmed()
        }
    }

    /// The smallest configuration with every structural feature: 8×8 images,
    /// 4×4 patches (M=4), N=4, D=8, two heads, one block, two repeats.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            projection_dim: 8,
            latent_len: 4,
            num_heads: 2,
            latent_layers: 1,
            repeats: 2,
            share_weights: true,
            dropout: 0.0,
            num_classes: 2,
            causal_latent: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("projection_dim", self.projection_dim),
            ("latent_len", self.latent_len),
            ("num_heads", self.num_heads),
            ("latent_layers", self.latent_layers),
            ("repeats", self.repeats),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.projection_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "projection_dim {} is not divisible by num_heads {}",
                self.projection_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Patch count `M`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened patch length.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.projection_dim / self.num_heads
    }

    /// Distinct cross-attention / transformer parameter sets.
    pub fn block_sets(&self) -> usize {
        if self.share_weights {
            1
        } else {
            self.repeats
        }
    }

    /// Fields that differ from `other`, as `name: self vs other` strings.
    /// `seed` and `dropout` do not affect parameter shapes or eval outputs and
    /// are ignored.
    pub fn architecture_diff(&self, other: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    out.push(format!("{}: {:?} vs {:?}", stringify!($f), self.$f, other.$f));
                }
            )*};
        }
        cmp!(
            image_size,
            patch_size,
            channels,
            projection_dim,
            latent_len,
            num_heads,
            latent_layers,
            repeats,
            share_weights,
            num_classes,
            causal_latent
        );
        out
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.projection_dim;
        let mut specs = attention::linear_specs("embed.patch", self.patch_dim(), d);
        specs.push(ParamSpec::new(
            "embed.position",
            [self.num_patches(), d],
            Init::Normal(INIT_STD),
        ));
        specs.push(
            ParamSpec::new("latent_array", [self.latent_len, d], Init::Normal(INIT_STD))
                .exempt(true),
        );
        for r in 0..self.block_sets() {
            specs.extend(attention::cross_attention_specs(&cross_prefix(r), d, d));
            for l in 0..self.latent_layers {
                specs.extend(attention::transformer_block_specs(&block_prefix(r, l), d));
            }
        }
        specs.extend(attention::layer_norm_specs("final_norm", d));
        specs.extend(attention::linear_specs("head", d, self.num_classes));
        specs
    }
}

fn cross_prefix(set: usize) -> String {
    format!("cross.{set}")
}

fn block_prefix(set: usize, layer: usize) -> String {
    format!("transformer.{set}.{layer}")
}

/// Scalar parameter counts per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCensus {
    pub patch_projection: usize,
    pub position_embedding: usize,
    pub latent_array: usize,
    pub cross_attention: usize,
    pub transformer: usize,
    pub final_norm: usize,
    pub head: usize,
}

impl ParamCensus {
    pub fn of<T: Element>(store: &ParamStore<T>) -> Self {
        ParamCensus {
            patch_projection: store.count_prefix("embed.patch."),
            position_embedding: store.count_prefix("embed.position"),
            latent_array: store.count_prefix("latent_array"),
            cross_attention: store.count_prefix("cross."),
            transformer: store.count_prefix("transformer."),
            final_norm: store.count_prefix("final_norm."),
            head: store.count_prefix("head."),
        }
    }

    /// Cross-attention plus latent transformer parameters.
    pub fn blocks(&self) -> usize {
        self.cross_attention + self.transformer
    }

    pub fn total(&self) -> usize {
        self.patch_projection
            + self.position_embedding
            + self.latent_array
            + self.blocks()
            + self.final_norm
            + self.head
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> Model<T> {
    /// Fresh parameters drawn from the config seed. Initial values are drawn
    /// in 64-bit and converted, so `Model<f32>` and `Model<f64>` start from
    /// the same point.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, Purpose::Init, &[]);
        let params = ParamStore::<f64>::initialize(&config.param_specs(), &mut rng)?.cast();
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::ConfigMismatch(vec![format!(
                "config implies {} parameter tensors, store has {}",
                specs.len(),
                params.len()
            )]));
        }
        for spec in &specs {
            match params.get(&spec.name) {
                None => {
                    return Err(Error::ConfigMismatch(vec![format!(
                        "missing parameter {}",
                        spec.name
                    )]))
                }
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::ConfigMismatch(vec![format!(
                        "{}: config shape {:?} vs stored {:?}",
                        spec.name,
                        spec.shape,
                        t.shape()
                    )]))
                }
                _ => {}
            }
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn census(&self) -> ParamCensus {
        ParamCensus::of(&self.params)
    }

    /// Records a full forward pass on `tape` and returns the `[B, K]` logits.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let bound = self.params.bind(tape);
        forward_bound(tape, &bound, &self.config, images, ctx)
    }

    /// Eval-mode logits.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut rng = rng::stream(0, Purpose::Dropout, &[]);
        let mut ctx = ForwardCtx::eval(&mut rng);
        let out = self.forward(&mut tape, images, &mut ctx)?;
        Ok(tape.value(out).clone())
    }

    /// Loss, logits and parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        images: &Tensor<T>,
        labels: &[usize],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(T, Tensor<T>, Gradients<T>)> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, images, ctx)?;
        let loss = tape.sparse_cross_entropy(logits, labels)?;
        let loss_value = tape.value(loss).item()?;
        let logits_value = tape.value(logits).clone();
        let grads = tape.backward(loss)?;
        Ok((loss_value, logits_value, grads))
    }
}

/// Splits `[B, S, S, C]` images into row-major patches, projects each to the
/// model width and adds its learned position embedding: `[B, M, D]`.
pub fn embed_image<T: Element>(
    tape: &mut Tape<T>,
    images: Var,
    params: &BoundParams,
    cfg: &ModelConfig,
) -> Result<Var> {
    let shape = tape.shape(images).to_vec();
    let (s, p, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != c {
        return Err(Error::dim(
            "embed_image",
            format!("expected [B, {s}, {s}, {c}] images, got {shape:?}"),
        ));
    }
    let b = shape[0];
    let g = s / p;
    let x = tape.reshape(images, &[b, g, p, g, p, c])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = tape.reshape(x, &[b, g * g, p * p * c])?;
    let projected = Linear::bind("embed.patch", params)?.forward(tape, x)?;
    let position = params.var("embed.position")?;
    tape.add(projected, position)
}

/// Forward pass over already-bound parameters.
pub fn forward_bound<T: Element>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    images: &Tensor<T>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let batch = images.shape().first().copied().unwrap_or(0);
    let prev = tape.set_stage(FlopStage::Embedding);
    let images = tape.constant(images.clone());
    let data = embed_image(tape, images, params, cfg)?;

    let latent_array = params.var("latent_array")?;
    let mut latent =
        tape.broadcast_to(latent_array, &[batch, cfg.latent_len, cfg.projection_dim])?;
    for r in 0..cfg.repeats {
        let set = if cfg.share_weights { 0 } else { r };
        tape.set_stage(FlopStage::CrossAttention);
        let cross = CrossAttentionParams::bind(&cross_prefix(set), cfg.num_heads, params)?;
        latent = attention::cross_attention_block(
            tape,
            latent,
            data,
            &cross,
            ctx,
            &format!("cross.{r}"),
        )?;
        tape.set_stage(FlopStage::LatentTransformer);
        let blocks = (0..cfg.latent_layers)
            .map(|l| TransformerBlockParams::bind(&block_prefix(set, l), cfg.num_heads, params))
            .collect::<Result<Vec<_>>>()?;
        latent = attention::latent_transformer(
            tape,
            latent,
            &blocks,
            cfg.causal_latent,
            ctx,
            &format!("latent.{r}"),
        )?;
    }

    tape.set_stage(FlopStage::Head);
    let latent = LayerNormParams::bind("final_norm", params)?.forward(tape, latent)?;
    let pooled = tape.mean_axis(latent, 1)?;
    let logits = Linear::bind("head", params)?.forward(tape, pooled)?;
    tape.set_stage(prev);
    Ok(logits)
}

/// Mean cross entropy of `logits` against integer `labels`, evaluated without a tape.
pub fn sparse_categorical_crossentropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<T> {
    crate::tensor::sparse_cross_entropy(logits, labels).map(|(loss, _)| loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_geometries() {
        let s = ModelConfig::sipakmed();
        assert_eq!((s.num_patches(), s.projection_dim), (256, 256));
        let h = ModelConfig::herlev();
        assert_eq!((h.num_patches(), h.projection_dim), (1296, 256));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny();
        c.patch_size = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_image_embeds_to_positions() {
        let model = Model::<f64>::new(ModelConfig::tiny()).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let images = tape.constant(Tensor::zeros(vec![2, 8, 8, 3]));
        let data = embed_image(&mut tape, images, &bound, &model.config).unwrap();
        let pos = model.params.get("embed.position").unwrap();
        let out = tape.value(data);
        assert_eq!(out.shape(), &[2, 4, 8]);
        assert_eq!(&out.data()[..32], pos.data());
        assert_eq!(&out.data()[32..], pos.data());
    }

    #[test]
    fn wrong_image_size_is_dimension_error() {
        let model = Model::<f32>::new(ModelConfig::tiny()).unwrap();
        let err = model
            .logits(&Tensor::zeros(vec![1, 16, 16, 3]))
            .unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                op: "embed_image",
                ..
            }
        ));
    }

    #[test]
    fn patches_are_row_major() {
        // One-hot images: a single lit pixel must land in the patch that
        // contains it, at the offset (row, col, channel) inside that patch.
        let cfg = ModelConfig::tiny();
        let mut tape = Tape::<f64>::new();
        let mut img = Tensor::zeros(vec![1, 8, 8, 3]);
        // pixel (row 5, col 2, channel 1) -> patch (1, 0) = index 2; inner offset (1*4 + 2)*3 + 1.
        img.data_mut()[(5 * 8 + 2) * 3 + 1] = 1.0;
        let x = tape.constant(img);
        let x = tape.reshape(x, &[1, 2, 4, 2, 4, 3]).unwrap();
        let x = tape.permute(x, &[0, 1, 3, 2, 4, 5]).unwrap();
        let x = tape.reshape(x, &[1, 4, 48]).unwrap();
        let patches = tape.value(x);
        assert_eq!(patches.get(&[0, 2, (4 + 2) * 3 + 1]), 1.0);
        assert_eq!(patches.sum_all(), 1.0);
        let _ = cfg;
    }

    #[test]
    fn logits_shapes_for_both_tasks() {
        for (k, classes) in [(3, 3), (2, 2)] {
            let cfg = ModelConfig {
                num_classes: k,
                ..ModelConfig::tiny()
            };
            let model = Model::<f32>::new(cfg).unwrap();
            let logits = model.logits(&Tensor::zeros(vec![5, 8, 8, 3])).unwrap();
            assert_eq!(logits.shape(), &[5, classes]);
        }
    }

    #[test]
    fn cross_entropy_helper() {
        let loss =
            sparse_categorical_crossentropy(&Tensor::<f64>::zeros(vec![2, 3]), &[0, 2]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }
}

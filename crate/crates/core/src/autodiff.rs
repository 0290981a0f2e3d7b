//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! return [`Var`] handles into the tape; [`Tape::backward`] walks the recorded
//! nodes in reverse and returns the gradient of every registered parameter.
//! A tape is single-threaded and single-use: one per forward/backward pass.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Element, LayerNormCache, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which part of the model a matrix product belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FlopStage {
    Embedding,
    CrossAttention,
    LatentTransformer,
    Head,
    Other,
}

/// Role of a matrix product inside its stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatmulKind {
    /// `q kᵀ`
    AttentionScores,
    /// `softmax(q kᵀ) v`
    AttentionValues,
    /// Projections, feed-forward and classifier products.
    Dense,
}

/// Matmul flops executed on a tape, keyed by stage and product kind.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopLedger {
    entries: BTreeMap<(FlopStage, MatmulKind), u64>,
}

impl FlopLedger {
    pub fn record(&mut self, stage: FlopStage, kind: MatmulKind, flops: u64) {
        *self.entries.entry((stage, kind)).or_default() += flops;
    }

    pub fn get(&self, stage: FlopStage, kind: MatmulKind) -> u64 {
        self.entries.get(&(stage, kind)).copied().unwrap_or(0)
    }

    pub fn stage_total(&self, stage: FlopStage) -> u64 {
        self.entries
            .iter()
            .filter(|((s, _), _)| *s == stage)
            .map(|(_, v)| v)
            .sum()
    }

    /// Score plus value products of a stage.
    pub fn attention_products(&self, stage: FlopStage) -> u64 {
        self.get(stage, MatmulKind::AttentionScores) + self.get(stage, MatmulKind::AttentionValues)
    }

    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var, usize),
    AttentionWeights {
        q: Var,
        k: Var,
        scale: T,
        mask: Option<Var>,
    },
    LayerNorm {
        x: Var,
        scale: Var,
        offset: Var,
        cache: LayerNormCache<T>,
    },
    Gelu(Var),
    Dropout(Var, Vec<T>),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Softmax(..) => "softmax",
            Op::AttentionWeights { .. } => "attention_weights",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Dropout(..) => "dropout",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::SumAll(..) => "sum",
            Op::CrossEntropy { .. } => "sparse_cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.map.insert(name.into(), grad);
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }
}

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    consumed: bool,
    strict_finite: bool,
    stage: FlopStage,
    flops: FlopLedger,
    captured: Option<Vec<(String, Tensor<T>)>>,
    grad_fault: Option<(&'static str, T)>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
            strict_finite: false,
            stage: FlopStage::Other,
            flops: FlopLedger::default(),
            captured: None,
            grad_fault: None,
        }
    }

    /// Fail any operation whose output contains NaN or infinity.
    pub fn strict_finite(mut self, on: bool) -> Self {
        self.strict_finite = on;
        self
    }

    /// Keep a copy of every attention-weight tensor passed to [`Tape::capture`].
    pub fn capture_attention(mut self) -> Self {
        self.captured = Some(Vec::new());
        self
    }

    pub fn captured(&self) -> &[(String, Tensor<T>)] {
        self.captured.as_deref().unwrap_or(&[])
    }

    pub fn is_capturing(&self) -> bool {
        self.captured.is_some()
    }

    pub fn capture(&mut self, label: impl Into<String>, var: Var) {
        if let Some(captured) = &mut self.captured {
            captured.push((label.into(), self.nodes[var.0].value.clone()));
        }
    }

    /// Scales the input gradients of every `op` node by `factor` during
    /// backward. Exists so gradient checks can be shown to catch a faulty op.
    #[doc(hidden)]
    pub fn inject_grad_fault(&mut self, op: &'static str, factor: T) {
        self.grad_fault = Some((op, factor));
    }

    pub fn set_stage(&mut self, stage: FlopStage) -> FlopStage {
        std::mem::replace(&mut self.stage, stage)
    }

    pub fn flops(&self) -> &FlopLedger {
        &self.flops
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        if self.strict_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; no gradient flows to it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named trainable input whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        let var = Var(self.nodes.len() - 1);
        self.params.push((name.into(), var));
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_kind(a, b, MatmulKind::Dense)
    }

    pub fn matmul_kind(&mut self, a: Var, b: Var, kind: MatmulKind) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let flops = tensor::matmul_flops(self.shape(a), self.shape(b));
        self.flops.record(self.stage, kind, flops);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::zip_broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::zip_broadcast("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::zip_broadcast("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(x), axis)?;
        self.push(out, Op::Softmax(x, axis), &[x])
    }

    /// `softmax(scale · q kᵀ + mask)` over the last axis. Records the score
    /// product as [`MatmulKind::AttentionScores`].
    pub fn attention_weights(
        &mut self,
        q: Var,
        k: Var,
        scale: T,
        mask: Option<Var>,
    ) -> Result<Var> {
        let out = tensor::attention_weights(
            self.value(q),
            self.value(k),
            scale,
            mask.map(|m| self.value(m)),
        )?;
        let mut kt = self.shape(k).to_vec();
        let r = kt.len();
        kt.swap(r - 2, r - 1);
        let flops = tensor::matmul_flops(self.shape(q), &kt);
        self.flops
            .record(self.stage, MatmulKind::AttentionScores, flops);
        let parents: Vec<Var> = [q, k].into_iter().chain(mask).collect();
        self.push(out, Op::AttentionWeights { q, k, scale, mask }, &parents)
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var, eps: f64) -> Result<Var> {
        let (out, cache) =
            tensor::layer_norm(self.value(x), self.value(scale), self.value(offset), eps)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                scale,
                offset,
                cache,
            },
            &[x, scale, offset],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = tensor::gelu(self.value(x));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !training || rate == 0.0 {
            tensor::check_dropout_rate(rate)?;
            return Ok(x);
        }
        let (out, mask) = tensor::dropout(self.value(x), rate, training, rng)?;
        match mask {
            None => Ok(x),
            Some(mask) => self.push(out, Op::Dropout(x, mask), &[x]),
        }
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = tensor::permute(self.value(x), perm)?;
        self.push(out, Op::Permute(x, perm.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let target = tensor::broadcast_shape("broadcast_to", src.shape(), shape)?;
        if target != shape {
            return Err(Error::dim(
                "broadcast_to",
                format!("cannot broadcast {:?} to {:?}", src.shape(), shape),
            ));
        }
        let zeros = Tensor::zeros(shape.to_vec());
        let out = tensor::zip_broadcast("broadcast_to", &zeros, src, |_, v| v)?;
        self.push(out, Op::BroadcastTo(x), &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::sum_axis(self.value(x), axis)?;
        self.push(out, Op::SumAxis(x, axis), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or(Error::Index {
            op: "mean_axis",
            axis,
            rank: self.shape(x).len(),
        })?;
        let inv = T::one() / T::of(len as f64);
        let out = tensor::sum_axis(self.value(x), axis)?.map(|v| v * inv);
        self.push(out, Op::MeanAxis(x, axis), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum_all());
        self.push(out, Op::SumAll(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under the row softmax of `logits`.
    pub fn sparse_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = tensor::sparse_cross_entropy(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `loss`. Every registered parameter gets an
    /// entry; parameters that did not influence the loss get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::State("backward called on a consumed tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(Tensor::new(
            nodes[loss.0].value.shape().to_vec(),
            vec![T::one()],
        )?);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contribs: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = tensor::matmul_backward(val(*a), val(*b), &g);
                    contribs.push((*a, ga));
                    contribs.push((*b, gb));
                }
                Op::Add(a, b) => {
                    contribs.push((*a, tensor::reduce_to_shape(&g, val(*a).shape())));
                    contribs.push((*b, tensor::reduce_to_shape(&g, val(*b).shape())));
                }
                Op::Sub(a, b) => {
                    contribs.push((*a, tensor::reduce_to_shape(&g, val(*a).shape())));
                    let neg = g.map(|v| -v);
                    contribs.push((*b, tensor::reduce_to_shape(&neg, val(*b).shape())));
                }
                Op::Mul(a, b) => {
                    let ga = tensor::zip_broadcast("mul", &g, val(*b), |x, y| x * y)?;
                    let gb = tensor::zip_broadcast("mul", &g, val(*a), |x, y| x * y)?;
                    contribs.push((*a, tensor::reduce_to_shape(&ga, val(*a).shape())));
                    contribs.push((*b, tensor::reduce_to_shape(&gb, val(*b).shape())));
                }
                Op::Scale(x, c) => contribs.push((*x, g.map(|v| v * *c))),
                Op::Softmax(x, axis) => {
                    contribs.push((*x, tensor::softmax_backward(&node.value, &g, *axis)))
                }
                Op::AttentionWeights { q, k, scale, mask } => {
                    let gs = tensor::softmax_backward(&node.value, &g, node.value.rank() - 1);
                    if let Some(m) = mask {
                        contribs.push((*m, tensor::reduce_to_shape(&gs, val(*m).shape())));
                    }
                    let (gq, gk) = tensor::attention_scores_backward(val(*q), val(*k), *scale, &gs);
                    contribs.push((*q, gq));
                    contribs.push((*k, gk));
                }
                Op::LayerNorm {
                    x,
                    scale,
                    offset,
                    cache,
                } => {
                    let (dx, ds, doff) = tensor::layer_norm_backward(cache, val(*scale), &g);
                    contribs.push((*x, dx));
                    contribs.push((*scale, ds));
                    contribs.push((*offset, doff));
                }
                Op::Gelu(x) => {
                    let xs = val(*x);
                    let data = xs
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| gv * tensor::gelu_grad_scalar(xv))
                        .collect();
                    contribs.push((*x, Tensor::new(xs.shape().to_vec(), data)?));
                }
                Op::Dropout(x, mask) => {
                    let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    contribs.push((*x, Tensor::new(g.shape().to_vec(), data)?));
                }
                Op::Permute(x, perm) => {
                    contribs.push((*x, tensor::permute(&g, &tensor::inverse_permutation(perm))?))
                }
                Op::Reshape(x) => contribs.push((*x, g.reshape(val(*x).shape().to_vec())?)),
                Op::BroadcastTo(x) => {
                    contribs.push((*x, tensor::reduce_to_shape(&g, val(*x).shape())))
                }
                Op::SumAxis(x, axis) => contribs.push((
                    *x,
                    tensor::expand_axis(&g, val(*x).shape(), *axis, T::one()),
                )),
                Op::MeanAxis(x, axis) => {
                    let shape = val(*x).shape();
                    let inv = T::one() / T::of(shape[*axis] as f64);
                    contribs.push((*x, tensor::expand_axis(&g, shape, *axis, inv)))
                }
                Op::SumAll(x) => {
                    let gv = g.data()[0];
                    contribs.push((*x, Tensor::full(val(*x).shape().to_vec(), gv)))
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = probs.shape()[1];
                    let scale = g.data()[0] / T::of(labels.len() as f64);
                    let mut d = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        d.data_mut()[r * k + l] = d.data()[r * k + l] - T::one();
                    }
                    contribs.push((*logits, d.map(|v| v * scale)));
                }
            }
            if let Some((fault_op, factor)) = self.grad_fault {
                if fault_op == node.op.name() {
                    for (_, c) in contribs.iter_mut() {
                        *c = c.map(|v| v * factor);
                    }
                }
            }
            for (parent, contrib) in contribs {
                if !nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut out = Gradients::default();
        for (name, var) in std::mem::take(&mut self.params) {
            let grad = grads[var.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(nodes[var.0].value.shape().to_vec()));
            match out.map.get_mut(&name) {
                Some(acc) => acc.add_assign(&grad),
                None => {
                    out.map.insert(name, grad);
                }
            }
        }
        Ok(out)
    }
}

//! Dense row-major tensors and the forward/backward kernels the tape is built on.
//!
//! Everything here is a plain function over owned or borrowed [`Tensor`]s; the
//! gradient tape in [`crate::autodiff`] wraps these kernels and records what it
//! needs to run them in reverse.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Element: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C <- alpha * A B + beta * C` on strided matrices.
    ///
    /// # Safety
    /// All strides and dimensions must address memory inside the pointed-to
    /// buffers; see [`matrixmultiply::sgemm`].
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<T>(), self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::dim(
                "tensor",
                format!("zero-sized dimension in {shape:?}"),
            ));
        }
        if numel(&shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from `f64` values, converting to the element type.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Gaussian samples with mean 0 and standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..numel(&shape))
            .map(|_| T::of(normal.sample(rng)))
            .collect();
        Tensor { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| T::of(rng.random_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::dim(
                "item",
                format!("expected one element, shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of size {d}");
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape, shape),
            ));
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Adds `other` elementwise in place; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::arg("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim(
                    "stack",
                    format!("{:?} vs {:?}", first.shape, t.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

// ---------------------------------------------------------------------------
// Broadcasting

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Element strides of `shape` when viewed inside the broadcast shape `out`;
/// broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 || out[i + offset] == 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Visits every multi-index of `shape` in row-major order, passing the flat
/// offsets under each stride set.
fn for_each_offset<const K: usize>(
    shape: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut([usize; K]),
) {
    let total = numel(shape);
    if shape.is_empty() {
        f([0; K]);
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offs = [0usize; K];
    for _ in 0..total {
        f(offs);
        let mut axis = rank;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            for k in 0..K {
                offs[k] += strides[k][axis];
            }
            if idx[axis] < shape[axis] {
                break;
            }
            for k in 0..K {
                offs[k] -= strides[k][axis] * shape[axis];
            }
            idx[axis] = 0;
        }
    }
}

/// Elementwise binary operation with broadcasting.
pub fn zip_broadcast<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out = broadcast_shape(op, &a.shape, &b.shape)?;
    // Fast path: `b` is a trailing block repeated over `a`.
    if out == a.shape && is_suffix_block(&b.shape, &a.shape) {
        let n = b.data.len();
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[i % n]))
            .collect();
        return Ok(Tensor { shape: out, data });
    }
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = Vec::with_capacity(numel(&out));
    for_each_offset(&out, [&sa, &sb], |[ia, ib]| {
        data.push(f(a.data[ia], b.data[ib]))
    });
    Ok(Tensor { shape: out, data })
}

/// True when `small` (after stripping leading 1s) equals the trailing axes of `big`.
fn is_suffix_block(small: &[usize], big: &[usize]) -> bool {
    let first = small.iter().position(|&d| d != 1).unwrap_or(small.len());
    let core = &small[first..];
    core.len() <= big.len() && big[big.len() - core.len()..] == *core
}

/// Sums `grad` (shaped like a broadcast result) down to `shape`.
pub fn reduce_to_shape<T: Element>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape.to_vec());
    if is_suffix_block(shape, &grad.shape) {
        let n = out.data.len();
        for (i, &g) in grad.data.iter().enumerate() {
            out.data[i % n] = out.data[i % n] + g;
        }
        return out;
    }
    let so = broadcast_strides(shape, &grad.shape);
    let ident = broadcast_strides(&grad.shape, &grad.shape);
    for_each_offset(&grad.shape, [&ident, &so], |[ig, io]| {
        out.data[io] = out.data[io] + grad.data[ig];
    });
    out
}

// ---------------------------------------------------------------------------
// Matrix products

struct Operand<'a, T> {
    data: &'a [T],
    batch_strides: Vec<usize>,
    rs: isize,
    cs: isize,
}

/// Runs one gemm per broadcast batch index, accumulating into `c`.
/// `c` must be pre-initialised; its per-batch blocks are row-major m×n.
#[allow(clippy::too_many_arguments)]
fn batched_gemm<T: Element>(
    batch: &[usize],
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    c: &mut [T],
    c_batch_strides: &[usize],
) {
    let extent = |op: &Operand<'_, T>, rows: usize, cols: usize| -> usize {
        let mut max =
            (rows.saturating_sub(1)) as isize * op.rs + (cols.saturating_sub(1)) as isize * op.cs;
        for (d, s) in batch.iter().zip(&op.batch_strides) {
            max += ((d - 1) * s) as isize;
        }
        max as usize
    };
    assert!(extent(&a, m, k) < a.data.len(), "gemm: lhs out of bounds");
    assert!(extent(&b, k, n) < b.data.len(), "gemm: rhs out of bounds");
    let c_extent = m * n - 1
        + batch
            .iter()
            .zip(c_batch_strides)
            .map(|(d, s)| (d - 1) * s)
            .sum::<usize>();
    assert!(c_extent < c.len(), "gemm: output out of bounds");

    for_each_offset(
        batch,
        [&a.batch_strides, &b.batch_strides, c_batch_strides],
        |[oa, ob, oc]| {
            // SAFETY: bounds of every operand were checked above against the
            // largest offset reachable through the batch and matrix strides.
            unsafe {
                T::gemm_raw(
                    m,
                    k,
                    n,
                    T::one(),
                    a.data.as_ptr().add(oa),
                    a.rs,
                    a.cs,
                    b.data.as_ptr().add(ob),
                    b.rs,
                    b.cs,
                    T::one(),
                    c.as_mut_ptr().add(oc),
                    n as isize,
                    1,
                );
            }
        },
    );
}

fn split_matrix(op: &'static str, shape: &[usize]) -> Result<(Vec<usize>, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(op, format!("need rank >= 2, got {shape:?}")));
    }
    let r = shape.len();
    Ok((shape[..r - 2].to_vec(), shape[r - 2], shape[r - 1]))
}

/// Strides for a batch operand, given its own batch shape, inside `batch`.
fn operand_batch_strides(own: &[usize], batch: &[usize], mat: usize) -> Vec<usize> {
    broadcast_strides(own, batch)
        .iter()
        .map(|s| s * mat)
        .collect()
}

/// Matrix product over the last two axes, broadcasting leading axes.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, p, q) = split_matrix("matmul", &a.shape)?;
    let (bb, q2, r) = split_matrix("matmul", &b.shape)?;
    if q != q2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let batch = broadcast_shape("matmul", &ba, &bb).map_err(|_| {
        Error::dim(
            "matmul",
            format!("batch dims of {:?} x {:?}", a.shape, b.shape),
        )
    })?;
    let mut shape = batch.clone();
    shape.extend([p, r]);
    let mut out = vec![T::zero(); numel(&shape)];
    if bb.is_empty() {
        // Weight-style rhs: fold every leading axis of `a` into the row count.
        let rows = numel(&ba) * p;
        batched_gemm(
            &[],
            rows,
            q,
            r,
            Operand {
                data: &a.data,
                batch_strides: vec![],
                rs: q as isize,
                cs: 1,
            },
            Operand {
                data: &b.data,
                batch_strides: vec![],
                rs: r as isize,
                cs: 1,
            },
            &mut out,
            &[],
        );
    } else {
        let c_strides = operand_batch_strides(&batch, &batch, p * r);
        batched_gemm(
            &batch,
            p,
            q,
            r,
            Operand {
                data: &a.data,
                batch_strides: operand_batch_strides(&ba, &batch, p * q),
                rs: q as isize,
                cs: 1,
            },
            Operand {
                data: &b.data,
                batch_strides: operand_batch_strides(&bb, &batch, q * r),
                rs: r as isize,
                cs: 1,
            },
            &mut out,
            &c_strides,
        );
    }
    Tensor::new(shape, out)
}

/// Gradients of `matmul(a, b)` given the upstream gradient `g`.
pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (ba, p, q) = split_matrix("matmul", &a.shape).expect("checked in forward");
    let (bb, _, r) = split_matrix("matmul", &b.shape).expect("checked in forward");
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    if bb.is_empty() {
        let rows = numel(&ba) * p;
        // dA = G B^T
        batched_gemm(
            &[],
            rows,
            r,
            q,
            Operand {
                data: &g.data,
                batch_strides: vec![],
                rs: r as isize,
                cs: 1,
            },
            Operand {
                data: &b.data,
                batch_strides: vec![],
                rs: 1,
                cs: r as isize,
            },
            &mut ga,
            &[],
        );
        // dB = A^T G
        batched_gemm(
            &[],
            q,
            rows,
            r,
            Operand {
                data: &a.data,
                batch_strides: vec![],
                rs: 1,
                cs: q as isize,
            },
            Operand {
                data: &g.data,
                batch_strides: vec![],
                rs: r as isize,
                cs: 1,
            },
            &mut gb,
            &[],
        );
    } else {
        let batch = g.shape[..g.rank() - 2].to_vec();
        let g_strides = operand_batch_strides(&batch, &batch, p * r);
        let a_strides = operand_batch_strides(&ba, &batch, p * q);
        let b_strides = operand_batch_strides(&bb, &batch, q * r);
        batched_gemm(
            &batch,
            p,
            r,
            q,
            Operand {
                data: &g.data,
                batch_strides: g_strides.clone(),
                rs: r as isize,
                cs: 1,
            },
            Operand {
                data: &b.data,
                batch_strides: b_strides.clone(),
                rs: 1,
                cs: r as isize,
            },
            &mut ga,
            &a_strides,
        );
        batched_gemm(
            &batch,
            q,
            p,
            r,
            Operand {
                data: &a.data,
                batch_strides: a_strides,
                rs: 1,
                cs: q as isize,
            },
            Operand {
                data: &g.data,
                batch_strides: g_strides,
                rs: r as isize,
                cs: 1,
            },
            &mut gb,
            &b_strides,
        );
    }
    (
        Tensor {
            shape: a.shape.clone(),
            data: ga,
        },
        Tensor {
            shape: b.shape.clone(),
            data: gb,
        },
    )
}

/// Multiply-add count of `matmul(a, b)` expressed as flops (2 per MAC).
pub fn matmul_flops(a: &[usize], b: &[usize]) -> u64 {
    let r = a.len();
    let (p, q) = (a[r - 2], a[r - 1]);
    let n = b[b.len() - 1];
    let batch = broadcast_shape("matmul", &a[..r - 2], &b[..b.len() - 2]).unwrap_or_default();
    2 * numel(&batch) as u64 * (p * q * n) as u64
}

// ---------------------------------------------------------------------------
// Layout ops

/// Reorders axes; `perm[i]` is the source axis of output axis `i`.
pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::dim(
            "permute",
            format!("{perm:?} is not a permutation of rank {rank}"),
        ));
    }
    let src_strides = broadcast_strides(&x.shape, &x.shape);
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut data = Vec::with_capacity(x.len());
    for_each_offset(&shape, [&strides], |[o]| data.push(x.data[o]));
    Ok(Tensor { shape, data })
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// (outer, axis length, inner) decomposition around `axis`.
pub(crate) fn axis_split(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Index {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

/// Sum along `axis`, removing it (rank-1 inputs keep a single element).
pub fn sum_axis<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split("sum_axis", &x.shape, axis)?;
    let mut data = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                data[o * inner + i] = data[o * inner + i] + x.data[base + i];
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, data)
}

/// Repeats `g` (shaped like `x` with `axis` removed) along `axis` of `shape`.
pub(crate) fn expand_axis<T: Element>(
    g: &Tensor<T>,
    shape: &[usize],
    axis: usize,
    scale: T,
) -> Tensor<T> {
    let (outer, len, inner) = axis_split("expand_axis", shape, axis).expect("valid axis");
    let mut data = vec![T::zero(); numel(shape)];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                data[base + i] = g.data[o * inner + i] * scale;
            }
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalisation

/// Softmax along `axis`, stabilised by subtracting each slice's maximum.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split("softmax", &x.shape, axis)?;
    let mut out = vec![T::zero(); x.len()];
    if inner == 1 && len > 0 {
        out.copy_from_slice(&x.data);
        softmax_rows_in_place(&mut out, len);
        return Tensor::new(x.shape.clone(), out);
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..len {
                max = max.max(x.data[at(a)]);
            }
            let mut total = T::zero();
            for a in 0..len {
                let e = (x.data[at(a)] - max).exp();
                out[at(a)] = e;
                total = total + e;
            }
            for a in 0..len {
                out[at(a)] = out[at(a)] / total;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

fn softmax_rows_in_place<T: Element>(data: &mut [T], len: usize) {
    for row in data.chunks_exact_mut(len) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

fn swap_last_two(rank: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..rank).collect();
    p.swap(rank - 2, rank - 1);
    p
}

/// `softmax(scale · q kᵀ + mask)` over the last axis for `q: [.., Tq, d]`
/// and `k: [.., Tk, d]`. The scores are written straight into the output
/// buffer and normalised in place.
pub fn attention_weights<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    scale: T,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (bq, tq, d) = split_matrix("attention_weights", &q.shape)?;
    let (bk, tk, d2) = split_matrix("attention_weights", &k.shape)?;
    if d != d2 {
        return Err(Error::dim(
            "attention_weights",
            format!("query {:?} vs key {:?} widths", q.shape, k.shape),
        ));
    }
    let batch = broadcast_shape("attention_weights", &bq, &bk)?;
    let mut shape = batch.clone();
    shape.extend([tq, tk]);
    let qs = q.map(|v| v * scale);
    let mut out = vec![T::zero(); numel(&shape)];
    if !out.is_empty() && d > 0 {
        batched_gemm(
            &batch,
            tq,
            d,
            tk,
            Operand {
                data: &qs.data,
                batch_strides: operand_batch_strides(&bq, &batch, tq * d),
                rs: d as isize,
                cs: 1,
            },
            Operand {
                data: &k.data,
                batch_strides: operand_batch_strides(&bk, &batch, tk * d),
                rs: 1,
                cs: d as isize,
            },
            &mut out,
            &operand_batch_strides(&batch, &batch, tq * tk),
        );
    }
    let mut scores = Tensor { shape, data: out };
    match mask {
        Some(m) if m.shape == [tq, tk] => {
            for block in scores.data.chunks_exact_mut(tq * tk) {
                block
                    .iter_mut()
                    .zip(&m.data)
                    .for_each(|(s, &v)| *s = *s + v);
            }
        }
        Some(m) => {
            let masked = zip_broadcast("attention_weights", &scores, m, |s, v| s + v)?;
            if masked.shape != scores.shape {
                return Err(Error::dim(
                    "attention_weights",
                    format!("mask {:?} widens scores {:?}", m.shape, scores.shape),
                ));
            }
            scores = masked;
        }
        None => {}
    }
    if tk > 0 {
        softmax_rows_in_place(&mut scores.data, tk);
    }
    Ok(scores)
}

/// Gradients of `scale · q kᵀ` with respect to `q` and `k`, given the
/// upstream gradient `g` of the scores.
pub fn attention_scores_backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    scale: T,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let qs = q.map(|v| v * scale);
    let kt = permute(k, &swap_last_two(k.rank())).expect("rank checked in forward");
    let (gq, gkt) = matmul_backward(&qs, &kt, g);
    let gk = permute(&gkt, &swap_last_two(gkt.rank())).expect("rank checked in forward");
    (gq.map(|v| v * scale), gk)
}

/// Given softmax output `y` and upstream `g`: `y * (g - sum(g * y))` per slice.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split("softmax", &y.shape, axis).expect("valid axis");
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let dot: T = (0..len).map(|a| g.data[at(a)] * y.data[at(a)]).sum();
            for a in 0..len {
                out[at(a)] = y.data[at(a)] * (g.data[at(a)] - dot);
            }
        }
    }
    Tensor {
        shape: y.shape.clone(),
        data: out,
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalised values and inverse standard deviations kept for the backward pass.
pub struct LayerNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Layer normalisation over the last axis followed by `scale * x̂ + offset`.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    offset: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let c = *x.shape.last().expect("tensors have rank >= 1");
    if scale.shape != [c] || offset.shape != [c] {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "input {:?} with scale {:?} and offset {:?}",
                x.shape, scale.shape, offset.shape
            ),
        ));
    }
    let rows = x.len() / c;
    let n = T::of(c as f64);
    let eps = T::of(eps);
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..c {
            let h = (row[j] - mean) * inv;
            xhat[r * c + j] = h;
            out[r * c + j] = h * scale.data[j] + offset.data[j];
        }
    }
    Ok((
        Tensor::new(x.shape.clone(), out)?,
        LayerNormCache {
            normalized: Tensor::new(x.shape.clone(), xhat)?,
            inv_std,
        },
    ))
}

/// Returns (dx, dscale, doffset).
pub fn layer_norm_backward<T: Element>(
    cache: &LayerNormCache<T>,
    scale: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = scale.len();
    let rows = g.len() / c;
    let n = T::of(c as f64);
    let xhat = &cache.normalized.data;
    let mut dx = vec![T::zero(); g.len()];
    let mut dscale = vec![T::zero(); c];
    let mut doffset = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for r in 0..rows {
        let base = r * c;
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..c {
            let gj = g.data[base + j];
            dscale[j] = dscale[j] + gj * xhat[base + j];
            doffset[j] = doffset[j] + gj;
            dxhat[j] = gj * scale.data[j];
            mean_d = mean_d + dxhat[j];
            mean_dx = mean_dx + dxhat[j] * xhat[base + j];
        }
        mean_d = mean_d / n;
        mean_dx = mean_dx / n;
        let inv = cache.inv_std[r];
        for j in 0..c {
            dx[base + j] = inv * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
        }
    }
    (
        Tensor {
            shape: g.shape.clone(),
            data: dx,
        },
        Tensor {
            shape: vec![c],
            data: dscale,
        },
        Tensor {
            shape: vec![c],
            data: doffset,
        },
    )
}

/// sqrt(2/pi), the tanh-approximation GELU scale.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-approximation GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar<T: Element>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_SQRT_2_OVER_PI) * (x + T::of(GELU_CUBIC) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad_scalar<T: Element>(x: T) -> T {
    let half = T::of(0.5);
    let k = T::of(GELU_SQRT_2_OVER_PI);
    let c = T::of(GELU_CUBIC);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + T::of(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (0 or `1/(1-rate)`), or `None` when the input passes through untouched.
pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::arg(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )))
    }
}

pub fn dropout<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let data = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data,
        },
        Some(mask),
    ))
}

/// Per-row log-sum-exp cross entropy against integer labels, averaged over rows.
/// Returns the loss and the row softmax used by the backward pass.
pub fn sparse_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 {
        return Err(Error::dim(
            "sparse_cross_entropy",
            format!("logits must be [B, K], got {:?}", logits.shape),
        ));
    }
    let (b, k) = (logits.shape[0], logits.shape[1]);
    if labels.len() != b {
        return Err(Error::dim(
            "sparse_cross_entropy",
            format!("{} labels for logits {:?}", labels.len(), logits.shape),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::arg(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax(logits, 1)?;
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total = total + (lse - row[label]);
    }
    Ok((total / T::of(b as f64), probs))
}

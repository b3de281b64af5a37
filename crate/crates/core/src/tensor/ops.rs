use super::kernels::{contiguous_strides, for_each_strided, gemm_nn, gemm_nt, gemm_tn};
use super::tape::GradSink;
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
// 1/sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// How a per-example loss is reduced over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

pub(crate) enum Op<T: Scalar> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    MatMul(Tensor<T>, Tensor<T>),
    BatchMatMul {
        a: Tensor<T>,
        b: Tensor<T>,
        transpose_b: bool,
    },
    Reshape(Tensor<T>),
    Permute {
        input: Tensor<T>,
        strides: Vec<usize>,
    },
    Slice {
        input: Tensor<T>,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Tensor<T>>,
        axis: usize,
    },
    BroadcastTo {
        input: Tensor<T>,
        strides: Vec<usize>,
    },
    Softmax(Tensor<T>),
    GatedSoftmax {
        input: Tensor<T>,
        gate: Tensor<T>,
        /// exp(x - max) / Z per element
        unit: Vec<T>,
    },
    Gelu(Tensor<T>),
    LayerNorm {
        input: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(Tensor<T>),
    Mean(Tensor<T>),
    CrossEntropy {
        logits: Tensor<T>,
        targets: Vec<usize>,
        probs: Vec<T>,
        reduction: Reduction,
    },
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn any_grad<T: Scalar>(ts: &[&Tensor<T>]) -> bool {
    ts.iter().any(|t| t.requires_grad())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    let (a, b) = (a.data(), b.data());
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

/// Concatenates tensors along `axis`. All other dimensions must agree.
pub fn concat<T: Scalar>(tensors: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if tensors.len() == 1 {
        return Ok((*first).clone());
    }
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    for t in tensors {
        let ok = t.rank() == rank
            && t
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!(
                    "shape {:?} incompatible with {:?} along axis {axis}",
                    t.shape(),
                    first.shape()
                ),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = tensors.iter().map(|t| t.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    let mut out = Vec::with_capacity(numel(&shape));
    let datas: Vec<_> = tensors.iter().map(|t| t.data()).collect();
    for o in 0..outer {
        for (t, d) in tensors.iter().zip(&datas) {
            let block = t.shape()[axis] * inner;
            out.extend_from_slice(&d[o * block..(o + 1) * block]);
        }
    }
    drop(datas);
    Tensor::from_op("concat", shape, out, any_grad(tensors), || Op::Concat {
        inputs: tensors.iter().map(|t| (*t).clone()).collect(),
        axis,
    })
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = zip_map(self, other, |a, b| a + b);
        Tensor::from_op("add", self.shape().to_vec(), data, any_grad(&[self, other]), || {
            Op::Add(self.clone(), other.clone())
        })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = zip_map(self, other, |a, b| a - b);
        Tensor::from_op("sub", self.shape().to_vec(), data, any_grad(&[self, other]), || {
            Op::Sub(self.clone(), other.clone())
        })
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = zip_map(self, other, |a, b| a * b);
        Tensor::from_op("mul", self.shape().to_vec(), data, any_grad(&[self, other]), || {
            Op::Mul(self.clone(), other.clone())
        })
    }

    pub fn scale(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::of(c);
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op("scale", self.shape().to_vec(), data, self.requires_grad(), || {
            Op::Scale(self.clone(), c)
        })
    }

    /// Broadcasts `other` against trailing dimensions of `self`, then adds.
    pub fn add_broadcast(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.add(&other.broadcast_like(self.shape())?)
    }

    /// Broadcasts `other` against trailing dimensions of `self`, then multiplies.
    pub fn mul_broadcast(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.mul(&other.broadcast_like(self.shape())?)
    }

    fn broadcast_like(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        if self.rank() > shape.len() {
            return Err(Error::shape(
                "broadcast",
                format!("cannot broadcast {:?} to {shape:?}", self.shape()),
            ));
        }
        let mut padded = vec![1; shape.len() - self.rank()];
        padded.extend_from_slice(self.shape());
        self.reshape(&padded)?.broadcast_to(shape)
    }

    /// Standard matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, &self.data(), &other.data(), &mut out);
        Tensor::from_op("matmul", vec![m, n], out, any_grad(&[self, other]), || {
            Op::MatMul(self.clone(), other.clone())
        })
    }

    /// Batched product `[b×m×k] · [b×k×n]`.
    pub fn bmm(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.batch_matmul(other, false)
    }

    /// Batched product with the second operand transposed: `[b×m×k] · [b×n×k]ᵀ`.
    pub fn bmm_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.batch_matmul(other, true)
    }

    fn batch_matmul(&self, other: &Tensor<T>, transpose_b: bool) -> Result<Tensor<T>> {
        let bad = || {
            Error::shape(
                "bmm",
                format!(
                    "cannot batch-multiply {:?} by {:?}{}",
                    self.shape(),
                    other.shape(),
                    if transpose_b { "ᵀ" } else { "" }
                ),
            )
        };
        if self.rank() != 3 || other.rank() != 3 || self.shape()[0] != other.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (kb, n) = if transpose_b {
            (other.shape()[2], other.shape()[1])
        } else {
            (other.shape()[1], other.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (a, b) = (self.data(), other.data());
            for s in 0..batch {
                let a_s = &a[s * m * k..(s + 1) * m * k];
                let b_s = &b[s * k * n..(s + 1) * k * n];
                let o_s = &mut out[s * m * n..(s + 1) * m * n];
                if transpose_b {
                    gemm_nt(m, k, n, a_s, b_s, o_s);
                } else {
                    gemm_nn(m, k, n, a_s, b_s, o_s);
                }
            }
        }
        Tensor::from_op("bmm", vec![batch, m, n], out, any_grad(&[self, other]), || {
            Op::BatchMatMul {
                a: self.clone(),
                b: other.clone(),
                transpose_b,
            }
        })
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[k×n]`, `b` is `[n]`.
    pub fn linear(&self, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let k = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("linear", "scalar input"))?;
        let rows = self.numel() / k.max(1);
        let y = self.reshape(&[rows, k])?.matmul(w)?.add_broadcast(b)?;
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = w.shape()[1];
        y.reshape(&shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape()),
            ));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), self.requires_grad(), || {
            Op::Reshape(self.clone())
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("{axes:?} is not a permutation of rank {rank}"),
            ));
        }
        let in_strides = contiguous_strides(self.shape());
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = vec![T::zero(); self.numel()];
        {
            let src = self.data();
            for_each_strided(&shape, &strides, |i, off| out[i] = src[off]);
        }
        Tensor::from_op("permute", shape, out, self.requires_grad(), || Op::Permute {
            input: self.clone(),
            strides,
        })
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start > end || end > self.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", self.shape()),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let len = self.shape()[axis];
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        let mut out = Vec::with_capacity(numel(&shape));
        {
            let src = self.data();
            for o in 0..outer {
                let base = o * len * inner;
                out.extend_from_slice(&src[base + start * inner..base + end * inner]);
            }
        }
        Tensor::from_op("slice", shape, out, self.requires_grad(), || Op::Slice {
            input: self.clone(),
            axis,
            start,
        })
    }

    /// Expands size-1 axes to `shape` (ranks must match).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let ok = shape.len() == self.rank()
            && self
                .shape()
                .iter()
                .zip(shape)
                .all(|(&s, &t)| s == t || s == 1);
        if !ok {
            return Err(Error::shape(
                "broadcast_to",
                format!("cannot broadcast {:?} to {shape:?}", self.shape()),
            ));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let in_strides = contiguous_strides(self.shape());
        let strides: Vec<usize> = self
            .shape()
            .iter()
            .zip(in_strides)
            .map(|(&s, st)| if s == 1 { 0 } else { st })
            .collect();
        let mut out = vec![T::zero(); numel(shape)];
        {
            let src = self.data();
            for_each_strided(shape, &strides, |i, off| out[i] = src[off]);
        }
        Tensor::from_op("broadcast_to", shape.to_vec(), out, self.requires_grad(), || {
            Op::BroadcastTo {
                input: self.clone(),
                strides,
            }
        })
    }

    /// Softmax over the last axis, stabilised by subtracting each row's max.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax_rows", "scalar input"))?;
        let src = self.data();
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![T::zero(); src.len()];
        if n > 0 {
            for (row, o) in src.chunks(n).zip(out.chunks_mut(n)) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for (oj, &xj) in o.iter_mut().zip(row) {
                    *oj = (xj - mx).exp();
                    z += *oj;
                }
                for oj in o.iter_mut() {
                    *oj /= z;
                }
            }
        }
        drop(src);
        Tensor::from_op("softmax_rows", self.shape().to_vec(), out, self.requires_grad(), || {
            Op::Softmax(self.clone())
        })
    }

    /// Softmax over the last axis where entry `j` of each row is weighted by a
    /// gate: `a_j = g_j·e^{x_j} / Σ_l g_l·e^{x_l}`.
    ///
    /// `gate` is `[groups × n]`; the rows of `self` are split into `groups`
    /// equal consecutive blocks, block `i` using gate row `i`. A zero gate
    /// removes the entry exactly, as if the column were absent.
    pub fn softmax_rows_gated(&self, gate: &Tensor<T>) -> Result<Tensor<T>> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax_rows_gated", "scalar input"))?;
        if gate.rank() != 2 || gate.shape()[1] != n {
            return Err(Error::shape(
                "softmax_rows_gated",
                format!("gate {:?} does not match rows of length {n}", gate.shape()),
            ));
        }
        let groups = gate.shape()[0];
        let rows = self.numel() / n.max(1);
        if groups == 0 || rows % groups != 0 {
            return Err(Error::shape(
                "softmax_rows_gated",
                format!("{rows} rows cannot be split into {groups} gate groups"),
            ));
        }
        let per_group = rows / groups;
        let (src, g) = (self.data(), gate.data());
        let mut out = vec![T::zero(); src.len()];
        let mut unit = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let g_row = &g[(r / per_group) * n..(r / per_group + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let u = &mut unit[r * n..(r + 1) * n];
            let mut z = T::zero();
            for ((uj, &xj), &gj) in u.iter_mut().zip(row).zip(g_row) {
                *uj = (xj - mx).exp();
                z += gj * *uj;
            }
            if !(z > T::zero()) {
                return Err(Error::NonFinite { op: "softmax_rows_gated" });
            }
            let o = &mut out[r * n..(r + 1) * n];
            for ((oj, uj), &gj) in o.iter_mut().zip(u.iter_mut()).zip(g_row) {
                *oj = gj * *uj / z;
                *uj /= z;
            }
        }
        drop((src, g));
        Tensor::from_op(
            "softmax_rows_gated",
            self.shape().to_vec(),
            out,
            any_grad(&[self, gate]),
            || Op::GatedSoftmax {
                input: self.clone(),
                gate: gate.clone(),
                unit,
            },
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let half = T::of(0.5);
        let r2 = T::of(SQRT_2);
        let data = self
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (x / r2).erf()))
            .collect();
        Tensor::from_op("gelu", self.shape().to_vec(), data, self.requires_grad(), || {
            Op::Gelu(self.clone())
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "affine shapes {:?}/{:?} do not match feature dim {d}",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let rows = self.numel() / d.max(1);
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); self.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); self.numel()];
        {
            let (src, gm, bt) = (self.data(), gamma.data(), beta.data());
            for r in 0..rows {
                let x = &src[r * d..(r + 1) * d];
                let mean = x.iter().copied().sum::<T>() / dn;
                let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (x[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gm[j] + bt[j];
                }
            }
        }
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            any_grad(&[self, gamma, beta]),
            || Op::LayerNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
        )
    }

    pub fn sum(&self) -> Result<Tensor<T>> {
        let s = self.data().iter().copied().sum::<T>();
        Tensor::from_op("sum", vec![1], vec![s], self.requires_grad(), || Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        if self.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.data().iter().copied().sum::<T>() / T::of(self.numel() as f64);
        Tensor::from_op("mean", vec![1], vec![s], self.requires_grad(), || Op::Mean(self.clone()))
    }

    /// Softmax cross-entropy of `[batch × classes]` logits against class ids.
    pub fn cross_entropy(&self, targets: &[usize], reduction: Reduction) -> Result<Tensor<T>> {
        if self.rank() != 2 || self.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} vs {} targets", self.shape(), targets.len()),
            ));
        }
        let c = self.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {bad} out of range for {c} classes"),
            ));
        }
        let mut probs = vec![T::zero(); self.numel()];
        let mut loss = T::zero();
        {
            let src = self.data();
            for (b, &t) in targets.iter().enumerate() {
                let row = &src[b * c..(b + 1) * c];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
                let lz = z.ln();
                for j in 0..c {
                    probs[b * c + j] = (row[j] - mx - lz).exp();
                }
                loss += lz - (row[t] - mx);
            }
        }
        if reduction == Reduction::Mean {
            loss /= T::of(targets.len() as f64);
        }
        Tensor::from_op("cross_entropy", vec![1], vec![loss], self.requires_grad(), || {
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                probs,
                reduction,
            }
        })
    }
}

impl<T: Scalar> Op<T> {
    /// Pushes gradient contributions for every input that needs one.
    pub(crate) fn backward(&self, out: &Tensor<T>, g: &[T], sink: &mut GradSink<T>) {
        match self {
            Op::Add(a, b) => {
                for t in [a, b] {
                    if let Some(ga) = sink.buf(t) {
                        ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = sink.buf(a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = sink.buf(b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = sink.buf(a) {
                    let bd = b.data();
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(bd.iter()) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = sink.buf(b) {
                    let ad = a.data();
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(ad.iter()) {
                        *x += gy * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = sink.buf(a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += *c * y);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if let Some(ga) = sink.buf(a) {
                    gemm_nt(m, n, k, g, &b.data(), ga);
                }
                if let Some(gb) = sink.buf(b) {
                    gemm_tn(k, m, n, &a.data(), g, gb);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let n = if *transpose_b { b.shape()[1] } else { b.shape()[2] };
                if let Some(ga) = sink.buf(a) {
                    let bd = b.data();
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bs = &bd[s * k * n..(s + 1) * k * n];
                        let out = &mut ga[s * m * k..(s + 1) * m * k];
                        if *transpose_b {
                            // dA = dC · B, B is n×k
                            gemm_nn(m, n, k, gs, bs, out);
                        } else {
                            // dA = dC · Bᵀ, B is k×n
                            gemm_nt(m, n, k, gs, bs, out);
                        }
                    }
                }
                if let Some(gb) = sink.buf(b) {
                    let ad = a.data();
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &ad[s * m * k..(s + 1) * m * k];
                        let out = &mut gb[s * k * n..(s + 1) * k * n];
                        if *transpose_b {
                            // dB = dCᵀ · A  (n×k)
                            gemm_tn(n, m, k, gs, as_, out);
                        } else {
                            // dB = Aᵀ · dC  (k×n)
                            gemm_tn(k, m, n, as_, gs, out);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = sink.buf(a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Permute { input, strides } | Op::BroadcastTo { input, strides } => {
                if let Some(ga) = sink.buf(input) {
                    for_each_strided(out.shape(), strides, |i, off| ga[off] += g[i]);
                }
            }
            Op::Slice { input, axis, start } => {
                if let Some(ga) = sink.buf(input) {
                    let shape = input.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let len = shape[*axis];
                    let width = out.shape()[*axis] * inner;
                    for o in 0..outer {
                        let dst = &mut ga[o * len * inner + start * inner..][..width];
                        dst.iter_mut()
                            .zip(&g[o * width..(o + 1) * width])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out.shape()[..*axis].iter().product();
                let inner: usize = out.shape()[axis + 1..].iter().product();
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for t in inputs {
                    let width = t.shape()[*axis] * inner;
                    if let Some(gt) = sink.buf(t) {
                        for o in 0..outer {
                            gt[o * width..(o + 1) * width]
                                .iter_mut()
                                .zip(&g[o * total + offset..o * total + offset + width])
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                    offset += width;
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = sink.buf(a) {
                    let n = *out.shape().last().expect("rank >= 1");
                    let y = out.data();
                    for ((gr, yr), dst) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::GatedSoftmax { input, gate, unit } => {
                let n = *out.shape().last().expect("rank >= 1");
                let rows = out.numel() / n.max(1);
                let per_group = rows / gate.shape()[0];
                let y = out.data();
                let mut row_dot = vec![T::zero(); rows];
                for r in 0..rows {
                    row_dot[r] = g[r * n..(r + 1) * n]
                        .iter()
                        .zip(&y[r * n..(r + 1) * n])
                        .map(|(&a, &b)| a * b)
                        .sum();
                }
                if let Some(ga) = sink.buf(input) {
                    for r in 0..rows {
                        for j in r * n..(r + 1) * n {
                            ga[j] += y[j] * (g[j] - row_dot[r]);
                        }
                    }
                }
                if let Some(gg) = sink.buf(gate) {
                    for r in 0..rows {
                        let grp = r / per_group;
                        for j in 0..n {
                            let idx = r * n + j;
                            gg[grp * n + j] += unit[idx] * (g[idx] - row_dot[r]);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = sink.buf(a) {
                    let x = a.data();
                    let half = T::of(0.5);
                    let r2 = T::of(SQRT_2);
                    let c = T::of(INV_SQRT_2PI);
                    for ((dst, &gy), &xv) in ga.iter_mut().zip(g).zip(x.iter()) {
                        let cdf = half * (T::one() + (xv / r2).erf());
                        let pdf = c * (-half * xv * xv).exp();
                        *dst += gy * (cdf + xv * pdf);
                    }
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = gamma.numel();
                let rows = inv_std.len();
                if let Some(gb) = sink.buf(beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gg) = sink.buf(gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gx) = sink.buf(input) {
                    let gm = gamma.data();
                    let dn = T::of(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gm[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[r * d + j];
                        }
                        let scale = inv_std[r] / dn;
                        for j in 0..d {
                            gx[r * d + j] += scale * (dn * dxhat[j] - s1 - xhat[r * d + j] * s2);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = sink.buf(a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = sink.buf(a) {
                    let v = g[0] / T::of(a.numel() as f64);
                    ga.iter_mut().for_each(|x| *x += v);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                reduction,
            } => {
                if let Some(gl) = sink.buf(logits) {
                    let c = logits.shape()[1];
                    let mut w = g[0];
                    if *reduction == Reduction::Mean {
                        w /= T::of(targets.len() as f64);
                    }
                    for (b, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[b * c + j] += w * (probs[b * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

use super::gemm::{gemm, MatRef};
use super::{Float, Shape, Tensor};
use crate::error::{Error, Result};

fn check_finite<T: Float>(op: &'static str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

fn shape_of(dims: Vec<usize>) -> Shape {
    // Callers derive extents from validated shapes, so they are positive.
    Shape(dims)
}

/// Row-major strides for `dims`.
fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Copies `data` (shape `dims`) into the layout of `dims` permuted by `axes`.
fn permute_data<T: Copy>(data: &[T], dims: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = dims.len();
    if rank == 0 || data.is_empty() {
        return data.to_vec();
    }
    let in_strides = strides(dims);
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let inner = out_dims[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank - 1];
    let mut base = 0usize;
    loop {
        let mut src = base;
        for _ in 0..inner {
            out.push(data[src]);
            src += inner_stride;
        }
        // Odometer over the leading output axes.
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            counter[axis] += 1;
            base += src_strides[axis];
            if counter[axis] < out_dims[axis] {
                break;
            }
            base -= src_strides[axis] * out_dims[axis];
            counter[axis] = 0;
        }
    }
}

/// Batch geometry shared by matmul forward and backward.
#[derive(Clone, Copy)]
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

impl<T: Float> Tensor<T> {
    /// Matrix product over the last two axes.
    ///
    /// Leading (batch) axes must match when both operands have them; a rank-2
    /// operand is broadcast across the other operand's batch.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.dims(), rhs.dims());
        let mismatch = || Error::shape("matmul", format!("{:?} x {:?}", a, b));
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        let (a_batch, b_batch) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        if k != k2 || (!a_batch.is_empty() && !b_batch.is_empty() && a_batch != b_batch) {
            return Err(mismatch());
        }
        let batch_dims = if a_batch.is_empty() { b_batch } else { a_batch };
        let d = MatmulDims {
            batch: batch_dims.iter().product(),
            m,
            k,
            n,
            a_batched: !a_batch.is_empty(),
            b_batched: !b_batch.is_empty(),
        };
        let mut out_dims = batch_dims.to_vec();
        out_dims.extend([m, n]);

        let mut out = vec![T::zero(); d.batch * m * n];
        if d.a_batched && !d.b_batched {
            let lhs = MatRef::new(self.data(), 0, d.batch * m, k);
            gemm(T::one(), lhs, MatRef::new(rhs.data(), 0, k, n), T::zero(), &mut out, 0);
        } else {
            for bi in 0..d.batch {
                let lhs = MatRef::new(self.data(), if d.a_batched { bi * m * k } else { 0 }, m, k);
                let r = MatRef::new(rhs.data(), if d.b_batched { bi * k * n } else { 0 }, k, n);
                gemm(T::one(), lhs, r, T::zero(), &mut out, bi * m * n);
            }
        }

        Ok(Tensor::from_op(
            "matmul",
            shape_of(out_dims),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx| {
                let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
                let MatmulDims { batch, m, k, n, a_batched, b_batched } = d;
                let grad_a = ctx.inputs[0].requires_grad().then(|| {
                    let mut ga = vec![T::zero(); a.len()];
                    if a_batched && !b_batched {
                        let gm = MatRef::new(g, 0, batch * m, n);
                        gemm(T::one(), gm, MatRef::new(b, 0, k, n).t(), T::zero(), &mut ga, 0);
                    } else {
                        for bi in 0..batch {
                            let gm = MatRef::new(g, bi * m * n, m, n);
                            let bm = MatRef::new(b, if b_batched { bi * k * n } else { 0 }, k, n);
                            let (off, beta) =
                                if a_batched { (bi * m * k, T::zero()) } else { (0, T::one()) };
                            gemm(T::one(), gm, bm.t(), beta, &mut ga, off);
                        }
                    }
                    ga
                });
                let grad_b = ctx.inputs[1].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); b.len()];
                    if a_batched && !b_batched {
                        let am = MatRef::new(a, 0, batch * m, k);
                        gemm(T::one(), am.t(), MatRef::new(g, 0, batch * m, n), T::zero(), &mut gb, 0);
                    } else {
                        for bi in 0..batch {
                            let am = MatRef::new(a, if a_batched { bi * m * k } else { 0 }, m, k);
                            let gm = MatRef::new(g, bi * m * n, m, n);
                            let (off, beta) =
                                if b_batched { (bi * k * n, T::zero()) } else { (0, T::one()) };
                            gemm(T::one(), am.t(), gm, beta, &mut gb, off);
                        }
                    }
                    gb
                });
                vec![grad_a, grad_b]
            }),
        ))
    }

    /// Elementwise sum. `rhs` may have fewer axes than `self` as long as its
    /// extents equal the trailing extents of `self`; it is then broadcast over
    /// the leading axes.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.dims(), rhs.dims());
        if b.len() > a.len() || a[a.len() - b.len()..] != *b {
            return Err(Error::shape("add", format!("cannot broadcast {:?} onto {:?}", b, a)));
        }
        let inner = rhs.numel();
        let out: Vec<T> = self
            .data()
            .chunks_exact(inner)
            .flat_map(|row| row.iter().zip(rhs.data()).map(|(x, y)| *x + *y))
            .collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().clone(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx| {
                let ga = ctx.inputs[0].requires_grad().then(|| ctx.grad.to_vec());
                let gb = ctx.inputs[1].requires_grad().then(|| {
                    let mut acc = vec![T::zero(); inner];
                    for row in ctx.grad.chunks_exact(inner) {
                        acc.iter_mut().zip(row).for_each(|(s, g)| *s = *s + *g);
                    }
                    acc
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.dims() != rhs.dims() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", self.dims(), rhs.dims())));
        }
        let out = self.data().iter().zip(rhs.data()).map(|(x, y)| *x * *y).collect();
        Ok(Tensor::from_op(
            "mul",
            self.shape().clone(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|ctx| {
                let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
                let ga = ctx.inputs[0]
                    .requires_grad()
                    .then(|| g.iter().zip(b).map(|(g, b)| *g * *b).collect());
                let gb = ctx.inputs[1]
                    .requires_grad()
                    .then(|| g.iter().zip(a).map(|(g, a)| *g * *a).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor<T> {
        let s = T::of(factor);
        let out = self.data().iter().map(|x| *x * s).collect();
        Tensor::from_op(
            "scale",
            self.shape().clone(),
            out,
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|g| *g * s).collect())]),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        let out = self.data().iter().map(|x| x.max(T::zero())).collect();
        Tensor::from_op(
            "relu",
            self.shape().clone(),
            out,
            vec![self.clone()],
            Box::new(|ctx| {
                let x = ctx.inputs[0].data();
                let g = ctx
                    .grad
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Exact GELU, `x * Phi(x)` with the erf form of the normal CDF.
    pub fn gelu(&self) -> Tensor<T> {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .data()
            .iter()
            .map(|&x| x * half * (T::one() + (x * inv_sqrt2).erf()))
            .collect();
        Tensor::from_op(
            "gelu",
            self.shape().clone(),
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                let inv_sqrt_2pi = T::of(0.398_942_280_401_432_7);
                let x = ctx.inputs[0].data();
                let g = ctx
                    .grad
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                        g * (cdf + x * pdf)
                    })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        check_finite("softmax", self.data())?;
        let n = self.shape().last();
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total = total + e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / total);
        }
        Ok(Tensor::from_op(
            "softmax",
            self.shape().clone(),
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut gx = Vec::with_capacity(ctx.grad.len());
                for (y, g) in ctx.output.chunks_exact(n).zip(ctx.grad.chunks_exact(n)) {
                    let dot: T = y.iter().zip(g).map(|(y, g)| *y * *g).sum();
                    gx.extend(y.iter().zip(g).map(|(y, g)| *y * (*g - dot)));
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {} changes element count", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let dims = self.dims().to_vec();
        let mut seen = vec![false; dims.len()];
        let valid = axes.len() == dims.len()
            && axes.iter().all(|&a| a < dims.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::shape("permute", format!("axes {:?} for shape {:?}", axes, dims)));
        }
        let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
        let out = permute_data(self.data(), &dims, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_dims_bw = out_dims.clone();
        Ok(Tensor::from_op(
            "permute",
            shape_of(out_dims),
            out,
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(permute_data(ctx.grad, &out_dims_bw, &inverse))]),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r} < 2")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(&self, axis: usize, index: usize) -> Result<Tensor<T>> {
        let dims = self.dims();
        if axis >= dims.len() || index >= dims[axis] {
            return Err(Error::shape(
                "select",
                format!("index {index} on axis {axis} of {:?}", dims),
            ));
        }
        let outer: usize = dims[..axis].iter().product();
        let extent = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * extent + index) * inner;
            out.extend_from_slice(&self.data()[start..start + inner]);
        }
        let mut out_dims = dims.to_vec();
        out_dims.remove(axis);
        let total = self.numel();
        Ok(Tensor::from_op(
            "select",
            shape_of(out_dims),
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); total];
                for (o, g) in ctx.grad.chunks_exact(inner).enumerate() {
                    let start = (o * extent + index) * inner;
                    gx[start..start + inner].copy_from_slice(g);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Stacks `count` copies along a new leading axis.
    pub fn expand_leading(&self, count: usize) -> Result<Tensor<T>> {
        if count == 0 {
            return Err(Error::shape("expand_leading", "count must be positive"));
        }
        let mut dims = vec![count];
        dims.extend_from_slice(self.dims());
        let out = self.data().repeat(count);
        let inner = self.numel();
        Ok(Tensor::from_op(
            "expand_leading",
            shape_of(dims),
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut acc = vec![T::zero(); inner];
                for chunk in ctx.grad.chunks_exact(inner) {
                    acc.iter_mut().zip(chunk).for_each(|(a, g)| *a = *a + *g);
                }
                vec![Some(acc)]
            }),
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Shape::scalar(),
            vec![total],
            vec![self.clone()],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(1.0 / self.numel() as f64)
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<T: Float>(tensors: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = tensors.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let dims = first.dims();
    if axis >= dims.len() {
        return Err(Error::shape("concat", format!("axis {axis} for rank {}", dims.len())));
    }
    for t in tensors {
        let d = t.dims();
        if d.len() != dims.len()
            || d.iter().zip(dims).enumerate().any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", d, dims)));
        }
    }
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let widths: Vec<usize> = tensors.iter().map(|t| t.dims()[axis] * inner).collect();
    let row: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * row);
    for o in 0..outer {
        for (t, &w) in tensors.iter().zip(&widths) {
            out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
        }
    }
    let mut out_dims = dims.to_vec();
    out_dims[axis] = row / inner;
    Ok(Tensor::from_op(
        "concat",
        shape_of(out_dims),
        out,
        tensors.to_vec(),
        Box::new(move |ctx| {
            let mut grads: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(w * outer)).collect();
            for g_row in ctx.grad.chunks_exact(row) {
                let mut start = 0;
                for (g, &w) in grads.iter_mut().zip(&widths) {
                    g.extend_from_slice(&g_row[start..start + w]);
                    start += w;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    ))
}

/// Normalizes each row over the last axis, then applies `gamma * x + beta`.
/// Variance is the biased (population) estimate.
pub fn layer_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = x.shape().last();
    if x.rank() == 0 || gamma.dims() != [d] || beta.dims() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("x {:?}, gamma {:?}, beta {:?}", x.dims(), gamma.dims(), beta.dims()),
        ));
    }
    let eps = T::of(eps);
    let inv_d = T::of(1.0 / d as f64);
    let rows = x.numel() / d;
    let mut normed = Vec::with_capacity(x.numel());
    let mut inv_std = Vec::with_capacity(rows);
    for row in x.data().chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        inv_std.push(r);
        normed.extend(row.iter().map(|v| (*v - mean) * r));
    }
    let out = normed
        .chunks_exact(d)
        .flat_map(|row| {
            row.iter()
                .zip(gamma.data().iter().zip(beta.data()))
                .map(|(n, (g, b))| *n * *g + *b)
        })
        .collect();
    Ok(Tensor::from_op(
        "layer_norm",
        x.shape().clone(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |ctx| {
            let gamma = ctx.inputs[1].data();
            let mut gx = Vec::with_capacity(ctx.grad.len());
            let mut ggamma = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            let mut dn = vec![T::zero(); d];
            for ((g, n), &r) in ctx
                .grad
                .chunks_exact(d)
                .zip(normed.chunks_exact(d))
                .zip(&inv_std)
            {
                for j in 0..d {
                    ggamma[j] = ggamma[j] + g[j] * n[j];
                    gbeta[j] = gbeta[j] + g[j];
                    dn[j] = g[j] * gamma[j];
                }
                let mean_dn = dn.iter().copied().sum::<T>() * inv_d;
                let mean_dn_n = dn.iter().zip(n).map(|(a, b)| *a * *b).sum::<T>() * inv_d;
                gx.extend((0..d).map(|j| r * (dn[j] - mean_dn - n[j] * mean_dn_n)));
            }
            vec![
                ctx.inputs[0].requires_grad().then_some(gx),
                ctx.inputs[1].requires_grad().then_some(ggamma),
                ctx.inputs[2].requires_grad().then_some(gbeta),
            ]
        }),
    ))
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`),
/// computed with log-sum-exp.
pub fn cross_entropy<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let dims = logits.dims();
    if dims.len() != 2 || dims[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} with {} labels", dims, labels.len()),
        ));
    }
    let (batch, classes) = (dims[0], dims[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelRange { label, classes });
    }
    check_finite("cross_entropy", logits.data())?;
    let mut probs = Vec::with_capacity(logits.numel());
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum_exp: T = row.iter().map(|v| (*v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        total = total + (lse - row[label]);
        probs.extend(row.iter().map(|v| (*v - lse).exp()));
    }
    let inv_b = T::of(1.0 / batch as f64);
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        "cross_entropy",
        Shape::scalar(),
        vec![total * inv_b],
        vec![logits.clone()],
        Box::new(move |ctx| {
            let scale = ctx.grad[0] * inv_b;
            let mut g: Vec<T> = probs.iter().map(|p| *p * scale).collect();
            for (i, &label) in labels.iter().enumerate() {
                g[i * classes + label] = g[i * classes + label] - scale;
            }
            vec![Some(g)]
        }),
    ))
}

/// Non-overlapping patch embedding: a convolution whose kernel size equals
/// its stride.
///
/// `x` is `[B, H, W, C]`, `kernel` is `[P, P, C, D]`, `bias` is `[D]`; the
/// result is `[B, H/P, W/P, D]`.
pub fn conv2d_patchify<T: Float>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (xd, kd) = (x.dims(), kernel.dims());
    if xd.len() != 4 || kd.len() != 4 || kd[0] != kd[1] || kd[2] != xd[3] || bias.dims() != [kd[3]] {
        return Err(Error::shape(
            "conv2d_patchify",
            format!("x {:?}, kernel {:?}, bias {:?}", xd, kd, bias.dims()),
        ));
    }
    let (b, h, w, c) = (xd[0], xd[1], xd[2], xd[3]);
    let (p, d) = (kd[0], kd[3]);
    if h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "conv2d_patchify",
            format!("{h}x{w} input is not divisible by patch size {p}"),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let patches = x
        .reshape([b, gh, p, gw, p, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape([b * gh * gw, p * p * c])?;
    patches
        .matmul(&kernel.reshape([p * p * c, d])?)?
        .add(bias)?
        .reshape([b, gh, gw, d])
}

//! Raw forward/backward kernels over contiguous row-major buffers.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Number of rows when the last axis is treated as the row.
pub(crate) fn rows_of(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap_or(&1);
    let n = if d == 0 {
        0
    } else {
        shape.iter().product::<usize>() / d
    };
    (n, d)
}

pub(crate) fn zip_map<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Whether `suffix` equals the trailing extents of `shape`.
pub(crate) fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

// ---------------------------------------------------------------- matmul

pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single `[k, n]` matrix shared by every batch entry.
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(Error::shape("matmul", a, b));
    }
    let lead = &a[..a.len() - 2];
    let batch: usize = lead.iter().product();
    let shared_rhs = b.len() == 2;
    if !shared_rhs && b[..b.len() - 2] != *lead {
        return Err(Error::shape("matmul", a, b));
    }
    let mut out_shape = lead.to_vec();
    out_shape.extend_from_slice(&[m, n]);
    Ok(MatmulDims {
        batch,
        m,
        k,
        n,
        shared_rhs,
        out_shape,
    })
}

pub(crate) fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![E::zero(); d.batch * d.m * d.n];
    let (ad, bd) = (a.data(), b.data());
    if d.shared_rhs {
        E::gemm(
            d.batch * d.m,
            d.k,
            d.n,
            E::one(),
            ad,
            d.k,
            1,
            bd,
            d.n,
            1,
            E::zero(),
            &mut out,
            d.n,
        );
    } else {
        let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            E::gemm(
                d.m,
                d.k,
                d.n,
                E::one(),
                &ad[i * sa..(i + 1) * sa],
                d.k,
                1,
                &bd[i * sb..(i + 1) * sb],
                d.n,
                1,
                E::zero(),
                &mut out[i * so..(i + 1) * so],
                d.n,
            );
        }
    }
    Tensor::new(d.out_shape, out)
}

/// Gradients `(g·bᵀ, aᵀ·g)` of a (batched) matmul.
pub(crate) fn matmul_backward<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    g: &[E],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let d = matmul_dims(a.shape(), b.shape()).expect("shapes validated in forward");
    let (ad, bd) = (a.data(), b.data());
    let mut ga = need_a.then(|| vec![E::zero(); a.numel()]);
    let mut gb = need_b.then(|| vec![E::zero(); b.numel()]);
    if d.shared_rhs {
        let rows = d.batch * d.m;
        if let Some(ga) = ga.as_mut() {
            // [rows, n] x [n, k] with b read transposed
            E::gemm(rows, d.n, d.k, E::one(), g, d.n, 1, bd, 1, d.n, E::zero(), ga, d.k);
        }
        if let Some(gb) = gb.as_mut() {
            // [k, rows] x [rows, n] with a read transposed
            E::gemm(d.k, rows, d.n, E::one(), ad, 1, d.k, g, d.n, 1, E::zero(), gb, d.n);
        }
    } else {
        let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            let gi = &g[i * so..(i + 1) * so];
            if let Some(ga) = ga.as_mut() {
                E::gemm(
                    d.m,
                    d.n,
                    d.k,
                    E::one(),
                    gi,
                    d.n,
                    1,
                    &bd[i * sb..(i + 1) * sb],
                    1,
                    d.n,
                    E::zero(),
                    &mut ga[i * sa..(i + 1) * sa],
                    d.k,
                );
            }
            if let Some(gb) = gb.as_mut() {
                E::gemm(
                    d.k,
                    d.m,
                    d.n,
                    E::one(),
                    &ad[i * sa..(i + 1) * sa],
                    1,
                    d.k,
                    gi,
                    d.n,
                    1,
                    E::zero(),
                    &mut gb[i * sb..(i + 1) * sb],
                    d.n,
                );
            }
        }
    }
    (ga, gb)
}

// ---------------------------------------------------------------- layout

pub(crate) fn permute<E: Element>(x: &Tensor<E>, perm: &[usize]) -> Result<Tensor<E>> {
    let shape = x.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", shape, perm));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let numel = src.len();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 || rank == 0 {
        return Tensor::new(out_shape, src.to_vec());
    }
    // The last output axis is walked as an inner run; contiguous when it is
    // also the last input axis.
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut offset = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[offset..offset + inner]);
        } else {
            out.extend((0..inner).map(|j| src[offset + j * inner_stride]));
        }
        // odometer over the outer axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return Tensor::new(out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn slice<E: Element>(
    x: &Tensor<E>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<E>> {
    let shape = x.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::shape("slice", shape, &[axis, start, start + len]));
    }
    let (outer, extent, inner) = split_axis(shape, axis);
    let src = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        out.extend_from_slice(&src[base..base + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(out_shape, out)
}

/// Scatters `g` (the gradient of a slice) back into a zero buffer of `in_shape`.
pub(crate) fn slice_backward<E: Element>(
    g: &[E],
    in_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
    acc: &mut [E],
) {
    let (outer, extent, inner) = split_axis(in_shape, axis);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        let gb = o * len * inner;
        for (dst, &src) in acc[base..base + len * inner].iter_mut().zip(&g[gb..gb + len * inner]) {
            *dst += src;
        }
    }
}

pub(crate) fn concat<E: Element>(xs: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = xs.first().ok_or_else(|| Error::shape("concat", &[], &[]))?;
    let shape = first.shape();
    if axis >= shape.len() {
        return Err(Error::shape("concat", shape, &[axis]));
    }
    let mut total = 0;
    for x in xs {
        let s = x.shape();
        let same_other = s.len() == shape.len()
            && s.iter()
                .zip(shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same_other {
            return Err(Error::shape("concat", shape, s));
        }
        total += s[axis];
    }
    let (outer, _, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let ext = x.shape()[axis];
            out.extend_from_slice(&x.data()[o * ext * inner..(o + 1) * ext * inner]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = total;
    Tensor::new(out_shape, out)
}

// ---------------------------------------------------------------- reductions

pub(crate) fn sum_axis<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape("sum_axis", shape, &[axis]));
    }
    let (outer, extent, inner) = split_axis(shape, axis);
    let src = x.data();
    let mut out = vec![E::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for e in 0..extent {
            let row = &src[(o * extent + e) * inner..(o * extent + e + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    Tensor::new(out_shape, out)
}

/// Broadcasts a reduced gradient back along `axis`, scaled by `scale`.
pub(crate) fn expand_axis<E: Element>(
    g: &[E],
    in_shape: &[usize],
    axis: usize,
    scale: E,
    acc: &mut [E],
) {
    let (outer, extent, inner) = split_axis(in_shape, axis);
    for o in 0..outer {
        let src = &g[o * inner..(o + 1) * inner];
        for e in 0..extent {
            let dst = &mut acc[(o * extent + e) * inner..(o * extent + e + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v * scale;
            }
        }
    }
}

// ---------------------------------------------------------------- activations

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GeLU, tanh approximation.
pub(crate) fn gelu<E: Element>(x: E) -> E {
    let u = E::of(SQRT_2_OVER_PI) * (x + E::of(GELU_C) * x * x * x);
    E::of(0.5) * x * (E::one() + u.tanh())
}

pub(crate) fn gelu_grad<E: Element>(x: E) -> E {
    let c = E::of(SQRT_2_OVER_PI);
    let u = c * (x + E::of(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = c * (E::one() + E::of(3.0 * GELU_C) * x * x);
    E::of(0.5) * (E::one() + t) + E::of(0.5) * x * (E::one() - t * t) * du
}

pub(crate) fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

pub(crate) fn silu<E: Element>(x: E) -> E {
    x * sigmoid(x)
}

pub(crate) fn silu_grad<E: Element>(x: E) -> E {
    let s = sigmoid(x);
    s * (E::one() + x * (E::one() - s))
}

// ---------------------------------------------------------------- row ops

pub(crate) fn softmax_rows<E: Element>(x: &[E], d: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for (row, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let mut sum = E::zero();
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = E::one() / sum;
        for o in dst.iter_mut() {
            *o *= inv;
        }
    }
    out
}

/// `dx = y ⊙ (g − Σ g⊙y)` per row.
pub(crate) fn softmax_backward<E: Element>(y: &[E], g: &[E], d: usize, acc: &mut [E]) {
    for ((yr, gr), ar) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(acc.chunks_exact_mut(d)) {
        let dot: E = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((a, &yv), &gv) in ar.iter_mut().zip(yr).zip(gr) {
            *a += yv * (gv - dot);
        }
    }
}

pub(crate) fn log_softmax_rows<E: Element>(x: &[E], d: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    for (row, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<E>().ln() + max;
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// `dx = g − softmax(x)·Σg` per row, with `y = log_softmax(x)`.
pub(crate) fn log_softmax_backward<E: Element>(y: &[E], g: &[E], d: usize, acc: &mut [E]) {
    for ((yr, gr), ar) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(acc.chunks_exact_mut(d)) {
        let gsum: E = gr.iter().copied().sum();
        for ((a, &yv), &gv) in ar.iter_mut().zip(yr).zip(gr) {
            *a += gv - yv.exp() * gsum;
        }
    }
}

/// Returns `(xhat, rstd)`; `xhat = (x − μ)·rstd`, `rstd = 1/√(σ² + eps)`.
pub(crate) fn layernorm_rows<E: Element>(x: &[E], d: usize, eps: E) -> (Vec<E>, Vec<E>) {
    let mut xhat = vec![E::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / d.max(1));
    let inv_d = E::one() / E::of(d as f64);
    for (row, dst) in x.chunks_exact(d).zip(xhat.chunks_exact_mut(d)) {
        let mean = row.iter().copied().sum::<E>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_d;
        let r = E::one() / (var + eps).sqrt();
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Input gradient of a normalization given the gradient w.r.t. `xhat`.
pub(crate) fn layernorm_backward<E: Element>(
    xhat: &[E],
    rstd: &[E],
    gxhat: &[E],
    d: usize,
    acc: &mut [E],
) {
    let inv_d = E::one() / E::of(d as f64);
    for (((xr, gr), ar), &r) in xhat
        .chunks_exact(d)
        .zip(gxhat.chunks_exact(d))
        .zip(acc.chunks_exact_mut(d))
        .zip(rstd)
    {
        let mean_g = gr.iter().copied().sum::<E>() * inv_d;
        let mean_gx = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<E>() * inv_d;
        for ((a, &xv), &gv) in ar.iter_mut().zip(xr).zip(gr) {
            *a += r * (gv - mean_g - xv * mean_gx);
        }
    }
}

/// Row norms and `x / (‖x‖ + eps)`.
pub(crate) fn l2_normalize_rows<E: Element>(x: &[E], d: usize, eps: E) -> (Vec<E>, Vec<E>) {
    let mut out = vec![E::zero(); x.len()];
    let mut norms = Vec::with_capacity(x.len() / d.max(1));
    for (row, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let n = row.iter().map(|&v| v * v).sum::<E>().sqrt();
        let inv = E::one() / (n + eps);
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = v * inv;
        }
        norms.push(n);
    }
    (out, norms)
}

/// `dx = g/s − x (x·g) / (s² n)` with `s = n + eps`.
pub(crate) fn l2_normalize_backward<E: Element>(
    x: &[E],
    norms: &[E],
    g: &[E],
    d: usize,
    eps: E,
    acc: &mut [E],
) {
    for (((xr, gr), ar), &n) in x
        .chunks_exact(d)
        .zip(g.chunks_exact(d))
        .zip(acc.chunks_exact_mut(d))
        .zip(norms)
    {
        let s = n + eps;
        let inv_s = E::one() / s;
        let coef = if n > E::zero() {
            xr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<E>() / (s * s * n)
        } else {
            E::zero()
        };
        for ((a, &xv), &gv) in ar.iter_mut().zip(xr).zip(gr) {
            *a += gv * inv_s - xv * coef;
        }
    }
}

/// Rotates consecutive pairs of each row of `x` (shape `[.., T, d]`) by the
/// angle table (`cos`/`sin`, shape `[T, d/2]`); `inverse` rotates backwards.
pub(crate) fn rotate_pairs<E: Element>(
    x: &[E],
    cos: &[E],
    sin: &[E],
    seq: usize,
    d: usize,
    inverse: bool,
    out: &mut [E],
) {
    let half = d / 2;
    let table = seq * half;
    for (r, (row, dst)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let t = r % seq;
        let cs = &cos[t * half..(t + 1) * half];
        let sn = &sin[t * half..(t + 1) * half];
        debug_assert!(t * half + half <= table);
        for j in 0..half {
            let (a, b) = (row[2 * j], row[2 * j + 1]);
            let (c, s) = if inverse { (cs[j], -sn[j]) } else { (cs[j], sn[j]) };
            dst[2 * j] += a * c - b * s;
            dst[2 * j + 1] += a * s + b * c;
        }
    }
}

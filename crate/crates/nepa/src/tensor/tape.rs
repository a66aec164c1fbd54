use std::cell::RefCell;
use std::fmt;

use super::kernels::{self as k, rows_of};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Recorded primitive: which op produced a node, from which inputs, and what
/// it saved for the backward pass.
enum Op<E> {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `x + b` where `b`'s shape is a suffix of `x`'s.
    AddBroadcast(usize, usize),
    /// `x ⊙ b` where `b`'s shape is a suffix of `x`'s.
    MulBroadcast(usize, usize),
    Scale(usize, E),
    Offset(usize),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Gelu(usize),
    Silu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<E>,
        eps: E,
    },
    StopGradient,
    Gather {
        table: usize,
        indices: Vec<usize>,
    },
    Rope {
        x: usize,
        cos: Tensor<E>,
        sin: Tensor<E>,
    },
}

impl<E> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MulBroadcast(..) => "mul_broadcast",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Gelu(..) => "gelu",
            Op::Silu(..) => "silu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::StopGradient => "stop_gradient",
            Op::Gather { .. } => "gather",
            Op::Rope { .. } => "rope",
        }
    }
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended in evaluation order, so the record is already a
/// topological order; [`Tape::backward`] walks it in reverse. The tape is not
/// consumed by `backward`, so it can be replayed.
pub struct Tape<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> fmt::Debug for Tape<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        f.debug_list()
            .entries(nodes.iter().map(|n| (n.op.name(), n.value.shape().to_vec())))
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, E: Element> {
    tape: &'t Tape<E>,
    id: usize,
}

impl<E: Element> fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input: gradients flow to it.
    pub fn leaf(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Constant, false)
    }

    fn push(&self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn value_of(&self, id: usize) -> Tensor<E> {
        self.nodes.borrow()[id].value.clone()
    }

    fn record(&self, value: Tensor<E>, op: Op<E>, inputs: &[usize]) -> Var<'_, E> {
        let needs = self.needs(inputs);
        self.push(value, op, needs)
    }

    pub fn concat<'t>(&'t self, xs: &[Var<'t, E>], axis: usize) -> Result<Var<'t, E>> {
        let values: Vec<Tensor<E>> = xs.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor<E>> = values.iter().collect();
        let out = k::concat(&refs, axis)?;
        let inputs: Vec<usize> = xs.iter().map(|v| v.id).collect();
        Ok(self.record(out, Op::Concat { inputs: inputs.clone(), axis }, &inputs))
    }

    /// Reverse-mode sweep from a single-element `output`.
    pub fn backward(&self, output: Var<'_, E>) -> Result<Gradients<E>> {
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.id];
        if out_node.value.numel() != 1 {
            return Err(Error::shape("backward", out_node.value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![E::one()]);

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.needs_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.needs_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Adds `delta` into the gradient slot of node `id` when it needs one.
fn accumulate<E: Element>(
    nodes: &[Node<E>],
    grads: &mut [Option<Vec<E>>],
    id: usize,
    f: impl FnOnce(&mut [E]),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![E::zero(); nodes[id].value.numel()]);
    f(slot);
}

fn add_into<E: Element>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop<E: Element>(nodes: &[Node<E>], id: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf | Op::Constant | Op::StopGradient => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |acc| add_into(acc, g));
            accumulate(nodes, grads, *b, |acc| add_into(acc, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |acc| add_into(acc, g));
            accumulate(nodes, grads, *b, |acc| {
                for (d, &s) in acc.iter_mut().zip(g) {
                    *d -= s;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |acc| {
                for ((d, &s), &o) in acc.iter_mut().zip(g).zip(bv) {
                    *d += s * o;
                }
            });
            accumulate(nodes, grads, *b, |acc| {
                for ((d, &s), &o) in acc.iter_mut().zip(g).zip(av) {
                    *d += s * o;
                }
            });
        }
        Op::AddBroadcast(x, b) => {
            accumulate(nodes, grads, *x, |acc| add_into(acc, g));
            let n = val(*b).numel();
            accumulate(nodes, grads, *b, |acc| {
                for chunk in g.chunks_exact(n) {
                    add_into(acc, chunk);
                }
            });
        }
        Op::MulBroadcast(x, b) => {
            let (xv, bv) = (val(*x).data(), val(*b).data());
            let n = bv.len();
            accumulate(nodes, grads, *x, |acc| {
                for (ac, gc) in acc.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                    for ((d, &s), &o) in ac.iter_mut().zip(gc).zip(bv) {
                        *d += s * o;
                    }
                }
            });
            accumulate(nodes, grads, *b, |acc| {
                for (xc, gc) in xv.chunks_exact(n).zip(g.chunks_exact(n)) {
                    for ((d, &s), &o) in acc.iter_mut().zip(gc).zip(xc) {
                        *d += s * o;
                    }
                }
            });
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, |acc| {
            for (d, &s) in acc.iter_mut().zip(g) {
                *d += s * *c;
            }
        }),
        Op::Offset(x) => accumulate(nodes, grads, *x, |acc| add_into(acc, g)),
        Op::MatMul(a, b) => {
            let (ga, gb) = k::matmul_backward(
                val(*a),
                val(*b),
                g,
                nodes[*a].needs_grad,
                nodes[*b].needs_grad,
            );
            if let Some(ga) = ga {
                accumulate(nodes, grads, *a, |acc| add_into(acc, &ga));
            }
            if let Some(gb) = gb {
                accumulate(nodes, grads, *b, |acc| add_into(acc, &gb));
            }
        }
        Op::Permute(x, perm) => {
            let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
            let back = k::permute(&gt, &k::inverse_perm(perm)).expect("inverse permutation");
            accumulate(nodes, grads, *x, |acc| add_into(acc, back.data()));
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, |acc| add_into(acc, g)),
        Op::Slice { x, axis, start, len } => {
            let shape = val(*x).shape().to_vec();
            accumulate(nodes, grads, *x, |acc| {
                k::slice_backward(g, &shape, *axis, *start, *len, acc)
            });
        }
        Op::Concat { inputs, axis } => {
            let mut start = 0;
            let out_shape = node.value.shape();
            for &i in inputs {
                let len = val(i).shape()[*axis];
                let gt = Tensor::new(out_shape.to_vec(), g.to_vec()).expect("grad shape");
                let part = k::slice(&gt, *axis, start, len).expect("concat slice");
                accumulate(nodes, grads, i, |acc| add_into(acc, part.data()));
                start += len;
            }
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, |acc| {
            for d in acc.iter_mut() {
                *d += g[0];
            }
        }),
        Op::Mean(x) => {
            let n = E::of(val(*x).numel() as f64);
            accumulate(nodes, grads, *x, |acc| {
                for d in acc.iter_mut() {
                    *d += g[0] / n;
                }
            });
        }
        Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
            let shape = val(*x).shape().to_vec();
            let scale = match node.op {
                Op::MeanAxis(..) => E::one() / E::of(shape[*axis] as f64),
                _ => E::one(),
            };
            accumulate(nodes, grads, *x, |acc| k::expand_axis(g, &shape, *axis, scale, acc));
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, |acc| {
                for ((d, &s), &v) in acc.iter_mut().zip(g).zip(xv) {
                    *d += s * k::gelu_grad(v);
                }
            });
        }
        Op::Silu(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, |acc| {
                for ((d, &s), &v) in acc.iter_mut().zip(g).zip(xv) {
                    *d += s * k::silu_grad(v);
                }
            });
        }
        Op::Softmax(x) => {
            let (_, d) = rows_of(node.value.shape());
            accumulate(nodes, grads, *x, |acc| {
                k::softmax_backward(node.value.data(), g, d, acc)
            });
        }
        Op::LogSoftmax(x) => {
            let (_, d) = rows_of(node.value.shape());
            accumulate(nodes, grads, *x, |acc| {
                k::log_softmax_backward(node.value.data(), g, d, acc)
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (_, d) = rows_of(node.value.shape());
            if let Some(b) = beta {
                accumulate(nodes, grads, *b, |acc| {
                    for chunk in g.chunks_exact(d) {
                        add_into(acc, chunk);
                    }
                });
            }
            if let Some(gm) = gamma {
                accumulate(nodes, grads, *gm, |acc| {
                    for (gc, xc) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((a, &s), &h) in acc.iter_mut().zip(gc).zip(xc) {
                            *a += s * h;
                        }
                    }
                });
            }
            if nodes[*x].needs_grad {
                let gxhat: Vec<E> = match gamma {
                    Some(gm) => {
                        let gv = val(*gm).data();
                        g.chunks_exact(d)
                            .flat_map(|gc| gc.iter().zip(gv).map(|(&a, &b)| a * b))
                            .collect()
                    }
                    None => g.to_vec(),
                };
                accumulate(nodes, grads, *x, |acc| {
                    k::layernorm_backward(xhat, rstd, &gxhat, d, acc)
                });
            }
        }
        Op::L2Normalize { x, norms, eps } => {
            let (_, d) = rows_of(node.value.shape());
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, |acc| {
                k::l2_normalize_backward(xv, norms, g, d, *eps, acc)
            });
        }
        Op::Gather { table, indices } => {
            let d = *val(*table).shape().last().expect("gather table rank");
            accumulate(nodes, grads, *table, |acc| {
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut acc[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::Rope { x, cos, sin } => {
            let shape = node.value.shape();
            let (d, seq) = (shape[shape.len() - 1], shape[shape.len() - 2]);
            accumulate(nodes, grads, *x, |acc| {
                k::rotate_pairs(g, cos.data(), sin.data(), seq, d, true, acc)
            });
        }
    }
}

/// Gradient table produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of `v`, or `None` when `v` was not reached or is a constant.
    pub fn get(&self, v: Var<'_, E>) -> Option<&Tensor<E>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, all-zero when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_, E>) -> Tensor<E> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

impl<'t, E: Element> Var<'t, E> {
    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn value(&self) -> Tensor<E> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn unary(self, out: Tensor<E>, op: Op<E>) -> Self {
        self.tape.record(out, op, &[self.id])
    }

    fn binary(
        self,
        other: Self,
        name: &'static str,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, a.shape(), b.shape())?;
        let out = Tensor::new(a.shape().to_vec(), k::zip_map(a.data(), b.data(), f))?;
        Ok(self.tape.record(out, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    fn broadcast(
        self,
        other: Self,
        name: &'static str,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> Result<Self> {
        let (x, b) = (self.value(), other.value());
        if !k::is_suffix(x.shape(), b.shape()) || b.numel() == 0 {
            return Err(Error::shape(name, x.shape(), b.shape()));
        }
        let n = b.numel();
        let bd = b.data();
        let data = x
            .data()
            .chunks_exact(n)
            .flat_map(|c| c.iter().zip(bd).map(|(&u, &v)| f(u, v)))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.record(out, op, &[self.id, other.id]))
    }

    /// `self + b`, with `b` repeated over the leading axes of `self`.
    pub fn add_broadcast(self, b: Self) -> Result<Self> {
        self.broadcast(b, "add_broadcast", |u, v| u + v, Op::AddBroadcast(self.id, b.id))
    }

    /// `self ⊙ b`, with `b` repeated over the leading axes of `self`.
    pub fn mul_broadcast(self, b: Self) -> Result<Self> {
        self.broadcast(b, "mul_broadcast", |u, v| u * v, Op::MulBroadcast(self.id, b.id))
    }

    pub fn scale(self, c: f64) -> Self {
        let c = E::of(c);
        let out = self.value().map(|v| v * c);
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn offset(self, c: f64) -> Self {
        let c = E::of(c);
        let out = self.value().map(|v| v + c);
        self.unary(out, Op::Offset(self.id))
    }

    pub fn neg(self) -> Self {
        self.scale(-1.0)
    }

    /// Batched product over the last two axes; a rank-2 right operand is
    /// shared across the leading axes.
    pub fn matmul(self, other: Self) -> Result<Self> {
        let out = k::matmul(&self.value(), &other.value())?;
        Ok(self.tape.record(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let out = k::permute(&self.value(), perm)?;
        Ok(self.unary(out, Op::Permute(self.id, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Self> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape("transpose", &self.shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = self.value().reshape(shape.to_vec())?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    pub fn slice(self, axis: usize, range: std::ops::Range<usize>) -> Result<Self> {
        let len = range.end.saturating_sub(range.start);
        let out = k::slice(&self.value(), axis, range.start, len)?;
        Ok(self.unary(
            out,
            Op::Slice {
                x: self.id,
                axis,
                start: range.start,
                len,
            },
        ))
    }

    pub fn sum(self) -> Self {
        let out = Tensor::scalar(self.value().data().iter().copied().sum());
        self.unary(out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let v = self.value();
        let n = E::of(v.numel() as f64);
        let out = Tensor::scalar(v.data().iter().copied().sum::<E>() / n);
        self.unary(out, Op::Mean(self.id))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Self> {
        let out = k::sum_axis(&self.value(), axis)?;
        Ok(self.unary(out, Op::SumAxis(self.id, axis)))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Self> {
        let v = self.value();
        let n = E::of(*v.shape().get(axis).unwrap_or(&1) as f64);
        let out = k::sum_axis(&v, axis)?.map(|s| s / n);
        Ok(self.unary(out, Op::MeanAxis(self.id, axis)))
    }

    pub fn gelu(self) -> Self {
        let out = self.value().map(k::gelu);
        self.unary(out, Op::Gelu(self.id))
    }

    pub fn silu(self) -> Self {
        let out = self.value().map(k::silu);
        self.unary(out, Op::Silu(self.id))
    }

    fn check_rows(&self, name: &str) -> Result<(Tensor<E>, usize)> {
        let v = self.value();
        if v.rank() == 0 || v.shape()[v.rank() - 1] == 0 {
            return Err(Error::Numeric(format!("{name} over an empty last axis")));
        }
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric(format!("NaN in {name} input")));
        }
        let d = v.shape()[v.rank() - 1];
        Ok((v, d))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(self) -> Result<Self> {
        let (v, d) = self.check_rows("softmax")?;
        let out = Tensor::new(v.shape().to_vec(), k::softmax_rows(v.data(), d))?;
        Ok(self.unary(out, Op::Softmax(self.id)))
    }

    pub fn log_softmax(self) -> Result<Self> {
        let (v, d) = self.check_rows("log_softmax")?;
        let out = Tensor::new(v.shape().to_vec(), k::log_softmax_rows(v.data(), d))?;
        Ok(self.unary(out, Op::LogSoftmax(self.id)))
    }

    /// Layer normalization over the last axis with optional affine terms.
    pub fn layer_norm(self, gamma: Option<Self>, beta: Option<Self>, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layernorm eps must be > 0, got {eps}")));
        }
        let v = self.value();
        let (_, d) = rows_of(v.shape());
        for p in [gamma, beta].into_iter().flatten() {
            if p.shape() != [d] {
                return Err(Error::shape("layer_norm", v.shape(), &p.shape()));
            }
        }
        let (xhat, rstd) = k::layernorm_rows(v.data(), d, E::of(eps));
        let mut out = xhat.clone();
        if let Some(gm) = gamma {
            let gv = gm.value();
            for row in out.chunks_exact_mut(d) {
                for (o, &s) in row.iter_mut().zip(gv.data()) {
                    *o *= s;
                }
            }
        }
        if let Some(b) = beta {
            let bv = b.value();
            for row in out.chunks_exact_mut(d) {
                for (o, &s) in row.iter_mut().zip(bv.data()) {
                    *o += s;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let mut inputs = vec![self.id];
        inputs.extend(gamma.map(|g| g.id));
        inputs.extend(beta.map(|b| b.id));
        Ok(self.tape.record(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.map(|g| g.id),
                beta: beta.map(|b| b.id),
                xhat,
                rstd,
            },
            &inputs,
        ))
    }

    /// `x / (‖x‖₂ + eps)` over the last axis.
    pub fn l2_normalize(self, eps: f64) -> Self {
        let v = self.value();
        let (_, d) = rows_of(v.shape());
        let eps = E::of(eps);
        let (out, norms) = if d == 0 {
            (Vec::new(), Vec::new())
        } else {
            k::l2_normalize_rows(v.data(), d, eps)
        };
        let out = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.unary(
            out,
            Op::L2Normalize {
                x: self.id,
                norms,
                eps,
            },
        )
    }

    /// Identity forward; contributes no gradient to `self`.
    pub fn stop_gradient(self) -> Self {
        self.tape.push(self.value(), Op::StopGradient, false)
    }

    /// Rows of a `[N, D]` table selected by `indices`, giving `[len, D]`.
    pub fn gather(self, indices: &[usize]) -> Result<Self> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(Error::shape("gather", table.shape(), &[indices.len()]));
        }
        let (n, d) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(Error::shape("gather", table.shape(), &[i]));
            }
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.unary(
            out,
            Op::Gather {
                table: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Rotates consecutive pairs of the last axis of `[.., T, d]` using
    /// per-position `cos`/`sin` tables of shape `[T, d/2]`.
    pub fn rope(self, cos: &Tensor<E>, sin: &Tensor<E>) -> Result<Self> {
        let v = self.value();
        let r = v.rank();
        if r < 2 {
            return Err(Error::shape("rope", v.shape(), cos.shape()));
        }
        let (seq, d) = (v.shape()[r - 2], v.shape()[r - 1]);
        if d % 2 != 0 {
            return Err(Error::Config(format!("rope needs an even last axis, got {d}")));
        }
        if cos.shape() != [seq, d / 2] || sin.shape() != cos.shape() {
            return Err(Error::shape("rope", v.shape(), cos.shape()));
        }
        let mut out = vec![E::zero(); v.numel()];
        k::rotate_pairs(v.data(), cos.data(), sin.data(), seq, d, false, &mut out);
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.unary(
            out,
            Op::Rope {
                x: self.id,
                cos: cos.clone(),
                sin: sin.clone(),
            },
        ))
    }
}

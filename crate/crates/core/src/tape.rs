//! Reverse-mode automatic differentiation over whole-tensor operations.
//!
//! A [`Tape`] records every operation in insertion order; [`Var`] is a cheap
//! handle to one recorded node. [`Tape::backward`] walks the record once in
//! reverse, so each node is visited exactly once and gradients from shared
//! subexpressions are summed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{matmul_into, transpose2, Tensor};

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddConst(usize),
    MulScalar { x: usize, s: usize },
    AddRowBias { x: usize, b: usize, cols: usize },
    ScaleRows { x: usize, s: usize, cols: usize },
    ChannelMask { x: usize, m: usize, plane: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, m: usize, n: usize },
    Reshape(usize),
    Concat { parts: Vec<usize>, sizes: Vec<usize>, outer: usize, inner: usize },
    Narrow { x: usize, outer: usize, n_in: usize, inner: usize, start: usize, len: usize },
    Conv2d { x: usize, k: usize, b: usize, stride: usize, pad: usize },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softmax { x: usize, outer: usize, n: usize, inner: usize },
    LogSoftmax { x: usize, cols: usize },
    Pick { x: usize, cols: usize, idx: Vec<usize> },
    Sum(usize),
    Mean(usize),
    MeanChannels { x: usize, c: usize },
    MaxChannels { x: usize, arg: Vec<usize> },
    GlobalAvgPool { x: usize, plane: usize },
    MeanRows { x: usize, rows: usize, cols: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Operation record for one forward pass.
///
/// A tape is confined to the thread that builds it. Call [`Tape::backward`]
/// once per recorded loss; a second call is rejected until
/// [`Tape::reset_backward`].
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> core::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if it is a tracked leaf
    /// that the loss depends on.
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let shape = var.shape();
        self.get(var).map(|g| Tensor::new(&shape, g.to_vec()).expect("gradient shape"))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn any_tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    pub fn reset_backward(&self) {
        self.consumed.set(false);
    }

    /// Reverse pass from a scalar `loss`, returning gradients for every
    /// tracked leaf it depends on.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !core::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        if self.consumed.get() {
            return Err(Error::Contract(
                "backward already ran on this tape; reset before calling again".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if !nodes[loss.id].tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].tracked {
        return;
    }
    let n = nodes[id].value.numel();
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); n]);
    f(slot);
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_assign(ga, g));
            accumulate(nodes, grads, *b, |gb| add_assign(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_assign(ga, g));
            accumulate(nodes, grads, *b, |gb| {
                for (x, &y) in gb.iter_mut().zip(g) {
                    *x = *x - y;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * bv[i];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] = gb[i] + g[i] * av[i];
                }
            });
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, |ga| {
            for (x, &y) in ga.iter_mut().zip(g) {
                *x = *x + *c * y;
            }
        }),
        Op::AddConst(a) => accumulate(nodes, grads, *a, |ga| add_assign(ga, g)),
        Op::MulScalar { x, s } => {
            let xv = val(*x);
            let sv = val(*s)[0];
            accumulate(nodes, grads, *x, |gx| {
                for (a, &b) in gx.iter_mut().zip(g) {
                    *a = *a + sv * b;
                }
            });
            accumulate(nodes, grads, *s, |gs| {
                gs[0] = gs[0] + g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>();
            });
        }
        Op::AddRowBias { x, b, cols } => {
            accumulate(nodes, grads, *x, |gx| add_assign(gx, g));
            accumulate(nodes, grads, *b, |gb| {
                for row in g.chunks(*cols) {
                    add_assign(gb, row);
                }
            });
        }
        Op::ScaleRows { x, s, cols } => {
            let (xv, sv) = (val(*x), val(*s));
            accumulate(nodes, grads, *x, |gx| {
                for (i, (gr, grow)) in gx.chunks_mut(*cols).zip(g.chunks(*cols)).enumerate() {
                    for (a, &b) in gr.iter_mut().zip(grow) {
                        *a = *a + sv[i] * b;
                    }
                }
            });
            accumulate(nodes, grads, *s, |gs| {
                for (i, (grow, xrow)) in g.chunks(*cols).zip(xv.chunks(*cols)).enumerate() {
                    gs[i] = gs[i] + grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                }
            });
        }
        Op::ChannelMask { x, m, plane } => {
            let (xv, mv) = (val(*x), val(*m));
            accumulate(nodes, grads, *x, |gx| {
                for (gc, grow) in gx.chunks_mut(*plane).zip(g.chunks(*plane)) {
                    for p in 0..*plane {
                        gc[p] = gc[p] + grow[p] * mv[p];
                    }
                }
            });
            accumulate(nodes, grads, *m, |gm| {
                for (grow, xrow) in g.chunks(*plane).zip(xv.chunks(*plane)) {
                    for p in 0..*plane {
                        gm[p] = gm[p] + grow[p] * xrow[p];
                    }
                }
            });
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if nodes[*a].tracked {
                let bt = transpose2(val(*b), k, n);
                accumulate(nodes, grads, *a, |ga| matmul_into(g, &bt, ga, m, n, k));
            }
            if nodes[*b].tracked {
                let at = transpose2(val(*a), m, k);
                accumulate(nodes, grads, *b, |gb| matmul_into(&at, g, gb, k, m, n));
            }
        }
        Op::Transpose { a, m, n } => {
            let gt = transpose2(g, *n, *m);
            accumulate(nodes, grads, *a, |ga| add_assign(ga, &gt));
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, |ga| add_assign(ga, g)),
        Op::Concat {
            parts,
            sizes,
            outer,
            inner,
        } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (&p, &sz) in parts.iter().zip(sizes) {
                accumulate(nodes, grads, p, |gp| {
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + sz) * inner];
                        let dst = &mut gp[o * sz * inner..(o + 1) * sz * inner];
                        add_assign(dst, src);
                    }
                });
                offset += sz;
            }
        }
        Op::Narrow {
            x,
            outer,
            n_in,
            inner,
            start,
            len,
        } => accumulate(nodes, grads, *x, |gx| {
            for o in 0..*outer {
                let dst = &mut gx[(o * n_in + start) * inner..(o * n_in + start + len) * inner];
                add_assign(dst, &g[o * len * inner..(o + 1) * len * inner]);
            }
        }),
        Op::Conv2d {
            x,
            k,
            b,
            stride,
            pad,
        } => conv2d_backward(nodes, grads, g, out.shape(), *x, *k, *b, *stride, *pad),
        Op::Sigmoid(a) => {
            let y = out.data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * y[i] * (T::one() - y[i]);
                }
            });
        }
        Op::Tanh(a) => {
            let y = out.data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * (T::one() - y[i] * y[i]);
                }
            });
        }
        Op::Relu(a) => {
            let xv = val(*a);
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    if xv[i] > T::zero() {
                        ga[i] = ga[i] + g[i];
                    }
                }
            });
        }
        Op::Softmax { x, outer, n, inner } => {
            let y = out.data();
            let (n, inner) = (*n, *inner);
            accumulate(nodes, grads, *x, |gx| {
                for o in 0..*outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = gx[at(j)] + y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { x, cols } => {
            let y = out.data();
            accumulate(nodes, grads, *x, |gx| {
                for ((gr, grow), yrow) in gx.chunks_mut(*cols).zip(g.chunks(*cols)).zip(y.chunks(*cols)) {
                    let total: T = grow.iter().copied().sum();
                    for j in 0..*cols {
                        gr[j] = gr[j] + grow[j] - yrow[j].exp() * total;
                    }
                }
            });
        }
        Op::Pick { x, cols, idx } => accumulate(nodes, grads, *x, |gx| {
            for (r, &c) in idx.iter().enumerate() {
                gx[r * cols + c] = gx[r * cols + c] + g[r];
            }
        }),
        Op::Sum(a) => accumulate(nodes, grads, *a, |ga| {
            for v in ga.iter_mut() {
                *v = *v + g[0];
            }
        }),
        Op::Mean(a) => {
            let n = T::from_f64(nodes[*a].value.numel() as f64);
            accumulate(nodes, grads, *a, |ga| {
                for v in ga.iter_mut() {
                    *v = *v + g[0] / n;
                }
            });
        }
        Op::MeanChannels { x, c } => {
            let cn = T::from_f64(*c as f64);
            let plane = g.len();
            accumulate(nodes, grads, *x, |gx| {
                for ch in gx.chunks_mut(plane) {
                    for p in 0..plane {
                        ch[p] = ch[p] + g[p] / cn;
                    }
                }
            });
        }
        Op::MaxChannels { x, arg } => {
            let plane = g.len();
            accumulate(nodes, grads, *x, |gx| {
                for p in 0..plane {
                    let i = arg[p] * plane + p;
                    gx[i] = gx[i] + g[p];
                }
            });
        }
        Op::GlobalAvgPool { x, plane } => {
            let pn = T::from_f64(*plane as f64);
            accumulate(nodes, grads, *x, |gx| {
                for (c, ch) in gx.chunks_mut(*plane).enumerate() {
                    for v in ch.iter_mut() {
                        *v = *v + g[c] / pn;
                    }
                }
            });
        }
        Op::MeanRows { x, rows, cols } => {
            let rn = T::from_f64(*rows as f64);
            accumulate(nodes, grads, *x, |gx| {
                for row in gx.chunks_mut(*cols) {
                    for j in 0..*cols {
                        row[j] = row[j] + g[j] / rn;
                    }
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    out_shape: &[usize],
    x: usize,
    k: usize,
    b: usize,
    stride: usize,
    pad: usize,
) {
    let xs = nodes[x].value.shape();
    let (c_in, h, w) = (xs[0], xs[1], xs[2]);
    let ks = nodes[k].value.shape();
    let (o_n, kk) = (ks[0], ks[2]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let geo = ConvGeometry {
        c_in,
        h,
        w,
        kk,
        stride,
        pad,
        ho,
        wo,
    };
    let (rows, p) = (c_in * kk * kk, ho * wo);
    if nodes[x].tracked {
        // d cols = Kᵀ · g, scattered back onto the input.
        let kt = transpose2(nodes[k].value.data(), o_n, rows);
        let mut dcols = vec![T::zero(); rows * p];
        matmul_into(&kt, g, &mut dcols, rows, o_n, p);
        accumulate(nodes, grads, x, |gx| geo.col2im_add(&dcols, gx));
    }
    if nodes[k].tracked {
        // dK = g · colsᵀ
        let cols = geo.im2col(nodes[x].value.data());
        let cols_t = transpose2(&cols, rows, p);
        accumulate(nodes, grads, k, |gk| matmul_into(g, &cols_t, gk, o_n, p, rows));
    }
    accumulate(nodes, grads, b, |gb| {
        for (o, chunk) in g.chunks(ho * wo).enumerate() {
            gb[o] = gb[o] + chunk.iter().copied().sum::<T>();
        }
    });
}

#[inline]
fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    /// Snapshot of the node's value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.value_ref(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.value_ref(self.id))
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let tracked = self.tape.tracked(self.id);
        self.tape.push(value, op, tracked)
    }

    fn binary(self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let tracked = self.tape.any_tracked(&[self.id, other.id]);
        self.tape.push(value, op, tracked)
    }

    fn zip_same(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let a = self.tape.value_ref(self.id);
        let b = self.tape.value_ref(other.id);
        if a.shape() != b.shape() {
            return Err(Error::dim(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data)
    }

    fn map_value(self, f: impl Fn(T) -> T) -> Tensor<T> {
        self.tape.value_ref(self.id).map(f)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::from_f64(c);
        let v = self.map_value(|a| a * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn add_const(self, c: f64) -> Var<'t, T> {
        let c = T::from_f64(c);
        let v = self.map_value(|a| a + c);
        self.unary(v, Op::AddConst(self.id))
    }

    /// `1 - x`
    pub fn one_minus(self) -> Var<'t, T> {
        self.neg().add_const(1.0)
    }

    /// Multiplies every element by a single-element tensor `s`.
    pub fn scale_by(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = {
            let sv = self.tape.value_ref(s.id);
            if sv.numel() != 1 {
                return Err(Error::dim("scale_by", &self.shape(), sv.shape()));
            }
            let c = sv.data()[0];
            self.map_value(|a| a * c)
        };
        Ok(self.binary(s, v, Op::MulScalar { x: self.id, s: s.id }))
    }

    /// `x[M,N] + b[N]` broadcast over rows.
    pub fn add_row_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, cols) = {
            let x = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(bias.id);
            if x.rank() != 2 || b.rank() != 1 || b.shape()[0] != x.shape()[1] {
                return Err(Error::dim("add_row_bias", x.shape(), b.shape()));
            }
            let cols = x.shape()[1];
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(cols) {
                add_assign(row, b.data());
            }
            (Tensor::new(x.shape(), data)?, cols)
        };
        Ok(self.binary(bias, v, Op::AddRowBias { x: self.id, b: bias.id, cols }))
    }

    /// Row `i` of `x[M,N]` multiplied by `s[i]`.
    pub fn scale_rows(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, cols) = {
            let x = self.tape.value_ref(self.id);
            let sv = self.tape.value_ref(s.id);
            if x.rank() != 2 || sv.rank() != 1 || sv.shape()[0] != x.shape()[0] {
                return Err(Error::dim("scale_rows", x.shape(), sv.shape()));
            }
            let cols = x.shape()[1];
            let mut data = x.data().to_vec();
            for (row, &c) in data.chunks_mut(cols).zip(sv.data()) {
                for a in row.iter_mut() {
                    *a = *a * c;
                }
            }
            (Tensor::new(x.shape(), data)?, cols)
        };
        Ok(self.binary(s, v, Op::ScaleRows { x: self.id, s: s.id, cols }))
    }

    /// `x[C,H,W] ⊙ m[1,H,W]` with the mask broadcast over channels.
    pub fn mul_channel_mask(self, mask: Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, plane) = {
            let x = self.tape.value_ref(self.id);
            let m = self.tape.value_ref(mask.id);
            if x.rank() != 3 || m.rank() != 3 || m.shape()[0] != 1 || m.shape()[1..] != x.shape()[1..] {
                return Err(Error::dim("mul_channel_mask", x.shape(), m.shape()));
            }
            let plane = x.shape()[1] * x.shape()[2];
            let mut data = x.data().to_vec();
            for ch in data.chunks_mut(plane) {
                for (a, &b) in ch.iter_mut().zip(m.data()) {
                    *a = *a * b;
                }
            }
            (Tensor::new(x.shape(), data)?, plane)
        };
        Ok(self.binary(mask, v, Op::ChannelMask { x: self.id, m: mask.id, plane }))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, m, k, n) = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::dim("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![T::zero(); m * n];
            matmul_into(a.data(), b.data(), &mut c, m, k, n);
            (Tensor::new(&[m, n], c)?, m, k, n)
        };
        Ok(self.binary(
            other,
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        ))
    }

    /// Dense layer `x[M,Din] · w[Din,Dout] + b[Dout]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(weight)?.add_row_bias(bias)
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let (v, m, n) = {
            let a = self.tape.value_ref(self.id);
            if a.rank() != 2 {
                return Err(Error::dim("transpose", a.shape(), &[]));
            }
            let (m, n) = (a.shape()[0], a.shape()[1]);
            (Tensor::new(&[n, m], transpose2(a.data(), m, n))?, m, n)
        };
        Ok(self.unary(v, Op::Transpose { a: self.id, m, n }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshaped(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let (v, sizes, outer, inner) = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value_ref(p.id)).collect();
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(Error::dim("concat", &base, &[axis]));
            }
            for v in &vals[1..] {
                let s = v.shape();
                if s.len() != base.len()
                    || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
                {
                    return Err(Error::dim("concat", &base, s));
                }
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
            let total: usize = sizes.iter().sum();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (v, &sz) in vals.iter().zip(&sizes) {
                    data.extend_from_slice(&v.data()[o * sz * inner..(o + 1) * sz * inner]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            (Tensor::new(&shape, data)?, sizes, outer, inner)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let tracked = tape.any_tracked(&ids);
        Ok(tape.push(
            v,
            Op::Concat {
                parts: ids,
                sizes,
                outer,
                inner,
            },
            tracked,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (v, outer, n_in, inner) = {
            let x = self.tape.value_ref(self.id);
            let s = x.shape();
            if axis >= s.len() || len == 0 || start + len > s[axis] {
                return Err(Error::dim("narrow", s, &[axis, start, len]));
            }
            let (outer, n_in, inner) = split_axis(s, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&x.data()[(o * n_in + start) * inner..(o * n_in + start + len) * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            (Tensor::new(&shape, data)?, outer, n_in, inner)
        };
        Ok(self.unary(
            v,
            Op::Narrow {
                x: self.id,
                outer,
                n_in,
                inner,
                start,
                len,
            },
        ))
    }

    /// Cross-correlation of `x[C,H,W]` with `kernel[O,C,k,k]` plus `bias[O]`.
    pub fn conv2d(
        self,
        kernel: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let v = {
            let x = self.tape.value_ref(self.id);
            let k = self.tape.value_ref(kernel.id);
            let b = self.tape.value_ref(bias.id);
            conv2d_forward(&x, &k, &b, stride, padding)?
        };
        let tracked = self.tape.any_tracked(&[self.id, kernel.id, bias.id]);
        Ok(self.tape.push(
            v,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                b: bias.id,
                stride,
                pad: padding,
            },
            tracked,
        ))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.map_value(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// Sigmoid clamped to `[eps, 1 - eps]` so that the result stays inside
    /// the open unit interval even when the float sigmoid saturates.
    pub fn sigmoid_open(self) -> Var<'t, T> {
        let lo = T::epsilon();
        let hi = T::one() - T::epsilon();
        let v = self.map_value(|a| sigmoid(a).max(lo).min(hi));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t, T> {
        let v = self.map_value(|a| a.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.map_value(|a| if a > T::zero() { a } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let (v, outer, n, inner) = {
            let x = self.tape.value_ref(self.id);
            if axis >= x.rank() {
                return Err(Error::dim("softmax", x.shape(), &[axis]));
            }
            let (outer, n, inner) = split_axis(x.shape(), axis);
            let mut out = x.data().to_vec();
            softmax_strided(&mut out, outer, n, inner);
            (Tensor::new(x.shape(), out)?, outer, n, inner)
        };
        Ok(self.unary(v, Op::Softmax { x: self.id, outer, n, inner }))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(self) -> Var<'t, T> {
        let (v, cols) = {
            let x = self.tape.value_ref(self.id);
            let cols = *x.shape().last().expect("rank >= 1");
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(cols) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&a| (a - m).exp()).sum::<T>().ln();
                for a in row.iter_mut() {
                    *a = *a - lse;
                }
            }
            (x.clone_with(out), cols)
        };
        self.unary(v, Op::LogSoftmax { x: self.id, cols })
    }

    /// `out[r] = x[r, idx[r]]` for `x[R,C]`.
    pub fn pick(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let (v, cols) = {
            let x = self.tape.value_ref(self.id);
            if x.rank() != 2 || x.shape()[0] != idx.len() {
                return Err(Error::dim("pick", x.shape(), &[idx.len()]));
            }
            let cols = x.shape()[1];
            if let Some(&bad) = idx.iter().find(|&&c| c >= cols) {
                return Err(Error::Data(format!("label {bad} out of range for {cols} classes")));
            }
            let data = idx.iter().enumerate().map(|(r, &c)| x.data()[r * cols + c]).collect();
            (Tensor::new(&[idx.len()], data)?, cols)
        };
        Ok(self.unary(
            v,
            Op::Pick {
                x: self.id,
                cols,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn sum(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.with_value(|x| x.data().iter().copied().sum()));
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.with_value(|x| {
            x.data().iter().copied().sum::<T>() / T::from_f64(x.numel() as f64)
        }));
        self.unary(v, Op::Mean(self.id))
    }

    /// Channel mean `[C,H,W] -> [1,H,W]`.
    pub fn mean_pool_channels(self) -> Result<Var<'t, T>> {
        let (v, c) = {
            let x = self.tape.value_ref(self.id);
            let (c, h, w) = chw(&x, "mean_pool_channels")?;
            let plane = h * w;
            let mut out = vec![T::zero(); plane];
            for ch in x.data().chunks(plane) {
                add_assign(&mut out, ch);
            }
            let cn = T::from_f64(c as f64);
            out.iter_mut().for_each(|a| *a = *a / cn);
            (Tensor::new(&[1, h, w], out)?, c)
        };
        Ok(self.unary(v, Op::MeanChannels { x: self.id, c }))
    }

    /// Channel max `[C,H,W] -> [1,H,W]`; the gradient goes to the lowest
    /// channel index among ties.
    pub fn max_pool_channels(self) -> Result<Var<'t, T>> {
        let (v, arg) = {
            let x = self.tape.value_ref(self.id);
            let (c, h, w) = chw(&x, "max_pool_channels")?;
            let plane = h * w;
            let d = x.data();
            let mut out = d[..plane].to_vec();
            let mut arg = vec![0usize; plane];
            for ch in 1..c {
                for p in 0..plane {
                    let v = d[ch * plane + p];
                    if v > out[p] {
                        out[p] = v;
                        arg[p] = ch;
                    }
                }
            }
            (Tensor::new(&[1, h, w], out)?, arg)
        };
        Ok(self.unary(v, Op::MaxChannels { x: self.id, arg }))
    }

    /// Spatial mean `[C,H,W] -> [C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let (v, plane) = {
            let x = self.tape.value_ref(self.id);
            let (c, h, w) = chw(&x, "global_avg_pool")?;
            let plane = h * w;
            let pn = T::from_f64(plane as f64);
            let out = x
                .data()
                .chunks(plane)
                .map(|ch| ch.iter().copied().sum::<T>() / pn)
                .collect();
            (Tensor::new(&[c], out)?, plane)
        };
        Ok(self.unary(v, Op::GlobalAvgPool { x: self.id, plane }))
    }

    /// Row mean `[M,N] -> [N]`.
    pub fn mean_rows(self) -> Result<Var<'t, T>> {
        let (v, rows, cols) = {
            let x = self.tape.value_ref(self.id);
            if x.rank() != 2 {
                return Err(Error::dim("mean_rows", x.shape(), &[]));
            }
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![T::zero(); cols];
            for row in x.data().chunks(cols) {
                add_assign(&mut out, row);
            }
            let rn = T::from_f64(rows as f64);
            out.iter_mut().for_each(|a| *a = *a / rn);
            (Tensor::new(&[cols], out)?, rows, cols)
        };
        Ok(self.unary(v, Op::MeanRows { x: self.id, rows, cols }))
    }
}

impl<T: Real> Tensor<T> {
    fn clone_with(&self, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(), data).expect("same numel")
    }
}

fn chw<T: Real>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(op, x.shape(), &[])),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_strided<T: Real>(buf: &mut [T], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let m = (0..n).map(|j| buf[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..n {
                let e = (buf[at(j)] - m).exp();
                buf[at(j)] = e;
                total = total + e;
            }
            for j in 0..n {
                buf[at(j)] = buf[at(j)] / total;
            }
        }
    }
}

/// Softmax of a plain slice, without recording anything.
pub fn softmax_slice<T: Real>(x: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    softmax_strided(&mut out, 1, x.len(), 1);
    out
}

/// Index bookkeeping for lowering a convolution to a matrix product.
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    kk: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn is_identity(&self) -> bool {
        self.kk == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input row feeding output row `o` at kernel offset `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, lim: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&i| i < lim)
    }

    /// `[C·k·k, Ho·Wo]` patch matrix; padded positions are zero.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        if self.is_identity() {
            return x.to_vec();
        }
        let (kk, p) = (self.kk, self.ho * self.wo);
        let mut cols = vec![T::zero(); self.c_in * kk * kk * p];
        for c in 0..self.c_in {
            for ky in 0..kk {
                for kx in 0..kk {
                    let row = &mut cols[((c * kk + ky) * kk + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.h) else { continue };
                        let src = &x[(c * self.h + iy) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                row[oy * self.wo + ox] = src[ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): adds patch gradients onto `gx`.
    fn col2im_add<T: Real>(&self, cols: &[T], gx: &mut [T]) {
        if self.is_identity() {
            add_assign(gx, cols);
            return;
        }
        let (kk, p) = (self.kk, self.ho * self.wo);
        for c in 0..self.c_in {
            for ky in 0..kk {
                for kx in 0..kk {
                    let row = &cols[((c * kk + ky) * kk + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.h) else { continue };
                        let dst = &mut gx[(c * self.h + iy) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                dst[ix] = dst[ix] + row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (c_in, h, w) = chw(x, "conv2d")?;
    let ks = k.shape();
    if ks.len() != 4 || ks[1] != c_in || ks[2] != ks[3] {
        return Err(Error::dim("conv2d", x.shape(), ks));
    }
    let (o_n, kk) = (ks[0], ks[2]);
    if kk % 2 == 0 {
        return Err(Error::Config(format!("conv2d kernel size must be odd, got {kk}")));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if b.shape() != [o_n] {
        return Err(Error::dim("conv2d bias", ks, b.shape()));
    }
    if h + 2 * pad < kk || w + 2 * pad < kk {
        return Err(Error::dim("conv2d output extent", x.shape(), ks));
    }
    let ho = (h + 2 * pad - kk) / stride + 1;
    let wo = (w + 2 * pad - kk) / stride + 1;
    let geo = ConvGeometry {
        c_in,
        h,
        w,
        kk,
        stride,
        pad,
        ho,
        wo,
    };
    let p = ho * wo;
    let mut out = Vec::with_capacity(o_n * p);
    for &bias in b.data() {
        out.extend(core::iter::repeat_n(bias, p));
    }
    let cols = geo.im2col(x.data());
    matmul_into(k.data(), &cols, &mut out, o_n, c_in * kk * kk, p);
    Tensor::new(&[o_n, ho, wo], out)
}

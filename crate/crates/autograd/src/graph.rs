//! Define-by-run tape. Every op evaluates eagerly and records enough
//! context for a single reverse sweep.
//!
//! Shape violations inside the tape are programming errors and panic with a
//! message naming the op; public model APIs validate their inputs before
//! building graphs.

use std::sync::Arc;

use crate::conv::{col2im, im2col, ConvGeom};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Relu,
    Exp,
    Ln,
    Sqrt,
    Square,
    Recip,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    AddPerRow(Var, Var),
    AddPerCol(Var, Var),
    MulPerRow(Var, Var),
    MulPerCol(Var, Var),
    MulScalarVar(Var, Var),
    MatMul {
        a: Var,
        la: MatRef,
        b: Var,
        lb: MatRef,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        col: Option<Arc<Vec<T>>>,
    },
    Unary(Var, Unary),
    Sum(Var),
    SumCols(Var),
    SumRows(Var),
    SoftmaxRows(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Number of independent normalization groups.
        groups: usize,
        /// True for `(rows, C)` layer norm: groups are rows, affine over columns.
        rowwise: bool,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather(Var, Arc<Vec<usize>>),
    ScatterAdd(Var, Arc<Vec<usize>>),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inners: Vec<usize>,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recording of tensor operations that can be differentiated once.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    track: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), track: true }
    }

    /// A graph on which no leaf ever requires a gradient.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), track: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First element of a (usually one-element) node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf sharing storage with a parameter; differentiable when `trainable`.
    pub fn leaf(&mut self, t: Arc<Tensor<T>>, trainable: bool) -> Var {
        let needs = trainable && self.track;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: needs });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{name}: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, "add", |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, "sub", |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, "mul", |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn shift(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|v| v + c);
        let ng = self.ng(&[a]);
        self.push(t, Op::Shift(a), ng)
    }

    fn per_axis(&mut self, x: Var, v: Var, per_row: bool, mul: bool) -> Tensor<T> {
        let tx = self.value(x);
        let (rows, cols) = tx.rows_cols();
        let tv = self.value(v);
        let want = if per_row { rows } else { cols };
        assert_eq!(tv.len(), want, "broadcast: vector length {} vs axis {}", tv.len(), want);
        let vd = tv.data();
        let mut out = tx.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                let s = if per_row { vd[r] } else { vd[c] };
                let o = &mut out[r * cols + c];
                *o = if mul { *o * s } else { *o + s };
            }
        }
        Tensor::new(tx.shape(), out).unwrap()
    }

    /// Adds `v[r]` to every element of row `r` (first axis), e.g. a channel bias.
    pub fn add_per_row(&mut self, x: Var, v: Var) -> Var {
        let t = self.per_axis(x, v, true, false);
        let ng = self.ng(&[x, v]);
        self.push(t, Op::AddPerRow(x, v), ng)
    }

    /// Adds `v[c]` to column `c` of every row, e.g. a token bias.
    pub fn add_per_col(&mut self, x: Var, v: Var) -> Var {
        let t = self.per_axis(x, v, false, false);
        let ng = self.ng(&[x, v]);
        self.push(t, Op::AddPerCol(x, v), ng)
    }

    pub fn mul_per_row(&mut self, x: Var, v: Var) -> Var {
        let t = self.per_axis(x, v, true, true);
        let ng = self.ng(&[x, v]);
        self.push(t, Op::MulPerRow(x, v), ng)
    }

    pub fn mul_per_col(&mut self, x: Var, v: Var) -> Var {
        let t = self.per_axis(x, v, false, true);
        let ng = self.ng(&[x, v]);
        self.push(t, Op::MulPerCol(x, v), ng)
    }

    /// Multiplies every element by the single element of `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar_var: scalar operand");
        let sv = self.item(s);
        let t = self.value(x).scale(sv);
        let ng = self.ng(&[x, s]);
        self.push(t, Op::MulScalarVar(x, s), ng)
    }

    /// Matrix product of rank-2 nodes, each optionally transposed.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let la = {
            let s = self.shape(a);
            assert_eq!(s.len(), 2, "matmul: lhs must be rank 2, got {s:?}");
            let m = MatRef::new(s[0], s[1]);
            if ta { m.t() } else { m }
        };
        let lb = {
            let s = self.shape(b);
            assert_eq!(s.len(), 2, "matmul: rhs must be rank 2, got {s:?}");
            let m = MatRef::new(s[0], s[1]);
            if tb { m.t() } else { m }
        };
        let (m, k) = la.dims();
        let (k2, n) = lb.dims();
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), self.value(a).data(), la, self.value(b).data(), lb, T::zero(), &mut out);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMul { a, la, b, lb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// Single-image convolution: `x (C,H,W)`, `w (O,C,kh,kw)`, optional bias `(O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw().expect("conv2d: input must be (C,H,W)");
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv2d: weight must be (O,C,kh,kw)");
        assert_eq!(ws[1], c, "conv2d: weight expects {} input channels, got {c}", ws[1]);
        let geom = ConvGeom { in_ch: c, h, w: wd, kh: ws[2], kw: ws[3], stride, pad };
        assert!(h + 2 * pad >= geom.kh && wd + 2 * pad >= geom.kw, "conv2d: kernel larger than input");
        let (oc, oh, ow) = (ws[0], geom.out_h(), geom.out_w());
        let npos = oh * ow;
        let col: Option<Vec<T>> =
            if geom.is_pointwise() { None } else { Some(im2col(self.value(x).data(), &geom)) };
        let mut out = vec![T::zero(); oc * npos];
        {
            let colref: &[T] = match &col {
                Some(cv) => cv,
                None => self.value(x).data(),
            };
            gemm(
                T::one(),
                self.value(w).data(),
                MatRef::new(oc, geom.patch_len()),
                colref,
                MatRef::new(geom.patch_len(), npos),
                T::zero(),
                &mut out,
            );
        }
        if let Some(bv) = b {
            let bd = self.value(bv).data();
            assert_eq!(bd.len(), oc, "conv2d: bias length");
            for (o, chunk) in out.chunks_mut(npos).enumerate() {
                for v in chunk {
                    *v += bd[o];
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let ng = self.ng(&parents);
        let keep_col = self.nodes[w.0].needs_grad;
        let col = if keep_col { col.map(Arc::new) } else { None };
        self.push(Tensor::new(&[oc, oh, ow], out).unwrap(), Op::Conv { x, w, b, geom, col }, ng)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Silu => |v| v / (T::one() + (-v).exp()),
            Unary::Relu => |v| if v > T::zero() { v } else { T::zero() },
            Unary::Exp => |v| v.exp(),
            Unary::Ln => |v| v.ln(),
            Unary::Sqrt => |v| v.sqrt(),
            Unary::Square => |v| v * v,
            Unary::Recip => |v| v.recip(),
        };
        let t = self.value(x).map(f);
        let ng = self.ng(&[x]);
        self.push(t, Op::Unary(x, kind), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Recip)
    }

    /// Sum of all elements into a one-element node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// `(R, ...)` → `(R)`: sum over everything but the first axis.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.rows_cols();
        let out: Vec<T> = (0..rows).map(|r| tx.data()[r * cols..(r + 1) * cols].iter().copied().sum()).collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[rows], out).unwrap(), Op::SumCols(x), ng)
    }

    /// `(R, C)` → `(C)`: sum over the first axis.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.rows_cols();
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(&tx.data()[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[cols], out).unwrap(), Op::SumRows(x), ng)
    }

    /// Numerically stable softmax over the last axis of a `(R, C)` node.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.rows_cols();
        let mut out = tx.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let ng = self.ng(&[x]);
        let shape = tx.shape().to_vec();
        self.push(Tensor::new(&shape, out).unwrap(), Op::SoftmaxRows(x), ng)
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        rowwise: bool,
        eps: T,
    ) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.rows_cols();
        let n = tx.len();
        assert!(groups > 0 && n.is_multiple_of(groups), "norm: {groups} groups do not divide {n}");
        let gsize = n / groups;
        let affine = if rowwise { cols } else { rows };
        assert_eq!(self.value(gamma).len(), affine, "norm: gamma length");
        assert_eq!(self.value(beta).len(), affine, "norm: beta length");
        let xd = tx.data();
        let mut xhat = vec![T::zero(); n];
        let mut rstd = vec![T::zero(); groups];
        let inv_g = T::one() / T::lit(gsize as f64);
        for g in 0..groups {
            let seg = &xd[g * gsize..(g + 1) * gsize];
            let mu = seg.iter().copied().sum::<T>() * inv_g;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_g;
            let rs = (var + eps).sqrt().recip();
            rstd[g] = rs;
            for (o, &v) in xhat[g * gsize..(g + 1) * gsize].iter_mut().zip(seg) {
                *o = (v - mu) * rs;
            }
        }
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![T::zero(); n];
        for i in 0..n {
            let a = if rowwise { i % cols } else { i / cols };
            out[i] = xhat[i] * gd[a] + bd[a];
        }
        let shape = tx.shape().to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::new(&shape, out).unwrap(),
            Op::Norm { x, gamma, beta, groups, rowwise, xhat, rstd },
            ng,
        )
    }

    /// Layer norm over the last axis of `(N, C)` with per-column affine.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let rows = self.value(x).rows_cols().0;
        self.normalize(x, gamma, beta, rows, true, eps)
    }

    /// Group norm of a `(C, H, W)` map with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Var {
        let c = self.shape(x)[0];
        assert!(c.is_multiple_of(groups), "group_norm: {groups} groups do not divide {c} channels");
        self.normalize(x, gamma, beta, groups, false, eps)
    }

    /// `out[i] = x[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let tx = self.value(x);
        assert_eq!(shape.iter().product::<usize>(), idx.len(), "gather: shape vs index count");
        let xd = tx.data();
        let out: Vec<T> = idx.iter().map(|&i| xd[i]).collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, out).unwrap(), Op::Gather(x, idx), ng)
    }

    /// `out[idx[i]] += x[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&mut self, x: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.len(), idx.len(), "scatter_add: index count");
        let n: usize = shape.iter().product();
        let mut out = vec![T::zero(); n];
        for (&i, &v) in idx.iter().zip(tx.data()) {
            out[i] += v;
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, out).unwrap(), Op::ScatterAdd(x, idx), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = (*self.nodes[x.0].value).clone().reshape(shape).expect("reshape");
        let ng = self.ng(&[x]);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = self.shape(parts[0]).to_vec();
        assert!(axis < first.len(), "concat: axis out of range");
        let outer: usize = first[..axis].iter().product();
        let mut inners = Vec::with_capacity(parts.len());
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat: rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat: dim {d} mismatch");
                }
            }
            axis_total += s[axis];
            inners.push(s[axis..].iter().product::<usize>());
        }
        let total_inner: usize = inners.iter().sum();
        let mut out = Vec::with_capacity(outer * total_inner);
        for o in 0..outer {
            for (&p, &inner) in parts.iter().zip(&inners) {
                out.extend_from_slice(&self.value(p).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = axis_total;
        let ng = self.ng(parts);
        self.push(
            Tensor::new(&shape, out).unwrap(),
            Op::Concat { parts: parts.to_vec(), outer, inners },
            ng,
        )
    }

    /// Gradient of a leaf after [`Graph::backward`], if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).unwrap())
    }

    /// Reverse sweep from a one-element node. Gradients are retained only on leaves.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must have one element");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return;
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            backprop_node(&self.nodes, &mut self.grads, i, &g);
        }
    }
}

fn acc<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |d| add_into(d, g));
            acc(nodes, grads, *b, |d| {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d -= gv;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            acc(nodes, grads, *a, |d| {
                for ((d, &gv), &y) in d.iter_mut().zip(g).zip(vb) {
                    *d += gv * y;
                }
            });
            acc(nodes, grads, *b, |d| {
                for ((d, &gv), &x) in d.iter_mut().zip(g).zip(va) {
                    *d += gv * x;
                }
            });
        }
        Op::Scale(a, s) => acc(nodes, grads, *a, |d| {
            for (d, &gv) in d.iter_mut().zip(g) {
                *d += gv * *s;
            }
        }),
        Op::Shift(a) | Op::Reshape(a) => acc(nodes, grads, *a, |d| add_into(d, g)),
        Op::AddPerRow(x, v) | Op::AddPerCol(x, v) => {
            let per_row = matches!(nodes[i].op, Op::AddPerRow(..));
            let (rows, cols) = val(*x).rows_cols();
            acc(nodes, grads, *x, |d| add_into(d, g));
            acc(nodes, grads, *v, |d| {
                for r in 0..rows {
                    for c in 0..cols {
                        let k = if per_row { r } else { c };
                        d[k] += g[r * cols + c];
                    }
                }
            });
        }
        Op::MulPerRow(x, v) | Op::MulPerCol(x, v) => {
            let per_row = matches!(nodes[i].op, Op::MulPerRow(..));
            let (rows, cols) = val(*x).rows_cols();
            let (xd, vd) = (val(*x).data(), val(*v).data());
            acc(nodes, grads, *x, |d| {
                for r in 0..rows {
                    for c in 0..cols {
                        let s = if per_row { vd[r] } else { vd[c] };
                        d[r * cols + c] += g[r * cols + c] * s;
                    }
                }
            });
            acc(nodes, grads, *v, |d| {
                for r in 0..rows {
                    for c in 0..cols {
                        let k = if per_row { r } else { c };
                        d[k] += g[r * cols + c] * xd[r * cols + c];
                    }
                }
            });
        }
        Op::MulScalarVar(x, s) => {
            let sv = val(*s).data()[0];
            let xd = val(*x).data();
            acc(nodes, grads, *x, |d| {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d += gv * sv;
                }
            });
            acc(nodes, grads, *s, |d| {
                d[0] += g.iter().zip(xd).map(|(&gv, &xv)| gv * xv).sum::<T>();
            });
        }
        Op::MatMul { a, la, b, lb } => {
            let (m, _) = la.dims();
            let (_, n) = lb.dims();
            let gl = MatRef::new(m, n);
            // C = op(A)·op(B): dop(A) = G·op(B)ᵀ, dop(B) = op(A)ᵀ·G.
            let bd = val(*b).data();
            let ad = val(*a).data();
            acc(nodes, grads, *a, |d| {
                if la.trans {
                    // dA = (G·op(B)ᵀ)ᵀ = op(B)·Gᵀ
                    gemm(T::one(), bd, *lb, g, gl.t(), T::one(), d);
                } else {
                    gemm(T::one(), g, gl, bd, lb.t(), T::one(), d);
                }
            });
            acc(nodes, grads, *b, |d| {
                if lb.trans {
                    // dB = (op(A)ᵀ·G)ᵀ = Gᵀ·op(A)
                    gemm(T::one(), g, gl.t(), ad, *la, T::one(), d);
                } else {
                    gemm(T::one(), ad, la.t(), g, gl, T::one(), d);
                }
            });
        }
        Op::Conv { x, w, b, geom, col } => {
            let oc = val(*w).shape()[0];
            let npos = geom.out_h() * geom.out_w();
            let pl = geom.patch_len();
            if let Some(bv) = b {
                acc(nodes, grads, *bv, |d| {
                    for (o, chunk) in g.chunks(npos).enumerate() {
                        d[o] += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            acc(nodes, grads, *w, |d| {
                let colref: &[T] = match col {
                    Some(c) => c,
                    None => val(*x).data(),
                };
                gemm(T::one(), g, MatRef::new(oc, npos), colref, MatRef::new(pl, npos).t(), T::one(), d);
            });
            acc(nodes, grads, *x, |d| {
                let wd = val(*w).data();
                if geom.is_pointwise() {
                    gemm(T::one(), wd, MatRef::new(oc, pl).t(), g, MatRef::new(oc, npos), T::one(), d);
                } else {
                    let mut dcol = vec![T::zero(); pl * npos];
                    gemm(T::one(), wd, MatRef::new(oc, pl).t(), g, MatRef::new(oc, npos), T::zero(), &mut dcol);
                    col2im(&dcol, geom, d);
                }
            });
        }
        Op::Unary(x, kind) => {
            let xd = val(*x).data();
            let yd = out.data();
            acc(nodes, grads, *x, |d| {
                for k in 0..d.len() {
                    let (xv, yv) = (xd[k], yd[k]);
                    let dy = match kind {
                        Unary::Silu => {
                            let s = T::one() / (T::one() + (-xv).exp());
                            s * (T::one() + xv * (T::one() - s))
                        }
                        Unary::Relu => {
                            if xv > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Exp => yv,
                        Unary::Ln => xv.recip(),
                        Unary::Sqrt => T::lit(0.5) / yv,
                        Unary::Square => T::lit(2.0) * xv,
                        Unary::Recip => -yv * yv,
                    };
                    d[k] += g[k] * dy;
                }
            });
        }
        Op::Sum(x) => acc(nodes, grads, *x, |d| {
            for v in d.iter_mut() {
                *v += g[0];
            }
        }),
        Op::SumCols(x) => {
            let (rows, cols) = val(*x).rows_cols();
            acc(nodes, grads, *x, |d| {
                for r in 0..rows {
                    for v in &mut d[r * cols..(r + 1) * cols] {
                        *v += g[r];
                    }
                }
            });
        }
        Op::SumRows(x) => {
            let (rows, cols) = val(*x).rows_cols();
            acc(nodes, grads, *x, |d| {
                for r in 0..rows {
                    for (v, &gv) in d[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                        *v += gv;
                    }
                }
            });
        }
        Op::SoftmaxRows(x) => {
            let (rows, cols) = out.rows_cols();
            let yd = out.data();
            acc(nodes, grads, *x, |d| {
                for r in 0..rows {
                    let y = &yd[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] += y[c] * (gr[c] - dot);
                    }
                }
            });
        }
        Op::Norm { x, gamma, beta, groups, rowwise, xhat, rstd } => {
            let cols = val(*x).rows_cols().1;
            let n = xhat.len();
            let gsize = n / groups;
            let gd = val(*gamma).data();
            let affine_of = |k: usize| if *rowwise { k % cols } else { k / cols };
            acc(nodes, grads, *beta, |d| {
                for k in 0..n {
                    d[affine_of(k)] += g[k];
                }
            });
            acc(nodes, grads, *gamma, |d| {
                for k in 0..n {
                    d[affine_of(k)] += g[k] * xhat[k];
                }
            });
            acc(nodes, grads, *x, |d| {
                let inv = T::one() / T::lit(gsize as f64);
                for grp in 0..*groups {
                    let range = grp * gsize..(grp + 1) * gsize;
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for k in range.clone() {
                        let dxh = g[k] * gd[affine_of(k)];
                        m1 += dxh;
                        m2 += dxh * xhat[k];
                    }
                    m1 *= inv;
                    m2 *= inv;
                    for k in range {
                        let dxh = g[k] * gd[affine_of(k)];
                        d[k] += rstd[grp] * (dxh - m1 - xhat[k] * m2);
                    }
                }
            });
        }
        Op::Gather(x, idx) => acc(nodes, grads, *x, |d| {
            for (&k, &gv) in idx.iter().zip(g) {
                d[k] += gv;
            }
        }),
        Op::ScatterAdd(x, idx) => acc(nodes, grads, *x, |d| {
            for (dv, &k) in d.iter_mut().zip(idx.iter()) {
                *dv += g[k];
            }
        }),
        Op::Concat { parts, outer, inners } => {
            let total: usize = inners.iter().sum();
            let mut offset = 0;
            for (&p, &inner) in parts.iter().zip(inners) {
                acc(nodes, grads, p, |d| {
                    for o in 0..*outer {
                        let src = &g[o * total + offset..o * total + offset + inner];
                        add_into(&mut d[o * inner..(o + 1) * inner], src);
                    }
                });
                offset += inner;
            }
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (d, &gv) in d.iter_mut().zip(g) {
        *d += gv;
    }
}

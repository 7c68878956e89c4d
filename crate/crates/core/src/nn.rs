//! Parameter storage and the handful of layers the networks are built from.

use std::ops::Index;
use std::sync::Arc;

use phdiff_autograd::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays in construction order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound { vars: self.values.iter().map(|v| g.leaf(v.clone(), trainable)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }

    /// SHA-256 over names, shapes and values; equal digests mean equal parameters.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replaces a value by name, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), String> {
        let id = self.find(name).ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.get(id).shape() != value.shape() {
            return Err(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.shape(),
                self.get(id).shape()
            ));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }
}

/// Graph leaves for one [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients after `g.backward`, zero-filled where nothing flowed.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    /// Matrix whose shorter side is orthonormal, times `gain`.
    pub fn orthogonal(&mut self, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
        let (n, m) = if rows <= cols { (rows, cols) } else { (cols, rows) };
        // n orthonormal vectors of length m via Gram-Schmidt.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
        while basis.len() < n {
            let mut v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut self.rng)).collect();
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    for (x, y) in v.iter_mut().zip(b) {
                        *x -= d * y;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        let mut out = vec![0.0; rows * cols];
        for (i, b) in basis.iter().enumerate() {
            for (j, &x) in b.iter().enumerate() {
                if rows <= cols {
                    out[i * cols + j] = x * gain;
                } else {
                    out[j * cols + i] = x * gain;
                }
            }
        }
        out
    }
}

/// Groups used by every group norm of `channels` width.
/// Up to 8 groups with at least 4 channels each where possible.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g) && channels / g >= 4).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `k×k` convolution with "same" padding, He-scaled normal weights.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = ps.push(format!("{name}.w"), init.normal(&[cout, cin, k, k], std));
        let b = ps.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad: k / 2 }
    }

    /// Same geometry with all-zero weights and bias.
    pub fn zeroed<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let w = ps.push(format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]));
        let b = ps.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride: 1, pad: k / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = ps.push(format!("{name}.w"), init.normal(&[dout, din], (1.0 / din as f64).sqrt()));
        let b = ps.push(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    pub fn zeroed<T: Scalar>(ps: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Self {
        let w = ps.push(format!("{name}.w"), Tensor::zeros(&[dout, din]));
        let b = ps.push(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    /// `(N, din)` → `(N, dout)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let y = g.matmul_t(x, false, p[self.w], true);
        g.add_per_col(y, p[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = ps.push(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = ps.push(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups: norm_groups(channels) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.group_norm(x, self.groups, p[self.gamma], p[self.beta], T::lit(1e-5))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = ps.push(format!("{name}.gamma"), Tensor::full(&[dim], T::one()));
        let beta = ps.push(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.layer_norm_rows(x, p[self.gamma], p[self.beta], T::lit(1e-5))
    }
}

/// Pre-activation residual block: `skip(x) + conv2(silu(norm2(conv1(silu(norm1(x)))) + temb))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: Option<usize>,
    ) -> Self {
        let norm1 = GroupNorm::new(ps, &format!("{name}.norm1"), cin);
        let conv1 = Conv2d::new(ps, init, &format!("{name}.conv1"), cin, cout, 3, 1);
        let temb = temb_dim.map(|d| Linear::new(ps, init, &format!("{name}.temb"), d, cout));
        let norm2 = GroupNorm::new(ps, &format!("{name}.norm2"), cout);
        let conv2 = Conv2d::new(ps, init, &format!("{name}.conv2"), cout, cout, 3, 1);
        // Damp the residual branch so deep stacks start near identity.
        let w = ps.get_mut(conv2.w);
        for v in w.data_mut() {
            *v *= T::lit(0.2);
        }
        let skip = (cin != cout).then(|| Conv2d::new(ps, init, &format!("{name}.skip"), cin, cout, 1, 1));
        Self { norm1, conv1, temb, norm2, conv2, skip }
    }

    /// `temb` is the shared `(1, temb_dim)` time embedding, if the block takes one.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, temb: Option<Var>) -> Var {
        let h = self.norm1.forward(g, p, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h);
        let mut h = self.norm2.forward(g, p, h);
        // Added after the norm; a per-channel shift before it would be normalized away.
        if let (Some(lin), Some(t)) = (&self.temb, temb) {
            let t = g.silu(t);
            let t = lin.forward(g, p, t);
            let c = g.shape(t)[1];
            let t = g.reshape(t, &[c]);
            h = g.add_per_row(h, t);
        }
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(g, p, x),
            None => x,
        };
        g.add(s, h)
    }
}

fn column_block(rows: usize, cols: usize, start: usize, width: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(rows * width);
    for r in 0..rows {
        idx.extend((start..start + width).map(|c| r * cols + c));
    }
    Arc::new(idx)
}

/// `(C, H, W)` → `(H·W, C)` token matrix index map, and its inverse.
pub fn tokens_index(c: usize, hw: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(c * hw);
    for p in 0..hw {
        idx.extend((0..c).map(|ch| ch * hw + p));
    }
    Arc::new(idx)
}

pub fn map_index(c: usize, hw: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(c * hw);
    for ch in 0..c {
        idx.extend((0..hw).map(|p| p * c + ch));
    }
    Arc::new(idx)
}

/// Multi-head scaled dot-product attention without positional terms.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "attention: {heads} heads do not divide width {dim}");
        Self {
            q: Linear::new(ps, init, &format!("{name}.q"), dim, dim),
            k: Linear::new(ps, init, &format!("{name}.k"), dim, dim),
            v: Linear::new(ps, init, &format!("{name}.v"), dim, dim),
            o: Linear::new(ps, init, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn query_weight(&self) -> ParamId {
        self.q.w
    }

    /// `queries (Nq, C)` attend over `keys_values (Nk, C)`. Returns the
    /// output tokens and one `(Nq, Nk)` probability matrix per head.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        queries: Var,
        keys_values: Var,
    ) -> (Var, Vec<Var>) {
        let nq = g.shape(queries)[0];
        let nk = g.shape(keys_values)[0];
        let q = self.q.forward(g, p, queries);
        let k = self.k.forward(g, p, keys_values);
        let v = self.v.forward(g, p, keys_values);
        let hd = self.dim / self.heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let qi = column_block(nq, self.dim, h * hd, hd);
                let ki = column_block(nk, self.dim, h * hd, hd);
                (g.gather(q, qi, &[nq, hd]), g.gather(k, ki.clone(), &[nk, hd]), g.gather(v, ki, &[nk, hd]))
            };
            let s = g.matmul_t(qh, false, kh, true);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
            probs.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1) };
        (self.o.forward(g, p, cat), probs)
    }
}

/// Spatial self-attention over a `(C, H, W)` map with a residual connection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    norm: GroupNorm,
    attn: MultiHeadAttention,
}

impl SelfAttention {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, init: &mut Init, name: &str, channels: usize, heads: usize) -> Self {
        let norm = GroupNorm::new(ps, &format!("{name}.norm"), channels);
        let attn = MultiHeadAttention::new(ps, init, &format!("{name}.attn"), channels, heads);
        Self { norm, attn }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let h = self.norm.forward(g, p, x);
        let tokens = g.gather(h, tokens_index(c, hw), &[hw, c]);
        let (out, _) = self.attn.forward(g, p, tokens, tokens);
        let back = g.gather(out, map_index(c, hw), &shape);
        g.add(x, back)
    }
}

/// Post-norm transformer encoder layer whose attention reads a separate
/// key/value sequence: `y = LN1(q + MHA(q, kv)); out = LN2(y + FFN(y))`.
#[derive(Clone, Debug)]
pub struct CrossEncoderLayer {
    pub attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

impl CrossEncoderLayer {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(ps, init, &format!("{name}.attn"), dim, heads),
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            ff1: Linear::new(ps, init, &format!("{name}.ff1"), dim, dim * ff_mult),
            ff2: Linear::new(ps, init, &format!("{name}.ff2"), dim * ff_mult, dim),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, q: Var, kv: Var) -> (Var, Vec<Var>) {
        let (a, probs) = self.attn.forward(g, p, q, kv);
        let y = g.add(q, a);
        let y = self.ln1.forward(g, p, y);
        let f = self.ff1.forward(g, p, y);
        let f = g.silu(f);
        let f = self.ff2.forward(g, p, f);
        let z = g.add(y, f);
        (self.ln2.forward(g, p, z), probs)
    }
}

/// Nearest-neighbour ×2 upsampling index for a `(C, H, W)` map.
pub fn upsample2_index(c: usize, h: usize, w: usize) -> Arc<Vec<usize>> {
    let (oh, ow) = (h * 2, w * 2);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                idx.push((ch * h + y / 2) * w + x / 2);
            }
        }
    }
    Arc::new(idx)
}

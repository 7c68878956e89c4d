//! Training losses, the fixed feature backbone `φ`, masked statistics and
//! style embeddings.

use std::sync::Arc;

use phdiff_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::adapters::LEVELS;
use crate::def_fusion::{token_index, AblationFlags, GuidanceCtx, Mask, MaskPyramid};
use crate::diffusion::{forward_noise, predict_x0_var};
use crate::error::{Error, Result};
use crate::model::{ModelState, PreparedSample};
use crate::nn::{Bound, Init, Linear, ParamStore};

/// Seed of the fixed backbone. Metrics from different runs stay comparable
/// because every run regenerates the same weights.
pub const BACKBONE_SEED: u64 = 0x5eed_f00d;
/// Pyramid level feeding the style embedding (`φ³`).
pub const STYLE_LEVEL: usize = 2;
/// Pyramid level feeding the content loss (`φ⁴`).
pub const CONTENT_LEVEL: usize = 3;
const STD_EPS: f64 = 1e-5;

/// Four conv + ReLU stages at strides 1, 2, 4, 8 with frozen orthogonal weights.
#[derive(Clone, Debug)]
pub struct FeatureBackbone<T> {
    params: ParamStore<T>,
    widths: [usize; LEVELS],
    convs: Vec<crate::nn::Conv2d>,
}

impl<T: Scalar> FeatureBackbone<T> {
    pub fn new(widths: [usize; LEVELS], seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut init = Init::new(seed);
        let mut convs = Vec::with_capacity(LEVELS);
        let mut cin = 3;
        for (k, &cout) in widths.iter().enumerate() {
            let rows = init.orthogonal(cout, cin * 9, std::f64::consts::SQRT_2);
            let w = ps.push(
                format!("phi.{}.w", k + 1),
                Tensor::new(&[cout, cin, 3, 3], rows.into_iter().map(T::lit).collect()).expect("sized"),
            );
            let b = ps.push(format!("phi.{}.b", k + 1), Tensor::zeros(&[cout]));
            convs.push(crate::nn::Conv2d { w, b, stride: if k == 0 { 1 } else { 2 }, pad: 1 });
            cin = cout;
        }
        Self { params: ps, widths, convs }
    }

    pub fn standard() -> Self {
        Self::new([16, 32, 64, 128], BACKBONE_SEED)
    }

    pub fn widths(&self) -> [usize; LEVELS] {
        self.widths
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// `φ^1..4` of an image in `[0, 1]`, inside a graph.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Vec<Var>> {
        match g.shape(image) {
            [3, h, w] if h % 8 == 0 && w % 8 == 0 => {}
            s => return Err(Error::Shape(format!("backbone needs (3, H, W) with H, W divisible by 8, got {s:?}"))),
        }
        let x = g.scale(image, T::lit(2.0));
        let mut h = g.shift(x, -T::one());
        let mut out = Vec::with_capacity(LEVELS);
        for conv in &self.convs {
            h = conv.forward(g, p, h);
            h = g.relu(h);
            out.push(h);
        }
        Ok(out)
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.params.bind(g, false)
    }

    /// Feature pyramid outside any training graph.
    pub fn pyramid(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g);
        let x = g.constant(image.clone());
        let levels = self.forward(&mut g, &p, x)?;
        Ok(levels.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

fn check_feature_mask<T: Scalar>(f: &Tensor<T>, mask: &Mask) -> Result<(usize, usize, usize)> {
    let (c, h, w) = f.chw()?;
    if mask.dims() != (h, w) {
        return Err(Error::Shape(format!("mask {:?} does not match features {h}x{w}", mask.dims())));
    }
    Ok((c, h, w))
}

/// Per-channel mean and population standard deviation (`√(var + 1e-5)`)
/// over the mask's active positions.
pub fn masked_stats<T: Scalar>(f: &Tensor<T>, mask: &Mask) -> Result<(Vec<T>, Vec<T>)> {
    let (c, h, w) = check_feature_mask(f, mask)?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::DegenerateRegion("mask has no active position".into()));
    }
    let hw = h * w;
    let nf = T::lit(n as f64);
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    for ch in 0..c {
        let vals = || f.data()[ch * hw..(ch + 1) * hw].iter().zip(mask.bits()).filter(|(_, &b)| b).map(|(&v, _)| v);
        let m = vals().sum::<T>() / nf;
        let var = vals().map(|v| (v - m) * (v - m)).sum::<T>() / nf;
        mu.push(m);
        sigma.push((var + T::lit(STD_EPS)).sqrt());
    }
    Ok((mu, sigma))
}

/// Graph version of [`masked_stats`]; returns `(μ, σ)` as `(C)` vars.
pub fn masked_stats_var<T: Scalar>(g: &mut Graph<T>, f: Var, mask: &Mask) -> Result<(Var, Var)> {
    let shape = g.shape(f).to_vec();
    let (c, h, w) = match shape[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Shape(format!("features must be (C, H, W), got {shape:?}"))),
    };
    if mask.dims() != (h, w) {
        return Err(Error::Shape(format!("mask {:?} does not match features {h}x{w}", mask.dims())));
    }
    let pos = mask.positions(true);
    let n = pos.len();
    if n == 0 {
        return Err(Error::DegenerateRegion("mask has no active position".into()));
    }
    let x = if n == h * w {
        g.reshape(f, &[c, n])
    } else {
        // Token index is (N, C); transpose it into (C, N).
        let tok = token_index(c, w, h * w, &pos);
        let idx: Vec<usize> = (0..c).flat_map(|ch| (0..n).map(move |i| (i, ch))).map(|(i, ch)| tok[i * c + ch]).collect();
        g.gather(f, Arc::new(idx), &[c, n])
    };
    let inv_n = T::one() / T::lit(n as f64);
    let s = g.sum_cols(x);
    let mu = g.scale(s, inv_n);
    let neg = g.scale(mu, -T::one());
    let centered = g.add_per_row(x, neg);
    let sq = g.square(centered);
    let ss = g.sum_cols(sq);
    let var = g.scale(ss, inv_n);
    let var = g.shift(var, T::lit(STD_EPS));
    Ok((mu, g.sqrt(var)))
}

fn mean_sq_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / T::lit(a.len().max(1) as f64)
}

/// AdaIN statistic gap between the masked harmonized pyramid and the full
/// background pyramid. Levels whose mask is empty are skipped; per level the
/// squared gaps are averaged over channels.
pub fn adain_from_features<T: Scalar>(harmonized: &[Tensor<T>], background: &[Tensor<T>], masks: &[Mask]) -> Result<T> {
    if harmonized.len() != background.len() || harmonized.len() != masks.len() {
        return Err(Error::Shape("feature pyramids and masks differ in level count".into()));
    }
    let mut total = T::zero();
    let mut used = 0;
    for ((h, b), m) in harmonized.iter().zip(background).zip(masks) {
        check_feature_mask(h, m)?;
        if m.count() == 0 {
            continue;
        }
        let (mh, sh) = masked_stats(h, m)?;
        let (_, bh, bw) = b.chw()?;
        let (mb, sb) = masked_stats(b, &Mask::full(bh, bw, true))?;
        if mh.len() != mb.len() {
            return Err(Error::Shape("channel counts differ between pyramids".into()));
        }
        total += mean_sq_diff(&mh, &mb) + mean_sq_diff(&sh, &sb);
        used += 1;
    }
    if used == 0 {
        return Err(Error::DegenerateRegion("foreground mask is empty at every level".into()));
    }
    Ok(total)
}

/// Background statistics of every level, full-image.
pub fn global_stats<T: Scalar>(features: &[Tensor<T>]) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    features
        .iter()
        .map(|f| {
            let (c, h, w) = f.chw()?;
            let (m, s) = masked_stats(f, &Mask::full(h, w, true))?;
            Ok((Tensor::new(&[c], m)?, Tensor::new(&[c], s)?))
        })
        .collect()
}

/// Graph-level AdaIN term against precomputed background statistics.
pub fn adain_var<T: Scalar>(g: &mut Graph<T>, harmonized: &[Var], masks: &MaskPyramid, bg_stats: &[(Tensor<T>, Tensor<T>)]) -> Result<Var> {
    let mut terms = Vec::new();
    for ((&f, m), (mb, sb)) in harmonized.iter().zip(&masks.masks).zip(bg_stats) {
        if m.count() == 0 {
            continue;
        }
        let (mu, sigma) = masked_stats_var(g, f, m)?;
        for (v, target) in [(mu, mb), (sigma, sb)] {
            let t = g.constant(target.scale(-T::one()));
            let d = g.add(v, t);
            let sq = g.square(d);
            terms.push(g.mean(sq));
        }
    }
    if terms.is_empty() {
        return Err(Error::DegenerateRegion("foreground mask is empty at every level".into()));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(total)
}

/// Image-level AdaIN loss: `harmonized` is masked by `mask`, `background` is
/// read whole.
pub fn adain_loss<T: Scalar>(harmonized: &Tensor<T>, background: &Tensor<T>, mask: &Mask, phi: &FeatureBackbone<T>) -> Result<T> {
    harmonized.expect_same_shape(background)?;
    let (_, h, w) = harmonized.chw()?;
    let masks = MaskPyramid::build(mask, h, w)?;
    adain_from_features(&phi.pyramid(harmonized)?, &phi.pyramid(background)?, &masks.masks)
}

/// Trainable linear projection of pooled `φ³` features.
#[derive(Clone, Debug)]
pub struct ProjectionHead<T> {
    params: ParamStore<T>,
    lin: Linear,
    input_dim: usize,
    dim: usize,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn new(input_dim: usize, dim: usize, seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut init = Init::new(seed);
        let lin = Linear::new(&mut ps, &mut init, "head.proj", input_dim, dim);
        Self { params: ps, lin, input_dim, dim }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// `(1, C3)` pooled features → unit `(1, dim)` embedding.
    pub fn embed_var(&self, g: &mut Graph<T>, p: &Bound, pooled: Var) -> Var {
        let v = self.lin.forward(g, p, pooled);
        let sq = g.square(v);
        let s = g.sum(sq);
        let s = g.shift(s, T::lit(1e-12));
        let n = g.sqrt(s);
        let inv = g.recip(n);
        g.mul_scalar_var(v, inv)
    }
}

/// Spatial average of `φ³` over the mask (or everywhere), as `(1, C)`.
pub fn masked_pool_var<T: Scalar>(g: &mut Graph<T>, f: Var, mask: Option<&Mask>) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    let full;
    let m = match mask {
        Some(m) => m,
        None => {
            full = Mask::full(shape[1], shape[2], true);
            &full
        }
    };
    let (mu, _) = masked_stats_var(g, f, m)?;
    Ok(g.reshape(mu, &[1, shape[0]]))
}

pub fn masked_pool<T: Scalar>(f: &Tensor<T>, mask: Option<&Mask>) -> Result<Tensor<T>> {
    let (c, h, w) = f.chw()?;
    let full = Mask::full(h, w, true);
    let (mu, _) = masked_stats(f, mask.unwrap_or(&full))?;
    Ok(Tensor::new(&[1, c], mu)?)
}

/// Unit-norm style vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding<T> {
    pub f: Vec<T>,
}

impl<T: Scalar> StyleEmbedding<T> {
    pub fn dot(&self, other: &Self) -> T {
        self.f.iter().zip(&other.f).map(|(&a, &b)| a * b).sum()
    }
}

/// `φ³` of the image, masked pooling (mask at full image resolution),
/// projection and L2 normalization.
pub fn style_embed<T: Scalar>(image: &Tensor<T>, mask: Option<&Mask>, phi: &FeatureBackbone<T>, head: &ProjectionHead<T>) -> Result<StyleEmbedding<T>> {
    let (_, h, w) = image.chw()?;
    let levels = phi.pyramid(image)?;
    let f3 = &levels[STYLE_LEVEL];
    let m3 = match mask {
        Some(m) => Some(crate::def_fusion::downsample_mask(m, h >> STYLE_LEVEL, w >> STYLE_LEVEL)?),
        None => None,
    };
    if matches!(&m3, Some(m) if m.count() == 0) {
        return Err(Error::DegenerateRegion("mask is empty at the style level".into()));
    }
    let pooled = masked_pool(f3, m3.as_ref())?;
    let mut g = Graph::inference();
    let p = head.params().bind(&mut g, false);
    let x = g.constant(pooled);
    let e = head.embed_var(&mut g, &p, x);
    Ok(StyleEmbedding { f: g.value(e).data().to_vec() })
}

fn check_eta(eta: f64) -> Result<()> {
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::Parameter(format!("temperature must be positive, got {eta}")));
    }
    Ok(())
}

/// `−log(e^{q·p/η} / (e^{q·p/η} + Σ e^{q·n/η}))`.
pub fn contrastive_loss<T: Scalar>(q: &StyleEmbedding<T>, pos: &StyleEmbedding<T>, negs: &[StyleEmbedding<T>], eta: f64) -> Result<T> {
    check_eta(eta)?;
    if negs.is_empty() {
        return Err(Error::Parameter("contrastive loss needs at least one negative".into()));
    }
    let inv = T::lit(1.0 / eta);
    let s: Vec<T> = std::iter::once(q.dot(pos)).chain(negs.iter().map(|n| q.dot(n))).map(|v| v * inv).collect();
    let m = s.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = m + s.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    Ok(lse - s[0])
}

/// Graph version over `(1, D)` embeddings.
pub fn contrastive_var<T: Scalar>(g: &mut Graph<T>, q: Var, pos: Var, negs: &[Var], eta: f64) -> Result<Var> {
    check_eta(eta)?;
    if negs.is_empty() {
        return Err(Error::Parameter("contrastive loss needs at least one negative".into()));
    }
    let mut keys = vec![pos];
    keys.extend_from_slice(negs);
    let k = g.concat(&keys, 0);
    let s = g.matmul_t(q, false, k, true);
    let s = g.scale(s, T::lit(1.0 / eta));
    let prob = g.softmax_rows(s);
    let first = g.gather(prob, Arc::new(vec![0]), &[1]);
    let l = g.ln(first);
    Ok(g.scale(l, -T::one()))
}

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.expect_same_shape(b)?;
    Ok(mean_sq_diff(a.data(), b.data()))
}

/// Mean squared `φ⁴` difference.
pub fn content_loss<T: Scalar>(harmonized: &Tensor<T>, composite: &Tensor<T>, phi: &FeatureBackbone<T>) -> Result<T> {
    harmonized.expect_same_shape(composite)?;
    let a = phi.pyramid(harmonized)?;
    let b = phi.pyramid(composite)?;
    mse(&a[CONTENT_LEVEL], &b[CONTENT_LEVEL])
}

/// Mean squared error between true and predicted noise.
pub fn noise_loss<T: Scalar>(eps: &Tensor<T>, eps_pred: &Tensor<T>) -> Result<T> {
    eps.expect_same_shape(eps_pred).map_err(|e| Error::Shape(e.to_string()))?;
    mse(eps, eps_pred)
}

pub fn mse_var<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    g.mean(sq)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 60.0, lambda2: 5.0, eta: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("eta", self.eta)] {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which style/content terms enter the total (Table 2 rows V1, V2).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub adain: bool,
    pub contrastive: bool,
    pub content: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self { adain: true, contrastive: true, content: true }
    }
}

impl LossFlags {
    pub fn noise_only() -> Self {
        Self { adain: false, contrastive: false, content: false }
    }
}

/// `λ₁·l_ldm + l_adain + λ₂·l_cl + l_con`, rejecting non-finite parts.
pub fn total_loss(l_ldm: f64, l_adain: f64, l_cl: f64, l_con: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("ldm", l_ldm), ("adain", l_adain), ("cl", l_cl), ("con", l_con)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name.into() });
        }
    }
    Ok(w.lambda1 * l_ldm + l_adain + w.lambda2 * l_cl + l_con)
}

/// Component values of one training forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ldm: f64,
    pub l_adain: f64,
    pub l_cl: f64,
    pub l_con: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn log_line(&self, step: usize, t: usize) -> String {
        format!(
            "step={step} t={t} l_ldm={:.6} l_adain={:.6} l_cl={:.6} l_con={:.6} total={:.6}",
            self.l_ldm, self.l_adain, self.l_cl, self.l_con, self.total
        )
    }
}

/// One differentiable training pass: the graph, the weighted total, and the
/// leaves of the trainable partition (adapter, fusion, head).
pub struct TrainingPass<T: Scalar> {
    pub graph: Graph<T>,
    pub total: Var,
    pub adapter: Bound,
    pub def: Bound,
    pub head: Bound,
    pub breakdown: LossBreakdown,
}

impl<T: Scalar> TrainingPass<T> {
    /// Runs backward and returns gradients in partition order.
    pub fn gradients(mut self) -> Vec<Vec<Tensor<T>>> {
        self.graph.backward(self.total);
        vec![self.adapter.grads(&self.graph), self.def.grads(&self.graph), self.head.grads(&self.graph)]
    }
}

/// Guided noise prediction at step `t` with noise `eps`, the noise loss, and
/// the style and content losses on the image decoded from `ẑ₀`.
///
/// `negatives` are pooled `φ³` vectors `(1, C3)` of other paintings. The
/// contrastive term is skipped when there are none or when the foreground
/// vanishes at the `φ³` stride.
#[allow(clippy::too_many_arguments)]
pub fn training_losses<T: Scalar>(
    state: &ModelState<T>,
    sample: &PreparedSample<T>,
    t: usize,
    eps: &Tensor<T>,
    negatives: &[Tensor<T>],
    weights: &LossWeights,
    flags: LossFlags,
    ablation: AblationFlags,
) -> Result<TrainingPass<T>> {
    weights.validate()?;
    state.schedule.check_step(t)?;
    let z_t = forward_noise(&sample.z0, t, eps, &state.schedule)?;
    let mut g = Graph::new();
    let pa = state.adapter.params().bind(&mut g, true);
    let pd = state.def.params().bind(&mut g, true);
    let ph = state.head.params().bind(&mut g, true);
    let pu = state.denoiser.params().bind(&mut g, false);

    let input = g.constant(sample.adapter_input.clone());
    let fc = state.adapter.forward(&mut g, &pa, input)?;
    let temb = state.denoiser.embed_time(&mut g, &pu, t)?;
    let z = g.constant(z_t);
    let fzt = state.denoiser.encoder(&mut g, &pu, z, temb)?;
    let ctx = GuidanceCtx { masks: &sample.latent_masks, flags: ablation, recorder: None, step: t };
    let guided = state.def.apply(&mut g, &pd, &fc, &fzt, ctx)?;
    let eps_pred = state.denoiser.decoder(&mut g, &pu, &guided, temb, z)?;
    let target = g.constant(eps.clone());
    let l_ldm = mse_var(&mut g, eps_pred, target);
    let mut total = g.scale(l_ldm, T::lit(weights.lambda1));
    let mut parts = [None; 3];

    if flags.adain || flags.contrastive || flags.content {
        let x0 = predict_x0_var(&mut g, z, eps_pred, t, &state.schedule)?;
        let image = state.codec.decode_var(&mut g, x0)?;
        let pphi = state.backbone.bind(&mut g);
        let feats = state.backbone.forward(&mut g, &pphi, image)?;
        if flags.adain {
            let l = adain_var(&mut g, &feats, &sample.image_masks, &sample.bg_stats)?;
            total = g.add(total, l);
            parts[0] = Some(l);
        }
        let style_mask = &sample.image_masks.masks[STYLE_LEVEL];
        if flags.contrastive && !negatives.is_empty() && style_mask.count() > 0 {
            let pooled = masked_pool_var(&mut g, feats[STYLE_LEVEL], Some(style_mask))?;
            let q = state.head.embed_var(&mut g, &ph, pooled);
            let pos = g.constant(sample.bg_pooled.clone());
            let pos = state.head.embed_var(&mut g, &ph, pos);
            let negs: Vec<Var> = negatives
                .iter()
                .map(|n| {
                    let v = g.constant(n.clone());
                    state.head.embed_var(&mut g, &ph, v)
                })
                .collect();
            let l = contrastive_var(&mut g, q, pos, &negs, weights.eta)?;
            let w = g.scale(l, T::lit(weights.lambda2));
            total = g.add(total, w);
            parts[1] = Some(l);
        }
        if flags.content {
            let c = g.constant(sample.content_target.clone());
            let l = mse_var(&mut g, feats[CONTENT_LEVEL], c);
            total = g.add(total, l);
            parts[2] = Some(l);
        }
    }

    let val = |v: Option<Var>| v.map_or(0.0, |v| g.item(v).as_f64());
    let breakdown = LossBreakdown {
        l_ldm: g.item(l_ldm).as_f64(),
        l_adain: val(parts[0]),
        l_cl: val(parts[1]),
        l_con: val(parts[2]),
        total: g.item(total).as_f64(),
    };
    total_loss(breakdown.l_ldm, breakdown.l_adain, breakdown.l_cl, breakdown.l_con, weights)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { component: "total".into() });
    }
    Ok(TrainingPass { graph: g, total, adapter: pa, def: pd, head: ph, breakdown })
}

//! Dual Encoder Fusion.
//!
//! Levels 1–2 add the adapter features to the denoiser features. Levels 3–4
//! gather foreground tokens of both maps, stylize each stream against its
//! own background tokens with a cross-attention encoder layer, fuse the two
//! streams with a fully-connected layer and fold the result back:
//!
//! `F̂ = F_zt + fold(FC(s_c ⊕ s_z)) + F_c ∘ (1 − M)`.

use std::collections::BTreeMap;
use std::sync::Arc;

use phdiff_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::adapters::{MultiScaleFeatures, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{Bound, CrossEncoderLayer, Init, Linear, ParamStore};

/// First 0-based level that goes through the transformer path.
pub const FIRST_DEF_LEVEL: usize = 2;
const HEADS: usize = 4;
const FF_MULT: usize = 2;

/// Binary map in raster order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Shape(format!("mask {h}x{w} needs {} entries, got {}", h * w, bits.len())));
        }
        Ok(Self { h, w, bits })
    }

    pub fn full(h: usize, w: usize, value: bool) -> Self {
        Self { h, w, bits: vec![value; h * w] }
    }

    /// From a `(H, W)` or `(1, H, W)` tensor whose entries are exactly 0 or 1.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(Error::Shape(format!("mask must be (H, W), got {s:?}"))),
        };
        let mut bits = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v == T::one() {
                bits.push(true);
            } else if v == T::zero() {
                bits.push(false);
            } else {
                return Err(Error::Validation(format!("mask value {v:?} is not binary")));
            }
        }
        Ok(Self { h, w, bits })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.h, self.w], |i| if self.bits[i] { T::one() } else { T::zero() })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.w + c]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn area_ratio(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    /// Raster-order positions equal to `value`.
    pub fn positions(&self, value: bool) -> Vec<(usize, usize)> {
        (0..self.bits.len())
            .filter(|&i| self.bits[i] == value)
            .map(|i| (i / self.w, i % self.w))
            .collect()
    }

    pub fn invert(&self) -> Self {
        Self { h: self.h, w: self.w, bits: self.bits.iter().map(|b| !b).collect() }
    }
}

/// Area-average pooling to `(h, w)` followed by a `≥ 0.5` threshold, so ties
/// become foreground.
pub fn downsample_mask(m: &Mask, h: usize, w: usize) -> Result<Mask> {
    if h == 0 || w == 0 || !m.h.is_multiple_of(h) || !m.w.is_multiple_of(w) {
        return Err(Error::Shape(format!("cannot pool a {}x{} mask to {h}x{w}", m.h, m.w)));
    }
    let (fy, fx) = (m.h / h, m.w / w);
    let mut bits = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut on = 0usize;
            for y in r * fy..(r + 1) * fy {
                for x in c * fx..(c + 1) * fx {
                    on += m.get(y, x) as usize;
                }
            }
            bits.push(2 * on >= fy * fx);
        }
    }
    Ok(Mask { h, w, bits })
}

/// One mask per pyramid level, each pooled directly from the full mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    pub masks: Vec<Mask>,
}

impl MaskPyramid {
    /// Level `k` has dims `(h >> k, w >> k)`.
    pub fn build(full: &Mask, h: usize, w: usize) -> Result<Self> {
        let masks = (0..LEVELS).map(|k| downsample_mask(full, h >> k, w >> k)).collect::<Result<_>>()?;
        Ok(Self { masks })
    }
}

/// Gathered channel vectors and where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq<T> {
    /// `(N, C)`.
    pub tokens: Tensor<T>,
    pub index_map: Vec<(usize, usize)>,
}

impl<T: Scalar> TokenSeq<T> {
    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_map.is_empty()
    }
}

/// Index into a `(C, H·W)` map for the tokens at `positions`, laid out `(N, C)`.
pub fn token_index(c: usize, w: usize, hw: usize, positions: &[(usize, usize)]) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(positions.len() * c);
    for &(r, col) in positions {
        let p = r * w + col;
        idx.extend((0..c).map(|ch| ch * hw + p));
    }
    Arc::new(idx)
}

fn check_mask_dims<T: Scalar>(f: &Tensor<T>, mask: &Mask) -> Result<(usize, usize, usize)> {
    let (c, h, w) = f.chw()?;
    if mask.dims() != (h, w) {
        return Err(Error::Shape(format!("mask {:?} does not match map {h}x{w}", mask.dims())));
    }
    Ok((c, h, w))
}

pub fn masked_flatten<T: Scalar>(f: &Tensor<T>, mask: &Mask) -> Result<(TokenSeq<T>, TokenSeq<T>)> {
    let (c, _, w) = check_mask_dims(f, mask)?;
    let hw = mask.bits.len();
    let take = |positions: Vec<(usize, usize)>| -> Result<TokenSeq<T>> {
        let d = f.data();
        let data = token_index(c, w, hw, &positions).iter().map(|&i| d[i]).collect();
        Ok(TokenSeq { tokens: Tensor::new(&[positions.len(), c], data)?, index_map: positions })
    };
    Ok((take(mask.positions(true))?, take(mask.positions(false))?))
}

pub fn fold<T: Scalar>(seq: &TokenSeq<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c) = match seq.tokens.shape() {
        [n, c] => (*n, *c),
        s => return Err(Error::Shape(format!("tokens must be (N, C), got {s:?}"))),
    };
    if n != seq.index_map.len() {
        return Err(Error::Shape(format!("{n} tokens but {} positions", seq.index_map.len())));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for (i, &(r, col)) in seq.index_map.iter().enumerate() {
        if r >= h || col >= w {
            return Err(Error::Index(format!("position ({r}, {col}) outside {h}x{w}")));
        }
        for ch in 0..c {
            out.set3(ch, r, col, seq.tokens.data()[i * c + ch]);
        }
    }
    Ok(out)
}

/// Table 2 switches for the transformer layers. Both off bypasses the
/// fusion path entirely (additive at every level).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub transformer_adaptive: bool,
    pub transformer_unet: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { transformer_adaptive: true, transformer_unet: true }
    }
}

impl AblationFlags {
    pub fn def_enabled(&self) -> bool {
        self.transformer_adaptive || self.transformer_unet
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderSide {
    Adaptive,
    Unet,
}

impl EncoderSide {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderSide::Adaptive => "adaptive",
            EncoderSide::Unet => "unet",
        }
    }
}

#[derive(Clone, Debug)]
struct AttentionRecord<T> {
    /// Head-averaged `(N_fg, N_bg)`.
    probs: Tensor<T>,
    bg: Vec<(usize, usize)>,
    dims: (usize, usize),
}

/// Per-call buffer of attention maps keyed by `(level, side, step)`; levels
/// are 1-based as in the pyramid naming.
#[derive(Clone, Debug, Default)]
pub struct AttentionRecorder<T> {
    enabled: bool,
    records: BTreeMap<(usize, EncoderSide, usize), AttentionRecord<T>>,
}

impl<T: Scalar> AttentionRecorder<T> {
    pub fn new(enabled: bool) -> Self {
        Self { enabled, records: BTreeMap::new() }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, EncoderSide, usize)> + '_ {
        self.records.keys().copied()
    }

    fn record(&mut self, key: (usize, EncoderSide, usize), probs: Tensor<T>, bg: Vec<(usize, usize)>, dims: (usize, usize)) {
        if self.enabled {
            self.records.insert(key, AttentionRecord { probs, bg, dims });
        }
    }

    /// Head-averaged `(N_fg, N_bg)` attention rows.
    pub fn rows(&self, level: usize, side: EncoderSide, step: usize) -> Result<&Tensor<T>> {
        Ok(&self.lookup(level, side, step)?.probs)
    }

    fn lookup(&self, level: usize, side: EncoderSide, step: usize) -> Result<&AttentionRecord<T>> {
        if !self.enabled {
            return Err(Error::State("attention recording was not enabled".into()));
        }
        self.records.get(&(level, side, step)).ok_or_else(|| {
            Error::State(format!("no attention recorded for level {level}, {} side, step {step}", side.as_str()))
        })
    }

    /// `(N_fg, out_h, out_w)`: each foreground query's attention scattered to
    /// the background positions it attends, nearest-upsampled.
    pub fn export_attention(&self, level: usize, side: EncoderSide, step: usize, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let rec = self.lookup(level, side, step)?;
        let (h, w) = rec.dims;
        if !out_h.is_multiple_of(h) || !out_w.is_multiple_of(w) {
            return Err(Error::Shape(format!("cannot upsample {h}x{w} attention to {out_h}x{out_w}")));
        }
        let (fy, fx) = (out_h / h, out_w / w);
        let (nq, nk) = rec.probs.rows_cols();
        let mut out = Tensor::zeros(&[nq, out_h, out_w]);
        for q in 0..nq {
            for (k, &(r, c)) in rec.bg.iter().enumerate().take(nk) {
                let v = rec.probs.data()[q * nk + k];
                for y in r * fy..(r + 1) * fy {
                    for x in c * fx..(c + 1) * fx {
                        out.set3(q, y, x, v);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct DefLevel {
    ta: CrossEncoderLayer,
    tu: CrossEncoderLayer,
    fc: Linear,
}

/// Transformer and fusion weights for levels 3–4.
#[derive(Clone, Debug)]
pub struct DefModule<T> {
    params: ParamStore<T>,
    widths: [usize; LEVELS],
    levels: Vec<DefLevel>,
}

/// Everything the graph-level fusion needs besides the weights.
pub struct GuidanceCtx<'a, T> {
    pub masks: &'a MaskPyramid,
    pub flags: AblationFlags,
    pub recorder: Option<&'a mut AttentionRecorder<T>>,
    pub step: usize,
}

impl<T: Scalar> DefModule<T> {
    /// The fusion FC starts at zero, so the module starts as `F_zt + F_c ∘ (1 − M)`
    /// on transformer levels, which the adapter's zero readout makes `F_zt`.
    pub fn new(widths: [usize; LEVELS], seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut init = Init::new(seed);
        let levels = (FIRST_DEF_LEVEL..LEVELS)
            .map(|k| {
                let name = format!("def.l{}", k + 1);
                let c = widths[k];
                DefLevel {
                    ta: CrossEncoderLayer::new(&mut ps, &mut init, &format!("{name}.ta"), c, HEADS, FF_MULT),
                    tu: CrossEncoderLayer::new(&mut ps, &mut init, &format!("{name}.tu"), c, HEADS, FF_MULT),
                    fc: Linear::zeroed(&mut ps, &format!("{name}.fc"), 2 * c, c),
                }
            })
            .collect();
        Self { params: ps, widths, levels }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn widths(&self) -> [usize; LEVELS] {
        self.widths
    }

    /// Transformer layer for a 0-based pyramid level.
    pub fn layer(&self, level: usize, side: EncoderSide) -> Option<&CrossEncoderLayer> {
        let l = self.levels.get(level.checked_sub(FIRST_DEF_LEVEL)?)?;
        Some(match side {
            EncoderSide::Adaptive => &l.ta,
            EncoderSide::Unet => &l.tu,
        })
    }

    pub fn fc(&self, level: usize) -> Option<&Linear> {
        Some(&self.levels.get(level.checked_sub(FIRST_DEF_LEVEL)?)?.fc)
    }

    /// Graph-level guidance over all four levels.
    pub fn apply(&self, g: &mut Graph<T>, p: &Bound, fc: &[Var], fzt: &[Var], mut ctx: GuidanceCtx<'_, T>) -> Result<Vec<Var>> {
        if fc.len() != LEVELS || fzt.len() != LEVELS || ctx.masks.masks.len() != LEVELS {
            return Err(Error::Shape(format!(
                "guidance needs {LEVELS} levels, got {}/{}/{}",
                fc.len(),
                fzt.len(),
                ctx.masks.masks.len()
            )));
        }
        let mut out = Vec::with_capacity(LEVELS);
        for k in 0..LEVELS {
            let (sc, sz) = (g.shape(fc[k]).to_vec(), g.shape(fzt[k]).to_vec());
            if sc != sz || sc.len() != 3 {
                return Err(Error::Shape(format!("level {}: adapter {sc:?} vs denoiser {sz:?}", k + 1)));
            }
            let mask = &ctx.masks.masks[k];
            if mask.dims() != (sc[1], sc[2]) {
                return Err(Error::Shape(format!("level {} mask {:?} vs map {sc:?}", k + 1, mask.dims())));
            }
            let fg = mask.count();
            let degenerate = fg == 0 || fg == mask.bits.len();
            if k < FIRST_DEF_LEVEL || !ctx.flags.def_enabled() || degenerate {
                out.push(g.add(fc[k], fzt[k]));
                continue;
            }
            let rec = ctx.recorder.as_deref_mut();
            out.push(self.fuse_level_var(g, p, k, fc[k], fzt[k], mask, ctx.flags, rec, ctx.step));
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn fuse_level_var(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        k: usize,
        fc: Var,
        fzt: Var,
        mask: &Mask,
        flags: AblationFlags,
        mut rec: Option<&mut AttentionRecorder<T>>,
        step: usize,
    ) -> Var {
        let shape = g.shape(fc).to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        let fg_pos = mask.positions(true);
        let bg_pos = mask.positions(false);
        let fg_idx = token_index(c, w, hw, &fg_pos);
        let bg_idx = token_index(c, w, hw, &bg_pos);
        let lvl = &self.levels[k - FIRST_DEF_LEVEL];
        let mut stream = |g: &mut Graph<T>, map: Var, on: bool, layer: &CrossEncoderLayer, side: EncoderSide| {
            let fg = g.gather(map, fg_idx.clone(), &[fg_pos.len(), c]);
            if !on {
                return fg;
            }
            let bg = g.gather(map, bg_idx.clone(), &[bg_pos.len(), c]);
            let (out, probs) = layer.forward(g, p, fg, bg);
            if let Some(r) = rec.as_deref_mut() {
                if r.is_enabled() {
                    r.record((k + 1, side, step), head_mean(g, &probs), bg_pos.clone(), (h, w));
                }
            }
            out
        };
        let s_c = stream(g, fc, flags.transformer_adaptive, &lvl.ta, EncoderSide::Adaptive);
        let s_z = stream(g, fzt, flags.transformer_unet, &lvl.tu, EncoderSide::Unet);
        let cat = g.concat(&[s_c, s_z], 1);
        let fused = lvl.fc.forward(g, p, cat);
        let folded = g.scatter_add(fused, fg_idx, &shape);
        let inv = Tensor::from_fn(&shape, |i| if mask.bits[i % hw] { T::zero() } else { T::one() });
        let inv = g.constant(inv);
        let bg_c = g.mul(fc, inv);
        let y = g.add(fzt, folded);
        g.add(y, bg_c)
    }
}

fn head_mean<T: Scalar>(g: &Graph<T>, probs: &[Var]) -> Tensor<T> {
    let mut acc = g.value(probs[0]).clone();
    for &p in &probs[1..] {
        acc = acc.add(g.value(p)).expect("heads share a shape");
    }
    acc.scale(T::one() / T::lit(probs.len() as f64))
}

/// One cross-attention encoder layer: foreground queries, background keys and values.
pub fn stylize<T: Scalar>(fg: &TokenSeq<T>, bg: &TokenSeq<T>, layer: &CrossEncoderLayer, params: &ParamStore<T>) -> Result<TokenSeq<T>> {
    Ok(stylize_with_attention(fg, bg, layer, params)?.0)
}

/// [`stylize`] plus the head-averaged `(N_fg, N_bg)` attention.
pub fn stylize_with_attention<T: Scalar>(
    fg: &TokenSeq<T>,
    bg: &TokenSeq<T>,
    layer: &CrossEncoderLayer,
    params: &ParamStore<T>,
) -> Result<(TokenSeq<T>, Tensor<T>)> {
    if bg.is_empty() || fg.is_empty() {
        return Err(Error::DegenerateRegion("stylize needs non-empty foreground and background".into()));
    }
    if fg.tokens.shape()[1] != bg.tokens.shape()[1] {
        return Err(Error::Shape("foreground and background token widths differ".into()));
    }
    let mut g = Graph::inference();
    let p = params.bind(&mut g, false);
    let q = g.constant(fg.tokens.clone());
    let kv = g.constant(bg.tokens.clone());
    let (out, probs) = layer.forward(&mut g, &p, q, kv);
    let attn = head_mean(&g, &probs);
    Ok((TokenSeq { tokens: g.value(out).clone(), index_map: fg.index_map.clone() }, attn))
}

/// `F_zt + fold(FC(sc ⊕ sz)) + F_c ∘ (1 − mask)`.
pub fn fuse_level<T: Scalar>(
    sc: &TokenSeq<T>,
    sz: &TokenSeq<T>,
    f_c: &Tensor<T>,
    f_zt: &Tensor<T>,
    mask: &Mask,
    fc: &Linear,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    if sc.index_map != sz.index_map {
        return Err(Error::Alignment("adaptive and U-Net token streams cover different positions".into()));
    }
    let (c, h, w) = check_mask_dims(f_c, mask)?;
    f_c.expect_same_shape(f_zt)?;
    let mut g = Graph::inference();
    let p = params.bind(&mut g, false);
    let a = g.constant(sc.tokens.clone());
    let b = g.constant(sz.tokens.clone());
    let cat = g.concat(&[a, b], 1);
    let fused = fc.forward(&mut g, &p, cat);
    let seq = TokenSeq { tokens: g.value(fused).clone(), index_map: sc.index_map.clone() };
    let folded = fold(&seq, h, w)?;
    let hw = h * w;
    let mut out = f_zt.add(&folded)?;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !mask.bits[i % hw] {
            *v += f_c.data()[i];
        }
    }
    debug_assert_eq!(out.len(), c * hw);
    Ok(out)
}

/// Tensor-level guidance: additive at levels 1–2, fusion at 3–4.
pub fn apply_guidance<T: Scalar>(
    fc: &MultiScaleFeatures<T>,
    fzt: &MultiScaleFeatures<T>,
    masks: &MaskPyramid,
    def: &DefModule<T>,
    flags: AblationFlags,
    recorder: Option<&mut AttentionRecorder<T>>,
    step: usize,
) -> Result<MultiScaleFeatures<T>> {
    let mut g = Graph::inference();
    let p = def.params().bind(&mut g, false);
    let a: Vec<Var> = fc.levels.iter().map(|l| g.constant(l.clone())).collect();
    let b: Vec<Var> = fzt.levels.iter().map(|l| g.constant(l.clone())).collect();
    let out = def.apply(&mut g, &p, &a, &b, GuidanceCtx { masks, flags, recorder, step })?;
    MultiScaleFeatures::new(out.into_iter().map(|v| g.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn mask(h: usize, w: usize, on: &[usize]) -> Mask {
        let mut bits = vec![false; h * w];
        for &i in on {
            bits[i] = true;
        }
        Mask::new(h, w, bits).unwrap()
    }

    fn randomize(def: &mut DefModule<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = def.params().ids().collect();
        for id in ids {
            if def.params().name(id).contains(".fc.") {
                for v in def.params_mut().get_mut(id).data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
    }

    fn pyramids(seed: u64, widths: [usize; 4], size: usize) -> (MultiScaleFeatures<f64>, MultiScaleFeatures<f64>) {
        let make = |s: u64| {
            MultiScaleFeatures::new((0..4).map(|k| rand_tensor(s + k as u64, &[widths[k], size >> k, size >> k])).collect())
                .unwrap()
        };
        (make(seed), make(seed + 100))
    }

    #[test]
    fn downsample_examples() {
        let ones = Mask::full(8, 8, true);
        let pyr = MaskPyramid::build(&ones, 8, 8).unwrap();
        assert!(pyr.masks.iter().all(|m| m.count() == m.bits().len()));
        let quad = mask(4, 4, &[0, 1, 4, 5]);
        let d = downsample_mask(&quad, 2, 2).unwrap();
        assert_eq!(d.bits(), &[true, false, false, false]);
        let tie = mask(2, 2, &[0, 3]);
        assert_eq!(downsample_mask(&tie, 1, 1).unwrap().bits(), &[true]);
        let three = mask(4, 4, &[0]);
        assert_eq!(downsample_mask(&three, 2, 2).unwrap().count(), 0);
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let t = Tensor::new(&[1, 2], vec![0.0, 0.5]).unwrap();
        assert!(matches!(Mask::from_tensor(&t), Err(Error::Validation(_))));
    }

    #[test]
    fn flatten_enumeration_and_partition() {
        let f = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = mask(2, 2, &[0, 3]);
        let (fg, bg) = masked_flatten(&f, &m).unwrap();
        assert_eq!(fg.tokens.data(), &[1.0, 4.0]);
        assert_eq!(bg.tokens.data(), &[2.0, 3.0]);
        assert_eq!(fg.index_map, vec![(0, 0), (1, 1)]);

        let f = rand_tensor(1, &[3, 4, 5]);
        let m = mask(4, 5, &[1, 2, 7, 13, 19]);
        let (fg, bg) = masked_flatten(&f, &m).unwrap();
        let back = fold(&fg, 4, 5).unwrap().add(&fold(&bg, 4, 5).unwrap()).unwrap();
        assert_eq!(back, f);
        let only_fg = fold(&fg, 4, 5).unwrap();
        for ch in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let want = if m.get(y, x) { f.at3(ch, y, x) } else { 0.0 };
                    assert_eq!(only_fg.at3(ch, y, x), want);
                }
            }
        }
        let (all, none) = masked_flatten(&f, &Mask::full(4, 5, true)).unwrap();
        assert_eq!(all.len(), 20);
        assert!(none.is_empty());
    }

    #[test]
    fn fold_edge_cases() {
        let empty = TokenSeq { tokens: Tensor::<f64>::zeros(&[0, 2]), index_map: vec![] };
        assert_eq!(fold(&empty, 2, 2).unwrap().max_abs(), 0.0);
        let one = TokenSeq { tokens: Tensor::new(&[1, 1], vec![7.0]).unwrap(), index_map: vec![(0, 0)] };
        assert_eq!(fold(&one, 2, 2).unwrap().data(), &[7.0, 0.0, 0.0, 0.0]);
        let bad = TokenSeq { tokens: Tensor::new(&[1, 1], vec![7.0]).unwrap(), index_map: vec![(2, 0)] };
        assert!(matches!(fold(&bad, 2, 2), Err(Error::Index(_))));
    }

    fn seq(seed: u64, n: usize, c: usize) -> TokenSeq<f64> {
        TokenSeq { tokens: rand_tensor(seed, &[n, c]), index_map: (0..n).map(|i| (0, i)).collect() }
    }

    #[test]
    fn single_background_token_gets_all_attention() {
        let def = DefModule::<f64>::new([8, 8, 8, 8], 2);
        let layer = def.layer(2, EncoderSide::Unet).unwrap();
        let (_, attn) = stylize_with_attention(&seq(1, 3, 8), &seq(2, 1, 8), layer, def.params()).unwrap();
        assert!(attn.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn background_permutation_invariance() {
        let def = DefModule::<f64>::new([8, 8, 8, 8], 3);
        let layer = def.layer(3, EncoderSide::Adaptive).unwrap();
        let fg = seq(4, 3, 8);
        let bg = seq(5, 5, 8);
        let order = [3usize, 0, 4, 2, 1];
        let mut perm = Vec::new();
        for &i in &order {
            perm.extend_from_slice(&bg.tokens.data()[i * 8..(i + 1) * 8]);
        }
        let bg2 = TokenSeq { tokens: Tensor::new(&[5, 8], perm).unwrap(), index_map: bg.index_map.clone() };
        let a = stylize(&fg, &bg, layer, def.params()).unwrap();
        let b = stylize(&fg, &bg2, layer, def.params()).unwrap();
        assert!(a.tokens.max_abs_diff(&b.tokens) < 1e-12);
        assert!(matches!(
            stylize(&fg, &seq(0, 0, 8), layer, def.params()),
            Err(Error::DegenerateRegion(_))
        ));
    }

    /// Plain loops over named weights, written without the graph.
    fn reference_layer(params: &ParamStore<f64>, name: &str, q: &[Vec<f64>], kv: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
        let get = |n: &str| params.get(params.find(&format!("{name}.{n}")).unwrap()).clone();
        let lin = |x: &[f64], wn: &str| {
            let w = get(&format!("{wn}.w"));
            let b = get(&format!("{wn}.b"));
            let (dout, din) = w.rows_cols();
            (0..dout).map(|o| b.data()[o] + (0..din).map(|i| w.data()[o * din + i] * x[i]).sum::<f64>()).collect::<Vec<f64>>()
        };
        let ln = |x: &[f64], nn: &str| {
            let gm = get(&format!("{nn}.gamma"));
            let bt = get(&format!("{nn}.beta"));
            let n = x.len() as f64;
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            x.iter().enumerate().map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * gm.data()[i] + bt.data()[i]).collect::<Vec<f64>>()
        };
        let c = q[0].len();
        let hd = c / heads;
        let ks: Vec<Vec<f64>> = kv.iter().map(|x| lin(x, "attn.k")).collect();
        let vs: Vec<Vec<f64>> = kv.iter().map(|x| lin(x, "attn.v")).collect();
        q.iter()
            .map(|x| {
                let qq = lin(x, "attn.q");
                let mut cat = vec![0.0; c];
                for h in 0..heads {
                    let r = h * hd..(h + 1) * hd;
                    let s: Vec<f64> = ks
                        .iter()
                        .map(|k| r.clone().map(|i| qq[i] * k[i]).sum::<f64>() / (hd as f64).sqrt())
                        .collect();
                    let m = s.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for i in r.clone() {
                        cat[i] = e.iter().zip(&vs).map(|(a, v)| a / z * v[i]).sum();
                    }
                }
                let a = lin(&cat, "attn.o");
                let y: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
                let y = ln(&y, "ln1");
                let f: Vec<f64> = lin(&y, "ff1").into_iter().map(|v| v / (1.0 + (-v).exp())).collect();
                let f = lin(&f, "ff2");
                let z: Vec<f64> = y.iter().zip(&f).map(|(p, q)| p + q).collect();
                ln(&z, "ln2")
            })
            .collect()
    }

    #[test]
    fn stylize_matches_reference_loops() {
        let def = DefModule::<f64>::new([8, 8, 8, 8], 7);
        let layer = def.layer(2, EncoderSide::Adaptive).unwrap();
        let fg = seq(8, 3, 8);
        let bg = seq(9, 5, 8);
        let got = stylize(&fg, &bg, layer, def.params()).unwrap();
        let rows = |t: &Tensor<f64>| t.data().chunks(8).map(|r| r.to_vec()).collect::<Vec<_>>();
        let want = reference_layer(def.params(), "def.l3.ta", &rows(&fg.tokens), &rows(&bg.tokens), 4);
        for (g, w) in rows(&got.tokens).iter().zip(&want) {
            for (a, b) in g.iter().zip(w) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_fc_and_background_identity() {
        let mut def = DefModule::<f64>::new([4, 4, 4, 4], 1);
        let fc = def.fc(2).unwrap().clone();
        let f_c = rand_tensor(1, &[4, 2, 2]);
        let f_z = rand_tensor(2, &[4, 2, 2]);
        let m = mask(2, 2, &[1]);
        let (sc, _) = masked_flatten(&f_c, &m).unwrap();
        let (sz, _) = masked_flatten(&f_z, &m).unwrap();
        let out = fuse_level(&sc, &sz, &f_c, &f_z, &m, &fc, def.params()).unwrap();
        for i in 0..16 {
            let want = if i % 4 == 1 { f_z.data()[i] } else { f_z.data()[i] + f_c.data()[i] };
            assert_eq!(out.data()[i], want);
        }
        randomize(&mut def, 3);
        let out = fuse_level(&sc, &sz, &f_c, &f_z, &m, &fc, def.params()).unwrap();
        for i in (0..16).filter(|i| i % 4 != 1) {
            assert_eq!(out.data()[i] - f_z.data()[i], f_c.data()[i]);
        }
        let shifted = TokenSeq { tokens: sz.tokens.clone(), index_map: vec![(0, 0)] };
        assert!(matches!(fuse_level(&sc, &shifted, &f_c, &f_z, &m, &fc, def.params()), Err(Error::Alignment(_))));
    }

    #[test]
    fn hand_set_fc_on_two_by_two() {
        // One channel, foreground at (0,0) and (1,1); FC(x) = 2·a − b + 0.5.
        let mut ps = ParamStore::new();
        let fc = Linear::zeroed(&mut ps, "fc", 2, 1);
        ps.set("fc.w", Tensor::new(&[1, 2], vec![2.0, -1.0]).unwrap()).unwrap();
        ps.set("fc.b", Tensor::new(&[1], vec![0.5]).unwrap()).unwrap();
        let f_c = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f_z = Tensor::new(&[1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let m = mask(2, 2, &[0, 3]);
        let (sc, _) = masked_flatten(&f_c, &m).unwrap();
        let (sz, _) = masked_flatten(&f_z, &m).unwrap();
        let out = fuse_level(&sc, &sz, &f_c, &f_z, &m, &fc, &ps).unwrap();
        assert_eq!(out.data(), &[10.0 + (2.0 - 10.0 + 0.5), 22.0, 33.0, 40.0 + (8.0 - 40.0 + 0.5)]);
    }

    #[test]
    fn guidance_background_identity_and_shapes() {
        let widths = [4, 8, 8, 8];
        let mut def = DefModule::<f64>::new(widths, 4);
        randomize(&mut def, 5);
        let (fc, fz) = pyramids(10, widths, 16);
        let full = Mask::new(16, 16, (0..256).map(|i| (i / 16) < 8 && (i % 16) < 8).collect()).unwrap();
        let masks = MaskPyramid::build(&full, 16, 16).unwrap();
        let out = apply_guidance(&fc, &fz, &masks, &def, AblationFlags::default(), None, 0).unwrap();
        assert_eq!(out.shapes(), fz.shapes());
        for k in 0..4 {
            let (c, h, w) = out.levels[k].chw().unwrap();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sum = fz.levels[k].at3(ch, y, x) + fc.levels[k].at3(ch, y, x);
                        if k < 2 || !masks.masks[k].get(y, x) {
                            assert_eq!(out.levels[k].at3(ch, y, x), sum);
                        } else {
                            assert_ne!(out.levels[k].at3(ch, y, x), sum);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn all_flags_off_is_additive_everywhere() {
        let widths = [4, 8, 8, 8];
        let mut def = DefModule::<f64>::new(widths, 4);
        randomize(&mut def, 6);
        let (fc, fz) = pyramids(20, widths, 8);
        let full = Mask::new(8, 8, (0..64).map(|i| i % 3 == 0).collect()).unwrap();
        let masks = MaskPyramid::build(&full, 8, 8).unwrap();
        let off = AblationFlags { transformer_adaptive: false, transformer_unet: false };
        let out = apply_guidance(&fc, &fz, &masks, &def, off, None, 0).unwrap();
        for k in 0..4 {
            assert_eq!(out.levels[k], fc.levels[k].add(&fz.levels[k]).unwrap());
        }
    }

    #[test]
    fn empty_foreground_level_falls_back() {
        let widths = [4, 8, 8, 8];
        let mut def = DefModule::<f64>::new(widths, 4);
        randomize(&mut def, 7);
        let (fc, fz) = pyramids(30, widths, 16);
        // A 4x4 object: present at levels 1-3, gone at level 4 (2x2).
        let full = Mask::new(16, 16, (0..256).map(|i| (i / 16) < 4 && (i % 16) < 4).collect()).unwrap();
        let masks = MaskPyramid::build(&full, 16, 16).unwrap();
        assert_eq!(masks.masks[3].count(), 0);
        assert!(masks.masks[2].count() > 0);
        let mut rec = AttentionRecorder::new(true);
        let out = apply_guidance(&fc, &fz, &masks, &def, AblationFlags::default(), Some(&mut rec), 0).unwrap();
        assert_eq!(out.levels[3], fc.levels[3].add(&fz.levels[3]).unwrap());
        assert_ne!(out.levels[2], fc.levels[2].add(&fz.levels[2]).unwrap());
        assert!(rec.rows(3, EncoderSide::Unet, 0).is_ok());
        assert!(matches!(rec.rows(4, EncoderSide::Unet, 0), Err(Error::State(_))));
    }

    #[test]
    fn attention_export() {
        let widths = [4, 8, 8, 8];
        let def = DefModule::<f64>::new(widths, 8);
        let (fc, fz) = pyramids(40, widths, 8);
        // Level 3 is 2x2: background is the single cell (1, 1).
        let full = Mask::new(8, 8, (0..64).map(|i| !((i / 8) >= 4 && (i % 8) >= 4)).collect()).unwrap();
        let masks = MaskPyramid::build(&full, 8, 8).unwrap();
        assert_eq!(masks.masks[2].count(), 3);
        let mut rec = AttentionRecorder::new(true);
        apply_guidance(&fc, &fz, &masks, &def, AblationFlags::default(), Some(&mut rec), 5).unwrap();
        let map = rec.export_attention(3, EncoderSide::Adaptive, 5, 8, 8).unwrap();
        assert_eq!(map.shape(), &[3, 8, 8]);
        for q in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let want = if y >= 4 && x >= 4 { 1.0 } else { 0.0 };
                    assert_eq!(map.at3(q, y, x), want);
                }
            }
        }
        let off = AttentionRecorder::<f64>::new(false);
        assert!(matches!(off.export_attention(3, EncoderSide::Adaptive, 5, 8, 8), Err(Error::State(_))));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let widths = [4, 8, 8, 8];
        let def = DefModule::<f64>::new(widths, 9);
        let (fc, fz) = pyramids(50, widths, 16);
        let full = Mask::new(16, 16, (0..256).map(|i| (i / 16) >= 4 && (i / 16) < 12 && (i % 16) < 8).collect()).unwrap();
        let masks = MaskPyramid::build(&full, 16, 16).unwrap();
        let mut rec = AttentionRecorder::new(true);
        apply_guidance(&fc, &fz, &masks, &def, AblationFlags::default(), Some(&mut rec), 0).unwrap();
        for key in rec.keys().collect::<Vec<_>>() {
            let rows = rec.rows(key.0, key.1, key.2).unwrap();
            let (n, k) = rows.rows_cols();
            for r in 0..n {
                let s: f64 = rows.data()[r * k..(r + 1) * k].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn query_weight_gradient_matches_finite_difference() {
        let widths = [4, 8, 8, 8];
        let mut def = DefModule::<f64>::new(widths, 10);
        randomize(&mut def, 11);
        let (fc, fz) = pyramids(60, widths, 16);
        let full = Mask::new(16, 16, (0..256).map(|i| (i / 16) < 8 && (i % 16) >= 4 && (i % 16) < 12).collect()).unwrap();
        let masks = MaskPyramid::build(&full, 16, 16).unwrap();
        let wid = def.layer(2, EncoderSide::Adaptive).unwrap().attn.query_weight();
        let readout = |d: &DefModule<f64>| {
            let out = apply_guidance(&fc, &fz, &masks, d, AblationFlags::default(), None, 0).unwrap();
            out.levels[2].data().iter().enumerate().map(|(i, v)| v * ((i % 7) as f64 - 3.0)).sum::<f64>()
        };
        let mut g = Graph::new();
        let p = def.params().bind(&mut g, true);
        let a: Vec<Var> = fc.levels.iter().map(|l| g.constant(l.clone())).collect();
        let b: Vec<Var> = fz.levels.iter().map(|l| g.constant(l.clone())).collect();
        let out = def
            .apply(&mut g, &p, &a, &b, GuidanceCtx { masks: &masks, flags: AblationFlags::default(), recorder: None, step: 0 })
            .unwrap();
        let wts = Tensor::from_fn(g.shape(out[2]), |i| (i % 7) as f64 - 3.0);
        let wv = g.constant(wts);
        let prod = g.mul(out[2], wv);
        let s = g.sum(prod);
        g.backward(s);
        let grad = g.grad(p[wid]).unwrap();
        for k in [0usize, 9, 30, 63] {
            let h = 1e-5;
            let mut plus = def.clone();
            plus.params_mut().get_mut(wid).data_mut()[k] += h;
            let mut minus = def.clone();
            minus.params_mut().get_mut(wid).data_mut()[k] -= h;
            let numeric = (readout(&plus) - readout(&minus)) / (2.0 * h);
            let a = grad.data()[k];
            assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < 1e-4, "{a} vs {numeric}");
        }
    }
}

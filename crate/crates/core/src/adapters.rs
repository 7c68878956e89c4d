//! The adaptive encoder: pixel-unshuffle, four extraction modules (EM) and
//! three downsample blocks (DS) producing the composite pyramid `F_c^1..4`.

use std::sync::Arc;

use phdiff_autograd::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, ParamStore, ResBlock};

/// Number of pyramid levels shared by the adapter, denoiser and DEF.
pub const LEVELS: usize = 4;

/// Gather index for space-to-depth: output channel `c·f² + dy·f + dx` at
/// `(y, x)` reads input `(c, y·f + dy, x·f + dx)`.
pub fn pixel_unshuffle_index(c: usize, h: usize, w: usize, f: usize) -> Arc<Vec<usize>> {
    let (oh, ow) = (h / f, w / f);
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                for y in 0..oh {
                    for x in 0..ow {
                        idx.push((ch * h + y * f + dy) * w + x * f + dx);
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

/// Inverse of [`pixel_unshuffle_index`]: gathers a `(c, h, w)` map from a
/// `(c·f², h/f, w/f)` one.
pub fn pixel_shuffle_index(c: usize, h: usize, w: usize, f: usize) -> Arc<Vec<usize>> {
    let (ih, iw) = (h / f, w / f);
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sub = ch * f * f + (y % f) * f + x % f;
                idx.push((sub * ih + y / f) * iw + x / f);
            }
        }
    }
    Arc::new(idx)
}

fn divisible(h: usize, w: usize, f: usize) -> Result<()> {
    if f == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by factor {f}")));
    }
    Ok(())
}

pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    divisible(h, w, factor)?;
    let d = x.data();
    let data = pixel_unshuffle_index(c, h, w, factor).iter().map(|&i| d[i]).collect();
    Ok(Tensor::new(&[c * factor * factor, h / factor, w / factor], data)?)
}

pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (cf, h, w) = x.chw()?;
    if factor == 0 || cf % (factor * factor) != 0 {
        return Err(Error::Shape(format!("{cf} channels not divisible by {factor}²")));
    }
    let c = cf / (factor * factor);
    let d = x.data();
    let data = pixel_shuffle_index(c, h * factor, w * factor, factor).iter().map(|&i| d[i]).collect();
    Ok(Tensor::new(&[c, h * factor, w * factor], data)?)
}

/// Four feature maps at relative scales 1, ½, ¼, ⅛.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> MultiScaleFeatures<T> {
    pub fn new(levels: Vec<Tensor<T>>) -> Result<Self> {
        if levels.len() != LEVELS {
            return Err(Error::Shape(format!("expected {LEVELS} levels, got {}", levels.len())));
        }
        for pair in levels.windows(2) {
            let (_, h0, w0) = pair[0].chw()?;
            let (_, h1, w1) = pair[1].chw()?;
            if h1 * 2 != h0 || w1 * 2 != w0 {
                return Err(Error::Shape(format!("level {h1}x{w1} is not half of {h0}x{w0}")));
            }
        }
        Ok(Self { levels })
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|l| l.shape().to_vec()).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self { levels: self.levels.iter().map(|l| Tensor::zeros(l.shape())).collect() }
    }
}

#[derive(Clone, Debug)]
struct Extraction {
    conv_in: Conv2d,
    res: [ResBlock; 2],
    out: Conv2d,
}

/// Adapter weights and layout. Built from a seed; the readout convolutions
/// start at zero.
#[derive(Clone, Debug)]
pub struct AdaptiveEncoder<T> {
    params: ParamStore<T>,
    factor: usize,
    in_channels: usize,
    widths: [usize; LEVELS],
    em: Vec<Extraction>,
    ds: Vec<Conv2d>,
}

impl<T: Scalar> AdaptiveEncoder<T> {
    /// `factor` is the unshuffle factor taking images to latent resolution;
    /// `image_channels + 1` inputs account for the mask.
    pub fn new(image_channels: usize, factor: usize, widths: [usize; LEVELS], seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut init = Init::new(seed);
        let in_channels = (image_channels + 1) * factor * factor;
        let mut em = Vec::with_capacity(LEVELS);
        let mut ds = Vec::with_capacity(LEVELS - 1);
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("adapter.em{}", i + 1);
            let cin = if i == 0 { in_channels } else { w };
            if i > 0 {
                ds.push(Conv2d::new(&mut ps, &mut init, &format!("adapter.ds{i}"), widths[i - 1], w, 3, 2));
            }
            em.push(Extraction {
                conv_in: Conv2d::new(&mut ps, &mut init, &format!("{name}.conv"), cin, w, 3, 1),
                res: [
                    ResBlock::new(&mut ps, &mut init, &format!("{name}.res1"), w, w, None),
                    ResBlock::new(&mut ps, &mut init, &format!("{name}.res2"), w, w, None),
                ],
                out: Conv2d::zeroed(&mut ps, &format!("{name}.out"), w, w, 1),
            });
        }
        Self { params: ps, factor, in_channels, widths, em, ds }
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

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Adapter input: unshuffled `[-1, 1]` image concatenated with the mask.
    pub fn prepare_input(&self, image: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = image.chw()?;
        let (mh, mw) = match mask.shape() {
            [mh, mw] | [1, mh, mw] => (*mh, *mw),
            s => return Err(Error::Shape(format!("mask must be (H, W), got {s:?}"))),
        };
        if (mh, mw) != (h, w) {
            return Err(Error::Shape(format!("mask {mh}x{mw} does not match image {h}x{w}")));
        }
        let mut data: Vec<T> = image.data().iter().map(|&v| v * T::lit(2.0) - T::one()).collect();
        data.extend_from_slice(mask.data());
        pixel_unshuffle(&Tensor::new(&[c + 1, h, w], data)?, self.factor)
    }

    /// `F_c^1 = EM_1(x)`, `F_c^{i+1} = EM_{i+1}(DS(·))`. The chain runs on
    /// each module's trunk; the zero-initialized readout convolution only
    /// produces the level output.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, input: Var) -> Result<Vec<Var>> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::Shape(format!(
                "adapter expects ({}, h, w) input, got {shape:?}",
                self.in_channels
            )));
        }
        let scale = 1 << (LEVELS - 1);
        if !shape[1].is_multiple_of(scale) || !shape[2].is_multiple_of(scale) {
            return Err(Error::Shape(format!("adapter input {}x{} not divisible by {scale}", shape[1], shape[2])));
        }
        let mut out = Vec::with_capacity(LEVELS);
        let mut h = input;
        for (i, em) in self.em.iter().enumerate() {
            if i > 0 {
                h = self.ds[i - 1].forward(g, p, h);
                h = g.silu(h);
            }
            h = em.conv_in.forward(g, p, h);
            for r in &em.res {
                h = r.forward(g, p, h, None);
            }
            let a = g.silu(h);
            out.push(em.out.forward(g, p, a));
        }
        Ok(out)
    }
}

/// Runs the adapter outside a training graph.
pub fn extract_pyramid<T: Scalar>(input: &Tensor<T>, adapter: &AdaptiveEncoder<T>) -> Result<MultiScaleFeatures<T>> {
    let mut g = Graph::inference();
    let p = adapter.params().bind(&mut g, false);
    let x = g.constant(input.clone());
    let levels = adapter.forward(&mut g, &p, x)?;
    MultiScaleFeatures::new(levels.into_iter().map(|v| g.value(v).clone()).collect())
}

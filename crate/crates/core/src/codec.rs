//! Image ↔ latent codec.
//!
//! Both modes are linear patch codecs: space-to-depth by the spatial factor,
//! then a per-position channel projection. `InvertibleLinear` uses a square
//! seed-generated orthogonal matrix, so decoding is the exact transpose.
//! `Learned` keeps the top principal directions of training patches, the
//! optimum of a linear autoencoder of that width.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use phdiff_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::adapters::{pixel_shuffle_index, pixel_unshuffle_index};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecMode {
    InvertibleLinear,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub spatial_factor: usize,
    pub image_channels: usize,
    pub latent_channels: usize,
    pub mode: CodecMode,
    pub seed: u64,
}

impl CodecConfig {
    /// Full-rank orthogonal codec for a spatial factor.
    pub fn invertible(spatial_factor: usize, seed: u64) -> Self {
        Self {
            spatial_factor,
            image_channels: 3,
            latent_channels: 3 * spatial_factor * spatial_factor,
            mode: CodecMode::InvertibleLinear,
            seed,
        }
    }

    /// Channels of one space-to-depth patch.
    pub fn patch_channels(&self) -> usize {
        self.image_channels * self.spatial_factor * self.spatial_factor
    }

    fn validate(&self) -> Result<()> {
        if self.spatial_factor == 0 || self.latent_channels == 0 {
            return Err(Error::Parameter("codec factor and latent width must be positive".into()));
        }
        let d = self.patch_channels();
        match self.mode {
            CodecMode::InvertibleLinear if self.latent_channels != d => Err(Error::Parameter(format!(
                "invertible codec needs latent_channels = {d}, got {}",
                self.latent_channels
            ))),
            CodecMode::Learned if self.latent_channels > d => Err(Error::Parameter(format!(
                "learned codec width {} exceeds patch size {d}",
                self.latent_channels
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Codec<T> {
    cfg: CodecConfig,
    params: ParamStore<T>,
    proj: ParamId,
    offset: ParamId,
}

impl<T: Scalar> Codec<T> {
    /// Seeded orthogonal codec (`InvertibleLinear`) or an untrained `Learned`
    /// codec holding the leading rows of the same orthogonal matrix.
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.patch_channels();
        let mut init = Init::new(cfg.seed);
        let full = init.orthogonal(d, d, 1.0);
        let rows: Vec<T> = full[..cfg.latent_channels * d].iter().map(|&v| T::lit(v)).collect();
        let mut params = ParamStore::new();
        let proj = params.push("codec.projection", Tensor::new(&[cfg.latent_channels, d], rows)?);
        let offset = params.push("codec.offset", Tensor::zeros(&[d]));
        Ok(Self { cfg, params, proj, offset })
    }

    /// Fits a `Learned` codec: principal directions of the `[-1, 1]` patches of `images`.
    pub fn fit(cfg: CodecConfig, images: &[Tensor<T>]) -> Result<Self> {
        if cfg.mode != CodecMode::Learned {
            return Err(Error::Parameter("only learned codecs are fitted".into()));
        }
        let mut codec = Self::new(cfg)?;
        let d = codec.cfg.patch_channels();
        let mut sum = vec![0.0f64; d];
        let mut cross = DMatrix::<f64>::zeros(d, d);
        let mut count = 0usize;
        for img in images {
            let patches = codec.patches(img)?;
            let (_, hw) = patches.rows_cols();
            let pd = patches.data();
            for p in 0..hw {
                let v: Vec<f64> = (0..d).map(|c| pd[c * hw + p].as_f64()).collect();
                for i in 0..d {
                    sum[i] += v[i];
                    for j in 0..=i {
                        cross[(i, j)] += v[i] * v[j];
                    }
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Parameter("cannot fit a codec on zero images".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        for i in 0..d {
            for j in 0..=i {
                let c = cross[(i, j)] / n - mean[i] * mean[j];
                cross[(i, j)] = c;
                cross[(j, i)] = c;
            }
        }
        let eig = SymmetricEigen::new(cross);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let l = codec.cfg.latent_channels;
        let mut rows = Vec::with_capacity(l * d);
        for &k in order.iter().take(l) {
            rows.extend((0..d).map(|i| T::lit(eig.eigenvectors[(i, k)])));
        }
        *codec.params.get_mut(codec.proj) = Tensor::new(&[l, d], rows)?;
        *codec.params.get_mut(codec.offset) = Tensor::new(&[d], mean.into_iter().map(T::lit).collect())?;
        Ok(codec)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn projection(&self) -> &Tensor<T> {
        self.params.get(self.proj)
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<(usize, usize)> {
        let (c, h, w) = image.chw().map_err(|e| Error::Shape(e.to_string()))?;
        let f = self.cfg.spatial_factor;
        if c != self.cfg.image_channels {
            return Err(Error::Shape(format!("codec expects {} image channels, got {c}", self.cfg.image_channels)));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("image {h}x{w} not divisible by spatial factor {f}")));
        }
        Ok((h / f, w / f))
    }

    /// `[-1, 1]` space-to-depth patches as `(D, h·w)`.
    fn patches(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (lh, lw) = self.check_image(image)?;
        let (c, h, w) = image.chw()?;
        let idx = pixel_unshuffle_index(c, h, w, self.cfg.spatial_factor);
        let d = image.data();
        let two = T::lit(2.0);
        let data = idx.iter().map(|&i| d[i] * two - T::one()).collect();
        Ok(Tensor::new(&[self.cfg.patch_channels(), lh * lw], data)?)
    }

    /// Image in `[0, 1]` → latent `(latent_channels, H/f, W/f)`.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (lh, lw) = self.check_image(image)?;
        let mut g = Graph::inference();
        let x = g.constant(image.clone());
        let z = self.encode_var(&mut g, x, lh, lw);
        Ok(g.value(z).clone())
    }

    fn encode_var(&self, g: &mut Graph<T>, image: Var, lh: usize, lw: usize) -> Var {
        let (c, h, w) = g.value(image).chw().expect("checked image");
        let d = self.cfg.patch_channels();
        let u = g.gather(image, pixel_unshuffle_index(c, h, w, self.cfg.spatial_factor), &[d, lh * lw]);
        let u = g.scale(u, T::lit(2.0));
        let u = g.shift(u, -T::one());
        let off = g.leaf(Arc::new(self.params.get(self.offset).scale(-T::one())), false);
        let u = g.add_per_row(u, off);
        let p = g.leaf(Arc::new(self.projection().clone()), false);
        let z = g.matmul(p, u);
        g.reshape(z, &[self.cfg.latent_channels, lh, lw])
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.cfg.latent_channels {
            return Err(Error::Shape(format!(
                "latent must be ({}, h, w), got {:?}",
                self.cfg.latent_channels, shape
            )));
        }
        Ok(())
    }

    /// Differentiable decode without the final clamp; the training losses read this.
    pub fn decode_var(&self, g: &mut Graph<T>, latent: Var) -> Result<Var> {
        let shape = g.shape(latent).to_vec();
        self.check_latent(&shape)?;
        let (l, lh, lw) = (shape[0], shape[1], shape[2]);
        let f = self.cfg.spatial_factor;
        let z = g.reshape(latent, &[l, lh * lw]);
        let p = g.leaf(Arc::new(self.projection().clone()), false);
        let u = g.matmul_t(p, true, z, false);
        let off = g.leaf(Arc::new(self.params.get(self.offset).clone()), false);
        let u = g.add_per_row(u, off);
        let c = self.cfg.image_channels;
        let img = g.gather(u, pixel_shuffle_index(c, lh * f, lw * f, f), &[c, lh * f, lw * f]);
        let img = g.scale(img, T::lit(0.5));
        Ok(g.shift(img, T::lit(0.5)))
    }

    /// Latent → image, unclamped.
    pub fn decode_raw(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latent(latent.shape())?;
        let mut g = Graph::inference();
        let z = g.constant(latent.clone());
        let img = self.decode_var(&mut g, z)?;
        Ok(g.value(img).clone())
    }

    /// Latent → image clamped to `[0, 1]`.
    pub fn decode(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.decode_raw(latent)?.map(|v| v.max(T::zero()).min(T::one())))
    }
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).as_f64().powi(2))
        .sum::<f64>()
        / a.len().max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

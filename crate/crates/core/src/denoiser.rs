//! The toy denoising U-Net `ε_θ`.
//!
//! The encoder emits one feature map per pyramid level. The decoder starts
//! from the deepest (possibly guided) level and consumes the others as skips,
//! so guidance replaces the encoder features everywhere downstream of them.

use phdiff_autograd::{Graph, Scalar, Tensor, Var};

use crate::adapters::{MultiScaleFeatures, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{upsample2_index, Bound, Conv2d, GroupNorm, Init, Linear, ParamStore, ResBlock, SelfAttention};

const HEADS: usize = 4;

/// Sinusoidal step embedding: `dim/2` sines followed by `dim/2` cosines.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Parameter(format!("time embedding width must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp()).collect();
    let mut v: Vec<f64> = freqs.iter().map(|f| (t as f64 * f).sin()).collect();
    v.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    Ok(v)
}

#[derive(Clone, Debug)]
struct Stage {
    down: Option<Conv2d>,
    res: [ResBlock; 2],
    attn: Option<SelfAttention>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    res: ResBlock,
    attn: Option<SelfAttention>,
    up: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    params: ParamStore<T>,
    latent_channels: usize,
    widths: [usize; LEVELS],
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    stages: Vec<Stage>,
    mid: (ResBlock, SelfAttention, ResBlock),
    ups: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    skip: Conv2d,
    skip_gain: Linear,
}

fn has_attention(level: usize) -> bool {
    level >= 2
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(latent_channels: usize, widths: [usize; LEVELS], seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut init = Init::new(seed);
        let w0 = widths[0];
        let tdim = 4 * w0;
        let temb1 = Linear::new(&mut ps, &mut init, "unet.temb1", w0, tdim);
        let temb2 = Linear::new(&mut ps, &mut init, "unet.temb2", tdim, tdim);
        let conv_in = Conv2d::new(&mut ps, &mut init, "unet.conv_in", latent_channels, w0, 3, 1);
        let mut stages = Vec::with_capacity(LEVELS);
        let mut prev = w0;
        for (k, &w) in widths.iter().enumerate() {
            let name = format!("unet.enc{}", k + 1);
            let down = (k > 0).then(|| Conv2d::new(&mut ps, &mut init, &format!("{name}.down"), prev, prev, 3, 2));
            let res = [
                ResBlock::new(&mut ps, &mut init, &format!("{name}.res1"), prev, w, Some(tdim)),
                ResBlock::new(&mut ps, &mut init, &format!("{name}.res2"), w, w, Some(tdim)),
            ];
            let attn = has_attention(k).then(|| SelfAttention::new(&mut ps, &mut init, &format!("{name}.attn"), w, HEADS));
            stages.push(Stage { down, res, attn });
            prev = w;
        }
        let wl = widths[LEVELS - 1];
        let mid = (
            ResBlock::new(&mut ps, &mut init, "unet.mid.res1", wl, wl, Some(tdim)),
            SelfAttention::new(&mut ps, &mut init, "unet.mid.attn", wl, HEADS),
            ResBlock::new(&mut ps, &mut init, "unet.mid.res2", wl, wl, Some(tdim)),
        );
        let mut ups = Vec::with_capacity(LEVELS);
        for k in (0..LEVELS).rev() {
            let name = format!("unet.dec{}", k + 1);
            let w = widths[k];
            let res = ResBlock::new(&mut ps, &mut init, &format!("{name}.res"), 2 * w, w, Some(tdim));
            let attn = has_attention(k).then(|| SelfAttention::new(&mut ps, &mut init, &format!("{name}.attn"), w, HEADS));
            let up = (k > 0).then(|| Conv2d::new(&mut ps, &mut init, &format!("{name}.up"), w, widths[k - 1], 3, 1));
            ups.push(UpLevel { res, attn, up });
        }
        let norm_out = GroupNorm::new(&mut ps, "unet.norm_out", w0);
        let conv_out = Conv2d::new(&mut ps, &mut init, "unet.conv_out", w0, latent_channels, 3, 1);
        // Small output so the untrained model predicts near-zero noise.
        for v in ps.get_mut(conv_out.w).data_mut() {
            *v *= T::lit(0.05);
        }
        let skip = Conv2d::new(&mut ps, &mut init, "unet.skip", latent_channels, latent_channels, 1, 1);
        let skip_gain = Linear::zeroed(&mut ps, "unet.skip_gain", tdim, latent_channels);
        Self { params: ps, latent_channels, widths, temb1, temb2, conv_in, stages, mid, ups, norm_out, conv_out, skip, skip_gain }
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

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    /// `(1, 4·w0)` step embedding inside the graph.
    pub fn embed_time(&self, g: &mut Graph<T>, p: &Bound, t: usize) -> Result<Var> {
        let w0 = self.widths[0];
        let e = time_embedding(t, w0)?;
        let e = g.constant(Tensor::new(&[1, w0], e.into_iter().map(T::lit).collect())?);
        let h = self.temb1.forward(g, p, e);
        let h = g.silu(h);
        Ok(self.temb2.forward(g, p, h))
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        let scale = 1 << (LEVELS - 1);
        match shape {
            [c, h, w] if *c == self.latent_channels && h % scale == 0 && w % scale == 0 && *h > 0 && *w > 0 => Ok(()),
            _ => Err(Error::Shape(format!(
                "latent must be ({}, h, w) with h, w divisible by {scale}, got {shape:?}",
                self.latent_channels
            ))),
        }
    }

    /// Encoder pass: one map per level, `F_{z_t}^1..4`.
    pub fn encoder(&self, g: &mut Graph<T>, p: &Bound, z: Var, temb: Var) -> Result<Vec<Var>> {
        self.check_latent(g.shape(z))?;
        let mut h = self.conv_in.forward(g, p, z);
        let mut out = Vec::with_capacity(LEVELS);
        for st in &self.stages {
            if let Some(d) = &st.down {
                h = d.forward(g, p, h);
            }
            for r in &st.res {
                h = r.forward(g, p, h, Some(temb));
            }
            if let Some(a) = &st.attn {
                h = a.forward(g, p, h);
            }
            out.push(h);
        }
        Ok(out)
    }

    fn check_pyramid(&self, shapes: &[Vec<usize>], latent: &[usize]) -> Result<()> {
        if shapes.len() != LEVELS {
            return Err(Error::Shape(format!("expected {LEVELS} guided levels, got {}", shapes.len())));
        }
        for (k, s) in shapes.iter().enumerate() {
            let want = [self.widths[k], latent[1] >> k, latent[2] >> k];
            if s[..] != want {
                return Err(Error::Shape(format!("guided level {} is {s:?}, expected {want:?}", k + 1)));
            }
        }
        Ok(())
    }

    /// Bottleneck and decoder over guided features; returns `ε_pred`.
    ///
    /// A step-gated 1×1 path from `z` to the output runs beside the U-Net,
    /// which otherwise squeezes every latent channel through `widths[0]`.
    pub fn decoder(&self, g: &mut Graph<T>, p: &Bound, guided: &[Var], temb: Var, z: Var) -> Result<Var> {
        let latent_shape = g.shape(z).to_vec();
        let shapes: Vec<Vec<usize>> = guided.iter().map(|&v| g.shape(v).to_vec()).collect();
        self.check_pyramid(&shapes, &latent_shape)?;
        let mut h = self.mid.0.forward(g, p, guided[LEVELS - 1], Some(temb));
        h = self.mid.1.forward(g, p, h);
        h = self.mid.2.forward(g, p, h, Some(temb));
        for (i, lvl) in self.ups.iter().enumerate() {
            let k = LEVELS - 1 - i;
            h = g.concat(&[h, guided[k]], 0);
            h = lvl.res.forward(g, p, h, Some(temb));
            if let Some(a) = &lvl.attn {
                h = a.forward(g, p, h);
            }
            if let Some(up) = &lvl.up {
                let s = g.shape(h).to_vec();
                h = g.gather(h, upsample2_index(s[0], s[1], s[2]), &[s[0], s[1] * 2, s[2] * 2]);
                h = up.forward(g, p, h);
            }
        }
        let h = self.norm_out.forward(g, p, h);
        let h = g.silu(h);
        let body = self.conv_out.forward(g, p, h);
        let t = g.silu(temb);
        let gain = self.skip_gain.forward(g, p, t);
        let gain = g.reshape(gain, &[self.latent_channels]);
        let direct = self.skip.forward(g, p, z);
        let direct = g.mul_per_row(direct, gain);
        Ok(g.add(body, direct))
    }

    pub fn encode_features(&self, z_t: &Tensor<T>, t: usize) -> Result<MultiScaleFeatures<T>> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let temb = self.embed_time(&mut g, &p, t)?;
        let z = g.constant(z_t.clone());
        let levels = self.encoder(&mut g, &p, z, temb)?;
        MultiScaleFeatures::new(levels.into_iter().map(|v| g.value(v).clone()).collect())
    }

    pub fn predict_noise(&self, z_t: &Tensor<T>, t: usize, guided: &MultiScaleFeatures<T>) -> Result<Tensor<T>> {
        self.check_latent(z_t.shape())?;
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let temb = self.embed_time(&mut g, &p, t)?;
        let levels: Vec<Var> = guided.levels.iter().map(|l| g.constant(l.clone())).collect();
        let z = g.constant(z_t.clone());
        let eps = self.decoder(&mut g, &p, &levels, temb, z)?;
        Ok(g.value(eps).clone())
    }

    /// Unguided prediction: encoder features straight into the decoder.
    pub fn predict_unguided(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let f = self.encode_features(z_t, t)?;
        self.predict_noise(z_t, t, &f)
    }

    /// Unguided prediction inside a graph, for pretraining.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, z: Var, t: usize) -> Result<Var> {
        let temb = self.embed_time(g, p, t)?;
        let f = self.encoder(g, p, z, temb)?;
        self.decoder(g, p, &f, temb, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn tiny() -> Denoiser<f64> {
        Denoiser::new(12, [8, 8, 8, 8], 11)
    }

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn time_embedding_at_zero() {
        let e = time_embedding(0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert_eq!(time_embedding(7, 8).unwrap(), time_embedding(7, 8).unwrap());
        assert!(matches!(time_embedding(3, 5), Err(Error::Parameter(_))));
    }

    #[test]
    fn time_embedding_bands_all_move() {
        let (a, b) = (time_embedding(1, 16).unwrap(), time_embedding(2, 16).unwrap());
        for i in 0..8 {
            let f = (-(10_000f64).ln() * i as f64 / 8.0).exp();
            assert!((a[i] - f.sin()).abs() < 1e-15);
            assert!((b[i + 8] - (2.0 * f).cos()).abs() < 1e-15);
            assert!(a[i] != b[i] && a[i + 8] != b[i + 8]);
        }
    }

    #[test]
    fn pyramid_shapes_and_time_sensitivity() {
        let d = Denoiser::<f32>::new(12, [8, 16, 16, 16], 1);
        let z: Tensor<f32> = rand_tensor(2, &[12, 16, 16]).cast();
        let f1 = d.encode_features(&z, 3).unwrap();
        let f2 = d.encode_features(&z, 40).unwrap();
        let sizes: Vec<usize> = f1.levels.iter().map(|l| l.shape()[1]).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);
        for (a, b) in f1.levels.iter().zip(&f2.levels) {
            assert!(a.max_abs_diff(b) > 1e-6, "{}", a.max_abs_diff(b));
        }
        assert_eq!(d.encode_features(&z, 3).unwrap(), f1);
        let eps = d.predict_noise(&z, 3, &f1).unwrap();
        assert_eq!(eps.shape(), z.shape());
    }

    #[test]
    fn pass_through_matches_unguided_graph() {
        let d = tiny();
        let z = rand_tensor(3, &[12, 8, 8]);
        let via_api = d.predict_unguided(&z, 5).unwrap();
        let mut g = Graph::inference();
        let p = d.params().bind(&mut g, false);
        let zv = g.constant(z.clone());
        let eps = d.forward(&mut g, &p, zv, 5).unwrap();
        assert_eq!(g.value(eps), &via_api);
    }

    #[test]
    fn level_count_mismatch_is_rejected() {
        let d = tiny();
        let z = rand_tensor(3, &[12, 8, 8]);
        let mut f = d.encode_features(&z, 1).unwrap();
        f.levels.pop();
        assert!(matches!(d.predict_noise(&z, 1, &f), Err(Error::Shape(_))));
        assert!(matches!(d.encode_features(&rand_tensor(0, &[11, 8, 8]), 1), Err(Error::Shape(_))));
    }

    #[test]
    fn guided_feature_gradient_matches_finite_difference() {
        let d = tiny();
        let z = rand_tensor(4, &[12, 8, 8]);
        let base = d.encode_features(&z, 9).unwrap();
        let objective = |f: &MultiScaleFeatures<f64>| {
            let e = d.predict_noise(&z, 9, f).unwrap();
            e.data().iter().map(|v| v * v).sum::<f64>()
        };
        let mut g = Graph::new();
        let p = d.params().bind(&mut g, false);
        let temb = d.embed_time(&mut g, &p, 9).unwrap();
        let levels: Vec<Var> = base.levels.iter().map(|l| g.leaf(Arc::new(l.clone()), true)).collect();
        let zv = g.constant(z.clone());
        let eps = d.decoder(&mut g, &p, &levels, temb, zv).unwrap();
        let sq = g.square(eps);
        let loss = g.sum(sq);
        g.backward(loss);
        for (lvl, pos) in [(0usize, 5usize), (1, 17), (2, 3), (3, 6)] {
            let analytic = g.grad(levels[lvl]).unwrap().data()[pos];
            assert!(analytic != 0.0);
            let h = 1e-5;
            let mut plus = base.clone();
            plus.levels[lvl].data_mut()[pos] += h;
            let mut minus = base.clone();
            minus.levels[lvl].data_mut()[pos] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            assert!(err < 1e-4, "level {lvl}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn digest_tracks_parameter_changes() {
        let mut d = tiny();
        let before = d.params().digest();
        assert_eq!(before, tiny().params().digest());
        let id = d.params().find("unet.conv_out.b").unwrap();
        d.params_mut().get_mut(id).data_mut()[0] += 1e-9;
        assert_ne!(before, d.params().digest());
    }
}

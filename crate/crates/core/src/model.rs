//! Model configuration, the assembled state, and guided inference.

use std::fmt;
use std::str::FromStr;

use phdiff_autograd::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{extract_pyramid, AdaptiveEncoder, MultiScaleFeatures, LEVELS};
use crate::codec::{Codec, CodecConfig, CodecMode};
use crate::datagen::CompositeSample;
use crate::def_fusion::{AblationFlags, AttentionRecorder, DefModule, GuidanceCtx, Mask, MaskPyramid};
use crate::denoiser::Denoiser;
use crate::diffusion::{make_schedule, sample, steps_from_strength, DiffusionSchedule, SamplerMode};
use crate::error::{Error, Result};
use crate::losses::{global_stats, masked_pool, FeatureBackbone, ProjectionHead, CONTENT_LEVEL, STYLE_LEVEL};
use crate::nn::ParamStore;

pub const DEFAULT_STRENGTH: f64 = 0.7;
pub const DEFAULT_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Tiny,
    Desk,
    Full,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Tiny => "tiny",
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Parameter(format!("unknown profile '{other}' (tiny|desk|full)"))),
        }
    }
}

/// Everything that determines parameter shapes and the schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: Profile,
    pub image_size: usize,
    pub spatial_factor: usize,
    pub latent_channels: usize,
    pub codec_mode: CodecMode,
    pub widths: [usize; LEVELS],
    pub style_dim: usize,
    pub t_default: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        let (image_size, spatial_factor, widths) = match profile {
            Profile::Tiny => (32, 2, [8, 16, 16, 16]),
            Profile::Desk => (128, 8, [32, 64, 128, 128]),
            Profile::Full => (512, 8, [320, 640, 1280, 1280]),
        };
        Self {
            profile,
            image_size,
            spatial_factor,
            latent_channels: 3 * spatial_factor * spatial_factor,
            codec_mode: CodecMode::InvertibleLinear,
            widths,
            style_dim: 128,
            t_default: DEFAULT_STEPS,
            beta_start: 1e-4,
            beta_end: 0.02,
            seed,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.spatial_factor
    }

    /// `(C, H, W)` of each adapter / denoiser pyramid level.
    pub fn pyramid_shapes(&self) -> Vec<[usize; 3]> {
        let s = self.latent_size();
        (0..LEVELS).map(|k| [self.widths[k], s >> k, s >> k]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.spatial_factor;
        if f == 0 || !self.image_size.is_multiple_of(f) {
            return Err(Error::Parameter(format!(
                "image_size {} is not a multiple of spatial_factor {f}",
                self.image_size
            )));
        }
        let s = self.latent_size();
        if !s.is_multiple_of(1 << (LEVELS - 1)) || s == 0 {
            return Err(Error::Parameter(format!("latent size {s} must be a positive multiple of 8")));
        }
        if !self.image_size.is_multiple_of(8) {
            return Err(Error::Parameter(format!("image_size {} must be a multiple of 8", self.image_size)));
        }
        if self.widths.iter().any(|&w| w == 0 || w % 4 != 0) {
            return Err(Error::Parameter(format!("widths {:?} must be positive multiples of 4", self.widths)));
        }
        make_schedule::<f64>(self.t_default, self.beta_start, self.beta_end)?;
        Ok(())
    }

    /// Hex SHA-256 of the shape-relevant fields; the seed is excluded so
    /// differently seeded runs of one architecture stay interchangeable.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            spatial_factor: self.spatial_factor,
            image_channels: 3,
            latent_channels: self.latent_channels,
            mode: self.codec_mode,
            seed: derive_seed(self.seed, 1),
        }
    }
}

/// Independent sub-seed per component.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Frozen partition (codec, denoiser), trainable partition (adapter, fusion,
/// projection head), and the fixed loss backbone.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub schedule: DiffusionSchedule<T>,
    pub codec: Codec<T>,
    pub denoiser: Denoiser<T>,
    pub adapter: AdaptiveEncoder<T>,
    pub def: DefModule<T>,
    pub head: ProjectionHead<T>,
    pub backbone: FeatureBackbone<T>,
    /// Variant the trainable partition was trained as.
    pub ablation: AblationFlags,
}

/// Which partition a parameter store belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Frozen,
    Trainable,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let codec = Codec::new(config.codec_config())?;
        Self::with_codec(config, codec)
    }

    /// A state around an already built (e.g. fitted) codec.
    pub fn with_codec(config: ModelConfig, codec: Codec<T>) -> Result<Self> {
        config.validate()?;
        if codec.config().latent_channels != config.latent_channels || codec.config().spatial_factor != config.spatial_factor {
            return Err(Error::Parameter("codec geometry does not match the model config".into()));
        }
        let backbone = FeatureBackbone::standard();
        let style_in = backbone.widths()[STYLE_LEVEL];
        Ok(Self {
            schedule: make_schedule(config.t_default, config.beta_start, config.beta_end)?,
            codec,
            denoiser: Denoiser::new(config.latent_channels, config.widths, derive_seed(config.seed, 2)),
            adapter: AdaptiveEncoder::new(3, config.spatial_factor, config.widths, derive_seed(config.seed, 3)),
            def: DefModule::new(config.widths, derive_seed(config.seed, 4)),
            head: ProjectionHead::new(style_in, config.style_dim, derive_seed(config.seed, 5)),
            backbone,
            config,
            ablation: AblationFlags::default(),
        })
    }

    /// Parameter stores in checkpoint order.
    pub fn stores(&self) -> [(Partition, &ParamStore<T>); 5] {
        [
            (Partition::Frozen, self.codec.params()),
            (Partition::Frozen, self.denoiser.params()),
            (Partition::Trainable, self.adapter.params()),
            (Partition::Trainable, self.def.params()),
            (Partition::Trainable, self.head.params()),
        ]
    }

    pub fn stores_mut(&mut self) -> [(Partition, &mut ParamStore<T>); 5] {
        [
            (Partition::Frozen, self.codec.params_mut()),
            (Partition::Frozen, self.denoiser.params_mut()),
            (Partition::Trainable, self.adapter.params_mut()),
            (Partition::Trainable, self.def.params_mut()),
            (Partition::Trainable, self.head.params_mut()),
        ]
    }

    /// Content hash of the codec and denoiser parameters.
    pub fn frozen_digest(&self) -> String {
        self.partition_digest(Partition::Frozen)
    }

    pub fn trainable_digest(&self) -> String {
        self.partition_digest(Partition::Trainable)
    }

    fn partition_digest(&self, part: Partition) -> String {
        let mut h = Sha256::new();
        for (p, s) in self.stores() {
            if p == part {
                h.update(s.digest().as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn num_trainable(&self) -> usize {
        self.stores().iter().filter(|(p, _)| *p == Partition::Trainable).map(|(_, s)| s.num_scalars()).sum()
    }

    /// Adds seeded Gaussian noise of scale `std` to every trainable scalar.
    /// Zero-initialized readouts otherwise block gradients into the layers
    /// behind them, which makes a gradient check uninformative.
    pub fn jitter_trainable(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (part, store) in self.stores_mut() {
            if part != Partition::Trainable {
                continue;
            }
            for id in store.ids().collect::<Vec<_>>() {
                let noise: Tensor<T> = crate::diffusion::gaussian(&mut rng, store.get(id).shape());
                let v = store.get(id).add(&noise.scale(T::lit(std))).expect("same shape");
                *store.get_mut(id) = v;
            }
        }
    }

    pub fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let n = self.config.image_size;
        match image.shape() {
            [3, h, w] if *h == n && *w == n => Ok(()),
            s => Err(Error::Shape(format!(
                "{} profile expects a (3, {n}, {n}) image, got {s:?}",
                self.config.profile
            ))),
        }
    }

    /// Per-sample quantities that stay fixed across training steps.
    pub fn prepare(&self, sample: &CompositeSample<T>) -> Result<PreparedSample<T>> {
        self.check_image(&sample.composite)?;
        self.check_image(&sample.background)?;
        let n = self.config.image_size;
        let s = self.config.latent_size();
        let bg_feats = self.backbone.pyramid(&sample.background)?;
        let comp_feats = self.backbone.pyramid(&sample.composite)?;
        let image_masks = MaskPyramid::build(&sample.mask, n, n)?;
        Ok(PreparedSample {
            z0: self.codec.encode(&sample.composite)?,
            adapter_input: self.adapter.prepare_input(&sample.composite, &sample.mask.to_tensor())?,
            latent_masks: MaskPyramid::build(&sample.mask, s, s)?,
            bg_stats: global_stats(&bg_feats)?,
            bg_pooled: masked_pool(&bg_feats[STYLE_LEVEL], None)?,
            content_target: comp_feats[CONTENT_LEVEL].clone(),
            image_masks,
        })
    }

    /// `F_c^1..4` for one composite.
    pub fn condition(&self, composite: &Tensor<T>, mask: &Mask) -> Result<MultiScaleFeatures<T>> {
        self.check_image(composite)?;
        let input = self.adapter.prepare_input(composite, &mask.to_tensor())?;
        extract_pyramid(&input, &self.adapter)
    }

    /// Noise estimate with fusion guidance at one step.
    pub fn guided_eps(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        cond: &MultiScaleFeatures<T>,
        masks: &MaskPyramid,
        flags: AblationFlags,
        recorder: Option<&mut AttentionRecorder<T>>,
    ) -> Result<Tensor<T>> {
        let fzt = self.denoiser.encode_features(z_t, t)?;
        let mut g = Graph::inference();
        let p = self.def.params().bind(&mut g, false);
        let fc: Vec<Var> = cond.levels.iter().map(|l| g.constant(l.clone())).collect();
        let fz: Vec<Var> = fzt.levels.into_iter().map(|l| g.constant(l)).collect();
        let guided = self.def.apply(&mut g, &p, &fc, &fz, GuidanceCtx { masks, flags, recorder, step: t })?;
        let guided = MultiScaleFeatures::new(guided.into_iter().map(|v| g.value(v).clone()).collect())?;
        self.denoiser.predict_noise(z_t, t, &guided)
    }

    /// Strength-controlled harmonization of a composite.
    pub fn harmonize(&self, composite: &Tensor<T>, mask: &Mask, opts: &HarmonizeOptions, mut recorder: Option<&mut AttentionRecorder<T>>) -> Result<Harmonized<T>> {
        self.check_image(composite)?;
        let steps = steps_from_strength(opts.strength, self.schedule.t_default())?;
        let z0 = self.codec.encode(composite)?;
        let s = self.config.latent_size();
        let masks = MaskPyramid::build(mask, s, s)?;
        let cond = self.condition(composite, mask)?;
        let z = sample(
            &z0,
            opts.strength,
            &self.schedule,
            |_, _| Ok(()),
            |z_t, t, _| self.guided_eps(z_t, t, &cond, &masks, opts.flags, recorder.as_deref_mut()),
            opts.seed,
            opts.sampler,
        )?;
        log::info!("harmonize: {steps} denoising steps at strength {}", opts.strength);
        Ok(Harmonized { image: self.codec.decode(&z)?, steps })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HarmonizeOptions {
    pub strength: f64,
    pub seed: u64,
    pub sampler: SamplerMode,
    pub flags: AblationFlags,
}

impl Default for HarmonizeOptions {
    fn default() -> Self {
        Self { strength: DEFAULT_STRENGTH, seed: 0, sampler: SamplerMode::Ddim, flags: AblationFlags::default() }
    }
}

#[derive(Clone, Debug)]
pub struct Harmonized<T> {
    pub image: Tensor<T>,
    pub steps: usize,
}

/// Cached per-sample inputs of the training losses.
#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    pub z0: Tensor<T>,
    pub adapter_input: Tensor<T>,
    pub latent_masks: MaskPyramid,
    pub image_masks: MaskPyramid,
    /// Full-image `(μ, σ)` of `φ^1..4` of the painting.
    pub bg_stats: Vec<(Tensor<T>, Tensor<T>)>,
    /// `(1, C3)` pooled `φ³` of the whole painting; the contrastive positive.
    pub bg_pooled: Tensor<T>,
    /// `φ⁴` of the composite.
    pub content_target: Tensor<T>,
}

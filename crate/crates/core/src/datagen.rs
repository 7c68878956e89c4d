//! Synthetic composites: procedural "paintings" with a pasted, photographically
//! shaded object, plus PNG and manifest I/O for image/mask triples.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use phdiff_autograd::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::def_fusion::Mask;
use crate::error::{Error, Result};

pub const MIN_AREA_RATIO: f64 = 0.05;
pub const MAX_AREA_RATIO: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleFamily {
    Strokes,
    Dots,
    Waves,
    Patches,
    FlatGradient,
}

impl StyleFamily {
    pub const ALL: [StyleFamily; 5] =
        [StyleFamily::Strokes, StyleFamily::Dots, StyleFamily::Waves, StyleFamily::Patches, StyleFamily::FlatGradient];

    pub fn as_str(self) -> &'static str {
        match self {
            StyleFamily::Strokes => "strokes",
            StyleFamily::Dots => "dots",
            StyleFamily::Waves => "waves",
            StyleFamily::Patches => "patches",
            StyleFamily::FlatGradient => "flat-gradient",
        }
    }

    /// Anchor colors; each painting jitters around them.
    fn palette(self) -> &'static [[f64; 3]] {
        match self {
            StyleFamily::Strokes => &[[0.80, 0.55, 0.20], [0.55, 0.30, 0.12], [0.35, 0.22, 0.10], [0.90, 0.80, 0.55]],
            StyleFamily::Dots => &[[0.20, 0.35, 0.85], [0.95, 0.85, 0.20], [0.95, 0.95, 0.90], [0.30, 0.70, 0.40]],
            StyleFamily::Waves => &[[0.10, 0.30, 0.55], [0.20, 0.60, 0.70], [0.75, 0.90, 0.95], [0.05, 0.15, 0.30]],
            StyleFamily::Patches => &[[0.75, 0.15, 0.15], [0.45, 0.45, 0.50], [0.90, 0.75, 0.60], [0.15, 0.15, 0.20]],
            StyleFamily::FlatGradient => &[[0.95, 0.60, 0.55], [0.60, 0.50, 0.80], [0.98, 0.85, 0.60], [0.45, 0.70, 0.85]],
        }
    }
}

impl fmt::Display for StyleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StyleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StyleFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown style family {s:?}")))
    }
}

/// Composite `I_c`, painting `I_b` and mask `M`, all at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeSample<T> {
    pub composite: Tensor<T>,
    pub background: Tensor<T>,
    pub mask: Mask,
    pub style_family: Option<StyleFamily>,
    pub seed: u64,
}

impl<T: Scalar> CompositeSample<T> {
    pub fn cast<U: Scalar>(&self) -> CompositeSample<U> {
        CompositeSample {
            composite: self.composite.cast(),
            background: self.background.cast(),
            mask: self.mask.clone(),
            style_family: self.style_family,
            seed: self.seed,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        self.mask.dims()
    }
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(h: usize, w: usize, fill: [f64; 3]) -> Self {
        Self { h, w, px: vec![fill; h * w] }
    }

    fn blend(&mut self, y: isize, x: isize, c: [f64; 3], a: f64) {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            return;
        }
        let p = &mut self.px[y as usize * self.w + x as usize];
        for k in 0..3 {
            p[k] = p[k] * (1.0 - a) + c[k] * a;
        }
    }

    fn disk(&mut self, cy: f64, cx: f64, r: f64, c: [f64; 3], a: f64) {
        let (y0, y1) = ((cy - r).floor() as isize, (cy + r).ceil() as isize);
        let (x0, x1) = ((cx - r).floor() as isize, (cx + r).ceil() as isize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= r * r {
                    self.blend(y, x, c, a);
                }
            }
        }
    }

    /// Thick segment drawn as a run of disks.
    fn stroke(&mut self, y: f64, x: f64, angle: f64, len: f64, r: f64, c: [f64; 3], a: f64) {
        let steps = (len / (r * 0.5).max(0.5)).ceil() as usize + 1;
        for i in 0..steps {
            let s = i as f64 / (steps - 1).max(1) as f64 - 0.5;
            self.disk(y + s * len * angle.sin(), x + s * len * angle.cos(), r, c, a);
        }
    }

    fn grain(&mut self, rng: &mut ChaCha8Rng, amp: f64) {
        for p in &mut self.px {
            let n = rng.random_range(-amp..amp);
            for v in p.iter_mut() {
                *v += n;
            }
        }
    }

    fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        let hw = self.h * self.w;
        Tensor::from_fn(&[3, self.h, self.w], |i| T::lit(quantize(self.px[i % hw][i / hw])))
    }
}

/// Rounds to the nearest 8-bit level so PNG round trips are exact.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amt: f64) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-amt..amt)).clamp(0.0, 1.0))
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Procedural painting of one family; deterministic in `(seed, family, size)`.
pub fn make_background<T: Scalar>(seed: u64, family: StyleFamily, size: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb6_0000 ^ (family as u64) << 40);
    let pal: Vec<[f64; 3]> = family.palette().iter().map(|&c| jitter(&mut rng, c, 0.08)).collect();
    let s = size as f64 / 128.0;
    let n = size;
    let mut cv = Canvas::new(n, n, pal[0]);
    match family {
        StyleFamily::Strokes => {
            let base_angle = rng.random_range(0.0..std::f64::consts::PI);
            let count = (700.0 * s * s) as usize + 20;
            for _ in 0..count {
                let c = pal[rng.random_range(0..pal.len())];
                let ang = base_angle + rng.random_range(-0.35..0.35);
                let len = rng.random_range(8.0..22.0) * s;
                let r = rng.random_range(1.2..2.6) * s.max(0.5);
                let (y, x) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
                cv.stroke(y, x, ang, len, r, jitter(&mut rng, c, 0.05), 0.8);
            }
            cv.grain(&mut rng, 0.03);
        }
        StyleFamily::Dots => {
            cv = Canvas::new(n, n, pal[2]);
            let count = (1600.0 * s * s) as usize + 40;
            for _ in 0..count {
                let c = pal[[0, 1, 3][rng.random_range(0..3)]];
                let r = rng.random_range(1.0..2.2) * s.max(0.5);
                let (y, x) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
                cv.disk(y, x, r, jitter(&mut rng, c, 0.04), 1.0);
            }
        }
        StyleFamily::Waves => {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let k = rng.random_range(0.18..0.30) / s;
            let k2 = rng.random_range(0.03..0.07) / s;
            let amp = rng.random_range(2.0..5.0);
            for y in 0..n {
                for x in 0..n {
                    let (fy, fx) = (y as f64, x as f64);
                    let u = fx * theta.cos() + fy * theta.sin();
                    let v = -fx * theta.sin() + fy * theta.cos();
                    let t = 0.5 + 0.5 * (k * u + amp * (k2 * v).sin()).sin();
                    let band = if t > 0.5 { mix(pal[1], pal[2], (t - 0.5) * 2.0) } else { mix(pal[3], pal[1], t * 2.0) };
                    cv.px[y * n + x] = band;
                }
            }
            cv.grain(&mut rng, 0.02);
        }
        StyleFamily::Patches => {
            let cells = rng.random_range(10..18);
            let sites: Vec<(f64, f64, [f64; 3])> = (0..cells)
                .map(|_| {
                    let c = pal[rng.random_range(0..pal.len())];
                    (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64), jitter(&mut rng, c, 0.06))
                })
                .collect();
            let edge = 1.6 * s.max(0.5);
            for y in 0..n {
                for x in 0..n {
                    let mut d = [(f64::MAX, 0usize), (f64::MAX, 0usize)];
                    for (i, &(sy, sx, _)) in sites.iter().enumerate() {
                        let dd = ((y as f64 - sy).powi(2) + (x as f64 - sx).powi(2)).sqrt();
                        if dd < d[0].0 {
                            d[1] = d[0];
                            d[0] = (dd, i);
                        } else if dd < d[1].0 {
                            d[1] = (dd, i);
                        }
                    }
                    cv.px[y * n + x] = if d[1].0 - d[0].0 < edge { pal[3] } else { sites[d[0].1].2 };
                }
            }
            cv.grain(&mut rng, 0.025);
        }
        StyleFamily::FlatGradient => {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let (a, b) = (pal[rng.random_range(0..2)], pal[2 + rng.random_range(0..2)]);
            for y in 0..n {
                for x in 0..n {
                    let u = ((x as f64 / n as f64 - 0.5) * theta.cos() + (y as f64 / n as f64 - 0.5) * theta.sin()) * std::f64::consts::FRAC_1_SQRT_2 + 0.5;
                    cv.px[y * n + x] = mix(a, b, u.clamp(0.0, 1.0));
                }
            }
            cv.grain(&mut rng, 0.01);
        }
    }
    cv.into_tensor()
}

/// A shaded solid on a black canvas of `size × size` and its tight mask.
pub fn make_foreground<T: Scalar>(seed: u64, size: usize) -> (Tensor<T>, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf0_0000_0000);
    let n = size as f64;
    let hue = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
    let light = {
        let (a, b): (f64, f64) = (rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.3));
        let z = (1.0 - a * a - b * b).max(0.1).sqrt();
        [a, b, z]
    };
    let shape = rng.random_range(0..3);
    let (cy, cx) = (n / 2.0, n / 2.0);
    let r = rng.random_range(0.32..0.46) * n;
    let (ry, rx) = (r * rng.random_range(0.7..1.0), r * rng.random_range(0.7..1.0));
    let stripe = rng.random_range(0.15..0.35) / (n / 128.0);
    let mut px = vec![[0.0; 3]; size * size];
    let mut bits = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            // Surface normal of the solid at this pixel, or None outside it.
            let normal = match shape {
                0 => {
                    let d = u * u + v * v;
                    (d <= 1.0).then(|| [u, v, (1.0 - d).sqrt()])
                }
                1 => {
                    let inside = u.abs() <= 0.85 && v.abs() <= 0.85;
                    // Cylinder-like bulge across the box for a soft gradient.
                    inside.then(|| [u * 0.6, v * 0.2, (1.0 - (u * 0.6).powi(2) - (v * 0.2).powi(2)).sqrt()])
                }
                _ => {
                    let inside = (-0.9..=0.9).contains(&v) && u.abs() <= (v + 0.9) / 1.8;
                    inside.then(|| [u * 0.4, -0.3, (1.0 - (u * 0.4).powi(2) - 0.09).sqrt()])
                }
            };
            let Some(nrm) = normal else { continue };
            let lam = (nrm[0] * light[0] + nrm[1] * light[1] + nrm[2] * light[2]).max(0.0);
            let refl_z = 2.0 * lam * nrm[2] - light[2];
            let spec = refl_z.max(0.0).powi(24) * 0.6;
            let tex = 0.06 * ((x as f64 * stripe).sin() * (y as f64 * stripe * 0.7).cos());
            let i = y * size + x;
            px[i] = hue.map(|c| (c * (0.25 + 0.75 * lam) + spec + tex).clamp(0.0, 1.0));
            bits[i] = true;
        }
    }
    let hw = size * size;
    let img = Tensor::from_fn(&[3, size, size], |i| T::lit(quantize(px[i % hw][i / hw])));
    (img, Mask::new(size, size, bits).expect("sized"))
}

/// Where and how large the object is pasted: nearest-neighbour `scale` of the
/// object canvas, top-left corner at `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub scale: f64,
    pub x: usize,
    pub y: usize,
}

/// Pastes `fg` over `bg` where the scaled mask is set.
pub fn composite<T: Scalar>(fg: &Tensor<T>, fg_mask: &Mask, bg: &Tensor<T>, placement: Placement) -> Result<CompositeSample<T>> {
    let (_, fh, fw) = fg.chw()?;
    let (c, h, w) = bg.chw()?;
    if fg_mask.dims() != (fh, fw) {
        return Err(Error::Shape("foreground mask does not match object".into()));
    }
    if !(placement.scale > 0.0) {
        return Err(Error::Parameter(format!("placement scale must be positive, got {}", placement.scale)));
    }
    let sh = ((fh as f64) * placement.scale).round() as usize;
    let sw = ((fw as f64) * placement.scale).round() as usize;
    if placement.y + sh > h || placement.x + sw > w {
        return Err(Error::Shape(format!(
            "scaled object {sh}x{sw} at ({}, {}) does not fit a {h}x{w} painting",
            placement.x, placement.y
        )));
    }
    let mut bits = vec![false; h * w];
    let mut comp = bg.clone();
    for y in 0..sh {
        let sy = ((y as f64 + 0.5) / placement.scale).floor().min(fh as f64 - 1.0) as usize;
        for x in 0..sw {
            let sx = ((x as f64 + 0.5) / placement.scale).floor().min(fw as f64 - 1.0) as usize;
            if fg_mask.get(sy, sx) {
                let (ty, tx) = (placement.y + y, placement.x + x);
                bits[ty * w + tx] = true;
                for ch in 0..c {
                    comp.set3(ch, ty, tx, fg.at3(ch, sy, sx));
                }
            }
        }
    }
    let mask = Mask::new(h, w, bits)?;
    let ratio = mask.area_ratio();
    if !(MIN_AREA_RATIO..=MAX_AREA_RATIO).contains(&ratio) {
        return Err(Error::AreaRatio { ratio, min: MIN_AREA_RATIO, max: MAX_AREA_RATIO });
    }
    Ok(CompositeSample { composite: comp, background: bg.clone(), mask, style_family: None, seed: 0 })
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64).rotate_left(17) ^ 0x5bd1_e995
}

/// One sample of a dataset; a pure function of `(seed, index, size)`.
pub fn make_sample<T: Scalar>(seed: u64, index: usize, size: usize) -> CompositeSample<T> {
    let s = sample_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let family = StyleFamily::ALL[rng.random_range(0..StyleFamily::ALL.len())];
    let bg = make_background::<T>(rng.random(), family, size);
    let (fg, fmask) = make_foreground::<T>(rng.random(), size);
    let area = fmask.count() as f64;
    loop {
        let target = rng.random_range(0.08..0.28) * (size * size) as f64;
        let scale = (target / area).sqrt().min(1.0);
        let span = ((size as f64) * scale).round() as usize;
        if span > size {
            continue;
        }
        let x = rng.random_range(0..=size - span);
        let y = rng.random_range(0..=size - span);
        if let Ok(mut sample) = composite(&fg, &fmask, &bg, Placement { scale, x, y }) {
            sample.style_family = Some(family);
            sample.seed = s;
            return sample;
        }
    }
}

/// A vertical-gradient square filling the top-right quadrant of a dots
/// painting. Every pyramid level down to 1/16 keeps both regions non-empty,
/// which random composites at small sizes do not guarantee.
pub fn quadrant_sample<T: Scalar>(seed: u64, size: usize) -> Result<CompositeSample<T>> {
    if size < 16 || !size.is_multiple_of(2) {
        return Err(Error::Parameter(format!("quadrant sample needs an even size of at least 16, got {size}")));
    }
    let q = size / 2;
    let bg = make_background::<T>(seed, StyleFamily::Dots, size);
    let fg = Tensor::from_fn(&[3, q, q], |i| T::lit(0.3 + 0.5 * ((i / q % q) as f64 / (q - 1) as f64)));
    let mut s = composite(&fg, &Mask::full(q, q, true), &bg, Placement { scale: 1.0, x: q, y: 0 })?;
    s.seed = seed;
    Ok(s)
}

/// `n` samples, generated in parallel, in index order.
pub fn generate<T: Scalar>(n: usize, size: usize, seed: u64) -> Vec<CompositeSample<T>> {
    (0..n).into_par_iter().map(|i| make_sample(seed, i, size)).collect()
}

fn to_rgb<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected an RGB tensor, got {c} channels")));
    }
    let hw = h * w;
    let mut buf = Vec::with_capacity(hw * 3);
    for p in 0..hw {
        for ch in 0..3 {
            buf.push((t.data()[ch * hw + p].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("sized buffer"))
}

pub fn save_rgb<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    to_rgb(t)?.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

/// Single-channel map in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = match t.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("expected a single-channel map, got {s:?}"))),
    };
    let buf = t.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, buf).expect("sized buffer");
    img.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

pub fn save_mask(m: &Mask, path: &Path) -> Result<()> {
    save_gray(&m.to_tensor::<f64>(), path)
}

pub fn load_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let hw = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |i| T::lit(raw[(i % hw) * 3 + i / hw] as f64 / 255.0)))
}

/// Grayscale mask binarized at 0.5.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Mask::new(h, w, img.as_raw().iter().map(|&v| v >= 128).collect())
}

pub fn load_sample<T: Scalar>(composite_path: &Path, background_path: &Path, mask_path: &Path) -> Result<CompositeSample<T>> {
    let composite: Tensor<T> = load_rgb(composite_path)?;
    let background: Tensor<T> = load_rgb(background_path)?;
    let mask = load_mask(mask_path)?;
    if composite.shape() != background.shape() {
        return Err(Error::Shape(format!(
            "composite {:?} and background {:?} differ in size",
            composite.shape(),
            background.shape()
        )));
    }
    let (_, h, w) = composite.chw()?;
    if mask.dims() != (h, w) {
        return Err(Error::Shape(format!("mask {:?} does not match image {h}x{w}", mask.dims())));
    }
    if mask.count() == 0 {
        return Err(Error::DegenerateRegion(format!("{}: mask is empty", mask_path.display())));
    }
    let hw = h * w;
    let differs = (0..3 * hw).any(|i| !mask.bits()[i % hw] && composite.data()[i] != background.data()[i]);
    if differs {
        log::warn!(
            "{}: composite and background differ outside the mask; treating the background as an independent painting",
            composite_path.display()
        );
    }
    Ok(CompositeSample { composite, background, mask, style_family: None, seed: 0 })
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub composite: PathBuf,
    pub background: PathBuf,
    pub mask: PathBuf,
    pub style_family: String,
    pub seed: u64,
}

/// Writes each sample's three PNGs under `dir` and a tab-separated
/// `manifest.tsv` with paths relative to `dir`.
pub fn write_dataset<T: Scalar>(samples: &[CompositeSample<T>], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<ManifestEntry> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let e = ManifestEntry {
                composite: format!("{i:05}_composite.png").into(),
                background: format!("{i:05}_background.png").into(),
                mask: format!("{i:05}_mask.png").into(),
                style_family: s.style_family.map_or("user", |f| f.as_str()).to_string(),
                seed: s.seed,
            };
            save_rgb(&s.composite, &dir.join(&e.composite))?;
            save_rgb(&s.background, &dir.join(&e.background))?;
            save_mask(&s.mask, &dir.join(&e.mask))?;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let path = dir.join("manifest.tsv");
    write_manifest(&entries, &path)?;
    Ok(path)
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            e.composite.display(),
            e.background.display(),
            e.mask.display(),
            e.style_family,
            e.seed
        )
        .expect("write to memory");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::Validation(format!("{}:{}: expected 5 tab-separated fields", path.display(), n + 1)));
            }
            let seed = f[4]
                .parse()
                .map_err(|_| Error::Validation(format!("{}:{}: bad seed {:?}", path.display(), n + 1, f[4])))?;
            Ok(ManifestEntry {
                composite: f[0].into(),
                background: f[1].into(),
                mask: f[2].into(),
                style_family: f[3].to_string(),
                seed,
            })
        })
        .collect()
}

/// Loads every sample listed in a manifest, resolving paths against its directory.
pub fn load_manifest<T: Scalar>(path: &Path) -> Result<Vec<CompositeSample<T>>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .par_iter()
        .map(|e| {
            let mut s = load_sample(&dir.join(&e.composite), &dir.join(&e.background), &dir.join(&e.mask))?;
            s.style_family = e.style_family.parse().ok();
            s.seed = e.seed;
            Ok(s)
        })
        .collect()
}

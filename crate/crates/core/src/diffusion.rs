//! Variance schedule, forward noising, clean-latent recovery and the
//! strength-controlled denoising loop.

use phdiff_autograd::{Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step variance tables. Step `t` runs over `1..=T`; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule<T> {
    t_default: usize,
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

/// How `denoise_step` moves from `t` to `t - 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    /// Zero posterior noise, DDIM-style update through the predicted clean latent.
    #[default]
    Ddim,
    /// DDPM posterior mean plus posterior-variance noise.
    Ddpm,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerMode::Ddim),
            "ddpm" => Ok(SamplerMode::Ddpm),
            other => Err(Error::Parameter(format!("unknown sampler '{other}' (ddim|ddpm)"))),
        }
    }
}

/// Linear betas from `beta_start` to `beta_end` over `t_total` steps.
pub fn make_schedule<T: Scalar>(t_total: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule<T>> {
    if t_total == 0 {
        return Err(Error::Parameter("T must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&beta_start) {
        return Err(Error::Parameter(format!("beta_start={beta_start} must lie in [0, 1)")));
    }
    if !(beta_start..1.0).contains(&beta_end) {
        return Err(Error::Parameter(format!(
            "beta_end={beta_end} must lie in [beta_start={beta_start}, 1)"
        )));
    }
    let betas = (0..t_total)
        .map(|i| {
            if t_total == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_total - 1) as f64
            }
        })
        .collect();
    DiffusionSchedule::from_betas(betas)
}

impl<T: Scalar> DiffusionSchedule<T> {
    /// Builds the derived tables from explicit betas in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Parameter("schedule needs at least one beta".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::Parameter(format!("beta {b} outside [0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut running = 1.0f64;
        for b in &betas {
            running *= 1.0 - b;
            alpha_bars.push(T::lit(running));
        }
        Ok(Self {
            t_default: betas.len(),
            alphas: betas.iter().map(|b| T::one() - T::lit(*b)).collect(),
            betas: betas.into_iter().map(T::lit).collect(),
            alpha_bars,
        })
    }

    pub fn t_default(&self) -> usize {
        self.t_default
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_default {
            return Err(Error::Parameter(format!("step {t} outside 1..={}", self.t_default)));
        }
        Ok(())
    }

    /// Uniform draw from `1..=T`.
    pub fn sample_step(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(1..=self.t_default)
    }
}

/// Latent `z` at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<T> {
    pub z: Tensor<T>,
    pub t: usize,
}

/// `√ᾱ_t · z0 + √(1−ᾱ_t) · eps`.
pub fn forward_noise<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &DiffusionSchedule<T>) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    z0.expect_same_shape(eps).map_err(|e| Error::Shape(e.to_string()))?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(z0.zip_map(eps, |z, e| a * z + b * e)?)
}

/// `(z_t − √(1−ᾱ_t) · eps_pred) / √ᾱ_t`.
pub fn predict_x0<T: Scalar>(z_t: &Tensor<T>, eps_pred: &Tensor<T>, t: usize, sched: &DiffusionSchedule<T>) -> Result<Tensor<T>> {
    let (a, b) = x0_coefficients(t, sched)?;
    z_t.expect_same_shape(eps_pred).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(z_t.zip_map(eps_pred, |z, e| (z - b * e) / a)?)
}

fn x0_coefficients<T: Scalar>(t: usize, sched: &DiffusionSchedule<T>) -> Result<(T, T)> {
    if t > sched.t_default() {
        return Err(Error::Parameter(format!("step {t} outside 0..={}", sched.t_default())));
    }
    let ab = sched.alpha_bar(t);
    if ab <= T::zero() {
        return Err(Error::Singularity(format!("alpha_bar({t}) = 0")));
    }
    Ok((ab.sqrt(), (T::one() - ab).sqrt()))
}

/// Differentiable [`predict_x0`] on the tape.
pub fn predict_x0_var<T: Scalar>(g: &mut Graph<T>, z_t: Var, eps_pred: Var, t: usize, sched: &DiffusionSchedule<T>) -> Result<Var> {
    let (a, b) = x0_coefficients(t, sched)?;
    let scaled = g.scale(eps_pred, -b);
    let num = g.add(z_t, scaled);
    Ok(g.scale(num, T::one() / a))
}

/// Number of denoising steps for a strength: `round_half_up(strength · T)`.
pub fn steps_from_strength(strength: f64, t_default: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Parameter(format!("strength {strength} outside [0, 1]")));
    }
    Ok((strength * t_default as f64 + 0.5).floor() as usize)
}

/// One step `t → t−1`. Deterministic DDIM update when `noise` is `None`,
/// DDPM posterior sample otherwise.
pub fn denoise_step<T: Scalar>(
    state: &LatentState<T>,
    eps_pred: &Tensor<T>,
    sched: &DiffusionSchedule<T>,
    noise: Option<&Tensor<T>>,
) -> Result<LatentState<T>> {
    let t = state.t;
    if t == 0 {
        return Err(Error::StepUnderflow);
    }
    let x0 = predict_x0(&state.z, eps_pred, t, sched)?;
    let ab_prev = sched.alpha_bar(t - 1);
    let z = match noise {
        None => {
            let (a, b) = (ab_prev.sqrt(), (T::one() - ab_prev).sqrt());
            x0.zip_map(eps_pred, |x, e| a * x + b * e)?
        }
        Some(n) => {
            n.expect_same_shape(&state.z).map_err(|e| Error::Shape(e.to_string()))?;
            let ab = sched.alpha_bar(t);
            let one_minus = T::one() - ab;
            if one_minus <= T::epsilon() {
                // Noise-free schedule up to t: the posterior collapses onto x0.
                x0
            } else {
                let beta = sched.beta(t);
                let c_x0 = ab_prev.sqrt() * beta / one_minus;
                let c_zt = sched.alpha(t).sqrt() * (T::one() - ab_prev) / one_minus;
                let sigma = (beta * (T::one() - ab_prev) / one_minus).max(T::zero()).sqrt();
                let mean = x0.zip_map(&state.z, |x, z| c_x0 * x + c_zt * z)?;
                mean.zip_map(n, |m, e| m + sigma * e)?
            }
        }
    };
    Ok(LatentState { z, t: t - 1 })
}

/// Standard-normal tensor from a seeded stream; `sample` draws its start noise this way.
pub fn gaussian<T: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::lit(v)
    })
}

/// The noise `sample` injects at its first step for a given seed.
pub fn initial_noise<T: Scalar>(seed: u64, shape: &[usize]) -> Tensor<T> {
    gaussian(&mut ChaCha8Rng::seed_from_u64(seed), shape)
}

/// Noises `z0` to `T' = steps_from_strength(strength)` and runs `T'`
/// denoising steps. `guidance_fn(z_t, t)` produces whatever the denoiser
/// needs at that step; `denoiser_fn(z_t, t, &guidance)` returns the noise
/// estimate.
#[allow(clippy::too_many_arguments)]
pub fn sample<T, G>(
    z0: &Tensor<T>,
    strength: f64,
    sched: &DiffusionSchedule<T>,
    mut guidance_fn: impl FnMut(&Tensor<T>, usize) -> Result<G>,
    mut denoiser_fn: impl FnMut(&Tensor<T>, usize, &G) -> Result<Tensor<T>>,
    rng_seed: u64,
    mode: SamplerMode,
) -> Result<Tensor<T>>
where
    T: Scalar,
{
    let steps = steps_from_strength(strength, sched.t_default())?;
    if steps == 0 {
        return Ok(z0.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let eps = gaussian(&mut rng, z0.shape());
    let mut state = LatentState { z: forward_noise(z0, steps, &eps, sched)?, t: steps };
    while state.t > 0 {
        let t = state.t;
        let guidance = guidance_fn(&state.z, t)?;
        let eps_pred = denoiser_fn(&state.z, t, &guidance)?;
        if eps_pred.shape() != state.z.shape() {
            return Err(Error::Shape(format!(
                "denoiser returned {:?} for latent {:?}",
                eps_pred.shape(),
                state.z.shape()
            )));
        }
        let noise = match mode {
            SamplerMode::Ddim => None,
            SamplerMode::Ddpm => Some(gaussian(&mut rng, z0.shape())),
        };
        state = denoise_step(&state, &eps_pred, sched, noise.as_ref())?;
        if !state.z.all_finite() {
            return Err(Error::NumericDivergence { step: t, detail: "non-finite latent".into() });
        }
    }
    Ok(state.z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_noise_schedule_keeps_alpha_bar_one() {
        let s = make_schedule::<f64>(4, 0.0, 0.0).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_betas_running_product() {
        let s = make_schedule::<f64>(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
        for (a, b) in s.alphas().iter().zip(s.betas()) {
            assert_eq!(*a, 1.0 - b);
        }
    }

    #[test]
    fn default_thousand_step_schedule_against_independent_product() {
        let s = make_schedule::<f64>(1000, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
            assert!((s.alpha_bars()[i] - prod).abs() < 1e-12);
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(*s.alpha_bars().last().unwrap() < 0.01);
    }

    #[test]
    fn schedule_bounds_are_validated() {
        assert!(matches!(make_schedule::<f64>(0, 1e-4, 0.02), Err(Error::Parameter(_))));
        let err = make_schedule::<f64>(10, 0.3, 0.1).unwrap_err();
        assert!(err.to_string().contains("beta_end"), "{err}");
        let err = make_schedule::<f64>(10, 1e-4, 1.0).unwrap_err();
        assert!(err.to_string().contains("beta_end"), "{err}");
        let err = make_schedule::<f64>(10, -0.1, 0.1).unwrap_err();
        assert!(err.to_string().contains("beta_start"), "{err}");
    }

    #[test]
    fn forward_noise_hand_values() {
        // alpha_bar(1) = 0.25.
        let s = DiffusionSchedule::<f64>::from_betas(vec![0.75]).unwrap();
        let z = forward_noise(&t1(1.0), 1, &t1(1.0), &s).unwrap();
        assert!((z.data()[0] - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((z.data()[0] - 1.3660).abs() < 1e-4);
        let zero = forward_noise(&t1(2.0), 1, &t1(0.0), &s).unwrap();
        assert_eq!(zero.data()[0], 1.0);
        let back = predict_x0(&t1(1.3660), &t1(1.0), 1, &s).unwrap();
        assert!((back.data()[0] - 1.0).abs() < 1e-4);
        let no_eps = predict_x0(&t1(1.3660), &t1(0.0), 1, &s).unwrap();
        assert!((no_eps.data()[0] - 1.3660 / 0.5).abs() < 1e-12);
    }

    #[test]
    fn forward_noise_checks_shapes_and_steps() {
        let s = make_schedule::<f64>(4, 1e-4, 0.02).unwrap();
        let z = Tensor::zeros(&[1, 2, 2]);
        let e = Tensor::zeros(&[1, 2, 3]);
        assert!(matches!(forward_noise(&z, 1, &e, &s), Err(Error::Shape(_))));
        assert!(matches!(forward_noise(&z, 5, &z, &s), Err(Error::Parameter(_))));
    }

    #[test]
    fn strength_mapping() {
        assert_eq!(steps_from_strength(0.7, 50).unwrap(), 35);
        assert_eq!(steps_from_strength(1.0, 50).unwrap(), 50);
        assert_eq!(steps_from_strength(0.0, 50).unwrap(), 0);
        assert!(steps_from_strength(1.01, 50).is_err());
        assert!(steps_from_strength(-0.1, 50).is_err());
    }

    #[test]
    fn last_step_collapses_to_x0() {
        let s = make_schedule::<f64>(3, 0.1, 0.2).unwrap();
        let z0 = Tensor::new(&[1, 1, 2], vec![0.3, -0.7]).unwrap();
        let eps = Tensor::new(&[1, 1, 2], vec![1.1, 0.4]).unwrap();
        let z1 = forward_noise(&z0, 1, &eps, &s).unwrap();
        let state = LatentState { z: z1.clone(), t: 1 };
        let next = denoise_step(&state, &eps, &s, None).unwrap();
        let x0 = predict_x0(&z1, &eps, 1, &s).unwrap();
        assert_eq!(next.t, 0);
        assert!(next.z.max_abs_diff(&x0) < 1e-15);
        assert!(next.z.max_abs_diff(&z0) < 1e-12);
        let under = LatentState { z: z1, t: 0 };
        assert!(matches!(denoise_step(&under, &eps, &s, None), Err(Error::StepUnderflow)));
    }

    #[test]
    fn posterior_step_matches_hand_formula() {
        // T=2, betas 0.1, 0.3. Oracle written directly from the DDPM posterior.
        let s = DiffusionSchedule::<f64>::from_betas(vec![0.1, 0.3]).unwrap();
        let (z2, eps, n) = (0.8, -0.4, 0.25);
        let ab1: f64 = 0.9;
        let ab2: f64 = 0.9 * 0.7;
        let x0 = (z2 - (1.0f64 - ab2).sqrt() * eps) / ab2.sqrt();
        let mean = ab1.sqrt() * 0.3 / (1.0 - ab2) * x0 + 0.7f64.sqrt() * (1.0 - ab1) / (1.0 - ab2) * z2;
        let var: f64 = 0.3 * (1.0 - ab1) / (1.0 - ab2);
        let want = mean + var.sqrt() * n;
        let state = LatentState { z: t1(z2), t: 2 };
        let got = denoise_step(&state, &t1(eps), &s, Some(&t1(n))).unwrap();
        assert!((got.z.data()[0] - want).abs() < 1e-12);
        let ddim = ab1.sqrt() * x0 + (1.0 - ab1).sqrt() * eps;
        let got = denoise_step(&state, &t1(eps), &s, None).unwrap();
        assert!((got.z.data()[0] - ddim).abs() < 1e-12);
    }

    #[test]
    fn vanishing_betas_freeze_dynamics() {
        let s = make_schedule::<f64>(10, 1e-10, 1e-10).unwrap();
        let z = Tensor::new(&[1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let zero = Tensor::zeros(&[1, 1, 3]);
        let st = LatentState { z: z.clone(), t: 5 };
        for noise in [None, Some(&zero)] {
            let next = denoise_step(&st, &zero, &s, noise).unwrap();
            assert!(next.z.max_abs_diff(&z) < 1e-6);
        }
    }

    #[test]
    fn sample_strength_zero_is_identity() {
        let s = make_schedule::<f64>(50, 1e-4, 0.02).unwrap();
        let z0 = Tensor::from_fn(&[2, 4, 4], |i| i as f64 * 0.01);
        let out = sample(&z0, 0.0, &s, |_, _| Ok(()), |_, _, _| unreachable!(), 3, SamplerMode::Ddim).unwrap();
        assert_eq!(out, z0);
    }

    #[test]
    fn sample_with_exact_noise_oracle_recovers_input() {
        let s = make_schedule::<f64>(50, 1e-4, 0.02).unwrap();
        let z0 = Tensor::from_fn(&[4, 4, 4], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);
        let seed = 11;
        let eps = initial_noise::<f64>(seed, z0.shape());
        let out = sample(&z0, 1.0, &s, |_, _| Ok(()), |_, _, _| Ok(eps.clone()), seed, SamplerMode::Ddim).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-4);
    }

    #[test]
    fn sample_reports_divergence_step() {
        let s = make_schedule::<f64>(50, 1e-4, 0.02).unwrap();
        let z0 = Tensor::zeros(&[1, 2, 2]);
        let err = sample(
            &z0,
            0.2,
            &s,
            |_, _| Ok(()),
            |z, t, _| Ok(if t == 7 { z.map(|_| f64::NAN) } else { z.clone() }),
            1,
            SamplerMode::Ddim,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NumericDivergence { step: 7, .. }), "{err}");
    }
}

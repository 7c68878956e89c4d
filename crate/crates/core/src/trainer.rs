//! Backbone pretraining, adapter training, and the gradient-check harness.

use std::collections::VecDeque;
use std::io::Write;

use phdiff_autograd::check::rel_err;
use phdiff_autograd::{Graph, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecMode};
use crate::datagen::CompositeSample;
use crate::def_fusion::AblationFlags;
use crate::diffusion::{forward_noise, gaussian};
use crate::error::{Error, Result};
use crate::losses::{masked_pool, mse_var, training_losses, LossBreakdown, LossFlags, LossWeights, STYLE_LEVEL};
use crate::model::{ModelState, PreparedSample};
use crate::nn::ParamStore;

/// Adam over a fixed list of parameter stores.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<Vec<T>>>,
    v: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(stores: &[&ParamStore<T>], lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = || -> Vec<Vec<Vec<T>>> {
            stores.iter().map(|s| s.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect()).collect()
        };
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; `grads[s][p]` matches parameter `p` of store `s`.
    pub fn update(&mut self, stores: &mut [&mut ParamStore<T>], grads: &[Vec<Tensor<T>>]) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = T::lit(self.lr * c2.sqrt() / c1);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let eps = T::lit(self.eps * c2.sqrt());
        for (si, store) in stores.iter_mut().enumerate() {
            for (pi, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
                let g = grads[si][pi].data();
                let (m, v) = (&mut self.m[si][pi], &mut self.v[si][pi]);
                let w = store.get_mut(id).data_mut();
                for k in 0..w.len() {
                    m[k] = b1t * m[k] + (T::one() - b1t) * g[k];
                    v[k] = b2t * v[k] + (T::one() - b2t) * g[k] * g[k];
                    w[k] -= lr * m[k] / (v[k].sqrt() + eps);
                }
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<Tensor<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().flat_map(|t| t.data()).map(|v| v.as_f64() * v.as_f64()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for t in grads.iter_mut().flatten() {
            *t = t.scale(s);
        }
    }
    norm
}

fn accumulate<T: Scalar>(acc: &mut Option<Vec<Vec<Tensor<T>>>>, grads: Vec<Vec<Tensor<T>>>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (ga, gb) in a.iter_mut().zip(grads) {
                for (x, y) in ga.iter_mut().zip(gb) {
                    *x = x.add(&y).expect("matching gradient shapes");
                }
            }
        }
    }
}

fn scale_grads<T: Scalar>(grads: &mut [Vec<Tensor<T>>], s: f64) {
    for t in grads.iter_mut().flatten() {
        *t = t.scale(T::lit(s));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub max_steps: usize,
    /// Keep going at least this long even once the gate is met.
    pub min_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Share of training draws taken from plain paintings; the rest are composites.
    pub painting_fraction: f64,
    pub val_items: usize,
    pub eval_every: usize,
    /// Stop once validation MSE falls below `gate × (step-0 value)`.
    pub gate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            min_steps: 500,
            batch_size: 4,
            learning_rate: 1e-3,
            painting_fraction: 0.7,
            val_items: 16,
            eval_every: 25,
            gate: 0.9,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub val_initial: f64,
    pub val_final: f64,
    pub gate_met: bool,
    /// `(step, validation MSE)` at every evaluation.
    pub history: Vec<(usize, f64)>,
}

struct ValItem<T> {
    z0: Tensor<T>,
    t: usize,
    eps: Tensor<T>,
}

fn validation_mse<T: Scalar>(state: &ModelState<T>, items: &[ValItem<T>]) -> Result<f64> {
    let errs: Vec<f64> = items
        .par_iter()
        .map(|it| {
            let z_t = forward_noise(&it.z0, it.t, &it.eps, &state.schedule)?;
            let pred = state.denoiser.predict_unguided(&z_t, it.t)?;
            Ok(crate::losses::noise_loss(&it.eps, &pred)?.as_f64())
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

fn denoiser_grads<T: Scalar>(state: &ModelState<T>, z0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
    let z_t = forward_noise(z0, t, eps, &state.schedule)?;
    let mut g = Graph::new();
    let p = state.denoiser.params().bind(&mut g, true);
    let z = g.constant(z_t);
    let pred = state.denoiser.forward(&mut g, &p, z, t)?;
    let target = g.constant(eps.clone());
    let loss = mse_var(&mut g, pred, target);
    let l = g.item(loss).as_f64();
    g.backward(loss);
    Ok((l, p.grads(&g)))
}

/// Trains the denoiser alone on the plain noise objective. Learned codecs are
/// fitted first. The trailing `val_items` samples are held out.
pub fn pretrain_backbone<T: Scalar>(
    dataset: &[CompositeSample<T>],
    state: &mut ModelState<T>,
    cfg: &PretrainConfig,
    log: &mut dyn Write,
) -> Result<PretrainReport> {
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Parameter("batch_size and eval_every must be positive".into()));
    }
    if dataset.len() <= cfg.val_items {
        return Err(Error::Parameter(format!(
            "pretraining needs more than {} samples, got {}",
            cfg.val_items,
            dataset.len()
        )));
    }
    if state.config.codec_mode == CodecMode::Learned {
        let images: Vec<Tensor<T>> = dataset.iter().flat_map(|s| [s.background.clone(), s.composite.clone()]).collect();
        state.codec = Codec::fit(state.codec.config().clone(), &images)?;
    }
    let (train, val) = dataset.split_at(dataset.len() - cfg.val_items);
    let encode = |imgs: Vec<&Tensor<T>>| -> Result<Vec<Tensor<T>>> { imgs.par_iter().map(|i| state.codec.encode(i)).collect() };
    let paintings = encode(train.iter().map(|s| &s.background).collect())?;
    let composites = encode(train.iter().map(|s| &s.composite).collect())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_latents = encode(val.iter().flat_map(|s| [&s.background, &s.composite]).collect())?;
    let val_items: Vec<ValItem<T>> = val_latents
        .into_iter()
        .map(|z0| {
            let t = state.schedule.sample_step(&mut rng);
            let eps = gaussian(&mut rng, z0.shape());
            ValItem { z0, t, eps }
        })
        .collect();

    let mut adam = Adam::new(&[state.denoiser.params()], cfg.learning_rate, 0.9, 0.999);
    let val_initial = validation_mse(state, &val_items)?;
    let mut history = vec![(0, val_initial)];
    let mut val_final = val_initial;
    writeln!(log, "pretrain step=0 val_mse={val_initial:.6}").ok();
    let steps_per_epoch = (train.len() / cfg.batch_size).max(1);
    let (mut epoch_sum, mut prev_epoch) = (0.0, f64::INFINITY);
    let mut step = 0;
    let mut gate_met = false;
    while step < cfg.max_steps {
        let draws: Vec<(Tensor<T>, usize, Tensor<T>)> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..train.len());
                let z0 = if rng.random_bool(cfg.painting_fraction) { &paintings[i] } else { &composites[i] };
                let t = state.schedule.sample_step(&mut rng);
                let eps = gaussian(&mut rng, z0.shape());
                (z0.clone(), t, eps)
            })
            .collect();
        let results: Vec<(f64, Vec<Tensor<T>>)> =
            draws.par_iter().map(|(z0, t, eps)| denoiser_grads(state, z0, *t, eps)).collect::<Result<_>>()?;
        let mut acc = None;
        let mut loss = 0.0;
        for (l, g) in results {
            loss += l;
            accumulate(&mut acc, vec![g]);
        }
        loss /= cfg.batch_size as f64;
        step += 1;
        if !loss.is_finite() {
            return Err(Error::NumericDivergence { step, detail: format!("pretraining loss {loss}") });
        }
        let mut grads = acc.expect("non-empty batch");
        scale_grads(&mut grads, 1.0 / cfg.batch_size as f64);
        clip_global_norm(&mut grads, cfg.clip_norm);
        adam.update(&mut [state.denoiser.params_mut()], &grads);
        writeln!(log, "pretrain step={step} l_ldm={loss:.6}").ok();

        epoch_sum += loss;
        if step % steps_per_epoch == 0 {
            let mean = epoch_sum / steps_per_epoch as f64;
            if mean >= prev_epoch {
                log::warn!("pretraining loss did not decrease over epoch ending at step {step} ({prev_epoch:.5} -> {mean:.5})");
            }
            prev_epoch = mean;
            epoch_sum = 0.0;
        }
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            val_final = validation_mse(state, &val_items)?;
            history.push((step, val_final));
            writeln!(log, "pretrain step={step} val_mse={val_final:.6}").ok();
            gate_met = val_final < cfg.gate * val_initial;
            if gate_met && step >= cfg.min_steps {
                break;
            }
        }
    }
    Ok(PretrainReport { steps: step, val_initial, val_final, gate_met, history })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    /// Paintings from earlier batches kept as extra contrastive negatives.
    pub replay: usize,
    /// Stop early after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub weights: LossWeights,
    pub losses: LossFlags,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 2,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: 1.0,
            replay: 4,
            max_steps: None,
            seed: 0,
            weights: LossWeights::default(),
            losses: LossFlags::default(),
            ablation: AblationFlags::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean loss components per epoch.
    pub epochs: Vec<LossBreakdown>,
    pub frozen_digest: String,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in parts {
        m.l_ldm += b.l_ldm / n;
        m.l_adain += b.l_adain / n;
        m.l_cl += b.l_cl / n;
        m.l_con += b.l_con / n;
        m.total += b.total / n;
    }
    m
}

/// Updates only adapter, fusion and projection head. Writes one log line per
/// optimizer step; `t=` lists the step drawn for each batch element.
pub fn train_adapter<T: Scalar>(
    dataset: &[CompositeSample<T>],
    state: &mut ModelState<T>,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be positive".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Parameter("training needs at least one sample".into()));
    }
    cfg.weights.validate()?;
    let frozen = state.frozen_digest();
    let prepared: Vec<PreparedSample<T>> = dataset.par_iter().map(|s| state.prepare(s)).collect::<Result<_>>()?;
    let mut adam = Adam::new(&[state.adapter.params(), state.def.params(), state.head.params()], cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut replay: VecDeque<(usize, Tensor<T>)> = VecDeque::new();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epochs = Vec::new();
    let mut step = 0;
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut parts = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let draws: Vec<(usize, usize, Tensor<T>, Vec<Tensor<T>>)> = batch
                .iter()
                .map(|&i| {
                    let t = state.schedule.sample_step(&mut rng);
                    let eps = gaussian(&mut rng, prepared[i].z0.shape());
                    let negs = batch
                        .iter()
                        .filter(|&&j| j != i)
                        .map(|&j| prepared[j].bg_pooled.clone())
                        .chain(replay.iter().filter(|(j, _)| *j != i).map(|(_, p)| p.clone()))
                        .collect();
                    (i, t, eps, negs)
                })
                .collect();
            step += 1;
            let st: &ModelState<T> = state;
            let results: Vec<(LossBreakdown, Vec<Vec<Tensor<T>>>)> = draws
                .par_iter()
                .map(|(i, t, eps, negs)| {
                    let pass = training_losses(st, &prepared[*i], *t, eps, negs, &cfg.weights, cfg.losses, cfg.ablation)
                        .map_err(|e| match e {
                            Error::NonFinite { component } => {
                                Error::NumericDivergence { step, detail: format!("non-finite {component} loss") }
                            }
                            other => other,
                        })?;
                    let b = pass.breakdown;
                    Ok((b, pass.gradients()))
                })
                .collect::<Result<_>>()?;
            let mut acc = None;
            let mut bds = Vec::new();
            for (b, g) in results {
                bds.push(b);
                accumulate(&mut acc, g);
            }
            let mean = mean_breakdown(&bds);
            let ts: Vec<String> = draws.iter().map(|d| d.1.to_string()).collect();
            writeln!(
                log,
                "step={step} t={} l_ldm={:.6} l_adain={:.6} l_cl={:.6} l_con={:.6} total={:.6}",
                ts.join(","),
                mean.l_ldm,
                mean.l_adain,
                mean.l_cl,
                mean.l_con,
                mean.total
            )
            .ok();
            let mut grads = acc.expect("non-empty batch");
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::NumericDivergence { step, detail: format!("gradient norm {norm}; {}", mean.log_line(step, draws[0].1)) });
            }
            adam.update(&mut [state.adapter.params_mut(), state.def.params_mut(), state.head.params_mut()], &grads);
            parts.extend(bds);
            for &i in batch {
                replay.push_back((i, prepared[i].bg_pooled.clone()));
                while replay.len() > cfg.replay {
                    replay.pop_front();
                }
            }
        }
        epochs.push(mean_breakdown(&parts));
    }
    let after = state.frozen_digest();
    if after != frozen {
        return Err(Error::State(format!("frozen parameters changed during adapter training ({frozen} -> {after})")));
    }
    state.ablation = cfg.ablation;
    Ok(TrainReport { steps: step, epochs, frozen_digest: after })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub n_probes: usize,
    pub h: f64,
    pub seed: u64,
    /// Relative-error denominator floor.
    pub floor: f64,
    /// Multiplies analytic gradients by `1 + corrupt`; harness self-test only.
    pub corrupt: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { n_probes: 10, h: 3e-3, seed: 0, floor: 1e-6, corrupt: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: Vec<Probe>,
}

/// Probe groups: adapter, fusion transformers, fusion FC, projection head.
fn probe_groups(state: &ModelState<f64>) -> Vec<Vec<(usize, usize)>> {
    let mut groups = vec![Vec::new(); 4];
    for (si, store) in [state.adapter.params(), state.def.params(), state.head.params()].into_iter().enumerate() {
        for (pi, (name, _)) in store.iter().enumerate() {
            let gi = match si {
                0 => 0,
                1 if name.contains(".fc.") => 2,
                1 => 1,
                _ => 3,
            };
            groups[gi].push((si, pi));
        }
    }
    groups
}

/// Fourth-order central differences on randomly chosen trainable scalars against the
/// analytic gradient of the total training loss, at fixed `t`, noise and
/// negatives. Probes cycle through adapter, fusion transformer, fusion FC and
/// projection head parameters.
pub fn grad_check(
    state: &ModelState<f64>,
    sample: &CompositeSample<f64>,
    negative_paintings: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let prep = state.prepare(sample)?;
    let negs: Vec<Tensor<f64>> = negative_paintings
        .iter()
        .map(|p| masked_pool(&state.backbone.pyramid(p)?[STYLE_LEVEL], None))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t = state.schedule.sample_step(&mut rng);
    let eps = gaussian(&mut rng, prep.z0.shape());
    let w = LossWeights::default();
    let run = |st: &ModelState<f64>| training_losses(st, &prep, t, &eps, &negs, &w, LossFlags::default(), st.ablation);
    let grads = run(state)?.gradients();
    let groups = probe_groups(state);
    let mut probe_state = state.clone();
    let mut probes = Vec::with_capacity(cfg.n_probes);
    for k in 0..cfg.n_probes {
        let group = &groups[k % groups.len()];
        let (si, pi) = group[rng.random_range(0..group.len())];
        let len = grads[si][pi].len();
        let index = rng.random_range(0..len);
        let analytic = grads[si][pi].data()[index] * (1.0 + cfg.corrupt);
        let mut eval = |delta: f64| -> Result<f64> {
            let store = match si {
                0 => probe_state.adapter.params_mut(),
                1 => probe_state.def.params_mut(),
                _ => probe_state.head.params_mut(),
            };
            let id = store.ids().nth(pi).expect("probe id");
            let orig = store.get(id).data()[index];
            store.get_mut(id).data_mut()[index] = orig + delta;
            let l = run(&probe_state).map(|p| p.breakdown.total);
            let store = match si {
                0 => probe_state.adapter.params_mut(),
                1 => probe_state.def.params_mut(),
                _ => probe_state.head.params_mut(),
            };
            store.get_mut(id).data_mut()[index] = orig;
            l
        };
        let h = cfg.h;
        let numeric = (8.0 * (eval(h)? - eval(-h)?) - (eval(2.0 * h)? - eval(-2.0 * h)?)) / (12.0 * h);
        let store = match si {
            0 => state.adapter.params(),
            1 => state.def.params(),
            _ => state.head.params(),
        };
        let param = store.iter().nth(pi).expect("probe param").0.to_string();
        probes.push(Probe { param, index, analytic, numeric, rel_err: rel_err(analytic, numeric, cfg.floor) });
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, probes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, make_background, StyleFamily};
    use crate::model::{ModelConfig, Profile};

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamStore::<f64>::new();
        ps.push("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut adam = Adam::new(&[&ps], 0.1, 0.9, 0.999);
        let g = vec![vec![Tensor::new(&[3], vec![4.0, -0.5, 0.0]).unwrap()]];
        adam.update(&mut [&mut ps], &g);
        let w = ps.iter().next().unwrap().1.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = vec![vec![Tensor::new(&[2], vec![3.0, 4.0]).unwrap()], vec![Tensor::new(&[1], vec![12.0]).unwrap()]];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 13.0).abs() < 1e-12);
        let after: f64 = g.iter().flatten().flat_map(|t| t.data()).map(|v| v * v).sum();
        assert!((after.sqrt() - 1.0).abs() < 1e-12);
        let mut small = vec![vec![Tensor::new(&[1], vec![0.5]).unwrap()]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0].data(), &[0.5]);
    }

    fn quadrant_sample() -> CompositeSample<f64> {
        crate::datagen::quadrant_sample(4, 32).unwrap()
    }

    #[test]
    fn adapter_training_respects_freeze_and_zero_lr() {
        let mut state = ModelState::<f64>::new(ModelConfig::for_profile(Profile::Tiny, 2)).unwrap();
        let data = generate::<f64>(4, 32, 9);
        let cfg = TrainConfig { epochs: 1, max_steps: Some(2), seed: 3, ..TrainConfig::default() };
        let frozen = state.frozen_digest();
        let mut log = Vec::new();
        let rep = train_adapter(&data, &mut state, &cfg, &mut log).unwrap();
        assert_eq!(rep.steps, 2);
        assert_eq!(state.frozen_digest(), frozen);
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("step=1 t="));
        let trained = state.trainable_digest();
        let zero = TrainConfig { learning_rate: 0.0, ..cfg.clone() };
        train_adapter(&data, &mut state, &zero, &mut Vec::new()).unwrap();
        assert_eq!(state.trainable_digest(), trained);
    }

    #[test]
    fn adapter_training_is_reproducible() {
        let data = generate::<f64>(4, 32, 9);
        let cfg = TrainConfig { epochs: 1, max_steps: Some(2), seed: 5, ..TrainConfig::default() };
        let run = || {
            let mut s = ModelState::<f64>::new(ModelConfig::for_profile(Profile::Tiny, 2)).unwrap();
            train_adapter(&data, &mut s, &cfg, &mut Vec::new()).unwrap();
            s.trainable_digest()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pretraining_starts_near_unit_mse_and_improves() {
        let mut state = ModelState::<f64>::new(ModelConfig::for_profile(Profile::Tiny, 4)).unwrap();
        let data = generate::<f64>(24, 32, 1);
        let cfg = PretrainConfig { max_steps: 30, val_items: 4, eval_every: 10, seed: 2, ..PretrainConfig::default() };
        let rep = pretrain_backbone(&data, &mut state, &cfg, &mut Vec::new()).unwrap();
        assert!((rep.val_initial - 1.0).abs() < 0.15, "step-0 mse {}", rep.val_initial);
        assert!(rep.val_final < rep.val_initial);
        assert_eq!(state.trainable_digest(), ModelState::<f64>::new(ModelConfig::for_profile(Profile::Tiny, 4)).unwrap().trainable_digest());
    }

    #[test]
    fn grad_check_passes_and_detects_corruption() {
        let mut state = ModelState::<f64>::new(ModelConfig::for_profile(Profile::Tiny, 6)).unwrap();
        state.jitter_trainable(7, 0.05);
        let sample = quadrant_sample();
        let negs = vec![make_background::<f64>(8, StyleFamily::Waves, 32)];
        let cfg = GradCheckConfig { n_probes: 12, seed: 1, ..GradCheckConfig::default() };
        let rep = grad_check(&state, &sample, &negs, &cfg).unwrap();
        assert_eq!(rep.probes.len(), 12);
        assert!(rep.max_rel_err < 1e-4, "{:#?}", rep.probes);
        for prefix in ["adapter.", "def.", "head."] {
            assert!(rep.probes.iter().any(|p| p.param.starts_with(prefix)));
        }
        assert!(rep.probes.iter().any(|p| p.param.contains(".fc.")));
        assert!(rep.probes.iter().any(|p| p.param.contains(".ta.") || p.param.contains(".tu.")));
        let bad = grad_check(&state, &sample, &negs, &GradCheckConfig { corrupt: 0.1, ..cfg.clone() }).unwrap();
        assert!(bad.max_rel_err > 0.05);
        assert_eq!(grad_check(&state, &sample, &negs, &cfg).unwrap(), rep);
    }
}

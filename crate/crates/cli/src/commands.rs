use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use phdiff::checkpoint::{load_state, save_state};
use phdiff::datagen::{generate, load_manifest, load_mask, load_rgb, quadrant_sample, save_gray, save_rgb, write_dataset, CompositeSample};
use phdiff::def_fusion::{AblationFlags, AttentionRecorder, Mask};
use phdiff::diffusion::SamplerMode;
use phdiff::evaluation::{bt_fit, content_distance, read_records, style_distance, write_scores};
use phdiff::losses::LossFlags;
use phdiff::trainer::{grad_check, pretrain_backbone, train_adapter, GradCheckConfig, PretrainConfig, TrainConfig};
use phdiff::{Error, HarmonizeOptions, ModelConfig, ModelState, Profile, Tensor};

use crate::config::{pick, FileConfig};
use crate::{Cli, Command, Global};

/// Global options after merging flags, config file and defaults.
struct Run {
    workdir: PathBuf,
    file: FileConfig,
    profile: Profile,
    /// Whether the profile was asked for rather than defaulted.
    profile_given: bool,
    seed: u64,
    strength: f64,
    sampler: SamplerMode,
    no_cl: bool,
    no_adain: bool,
    no_ta: bool,
    no_tu: bool,
}

impl Run {
    fn new(g: Global) -> Result<Self> {
        let file = match &g.config {
            Some(p) => FileConfig::load(&g.workdir.join(p))?,
            None => FileConfig::default(),
        };
        let strength = pick(g.strength, &file, "strength", phdiff::model::DEFAULT_STRENGTH)?;
        if !(0.0..=1.0).contains(&strength) {
            bail!("--strength {strength} is outside [0, 1]");
        }
        Ok(Self {
            profile_given: g.profile.is_some() || file.get::<Profile>("profile")?.is_some(),
            profile: pick(g.profile, &file, "profile", Profile::Desk)?,
            seed: pick(g.seed, &file, "seed", 0)?,
            strength,
            sampler: pick(g.sampler, &file, "sampler", SamplerMode::Ddim)?,
            no_cl: g.no_cl || file.flag("no_cl")?,
            no_adain: g.no_adain || file.flag("no_adain")?,
            no_ta: g.no_ta || file.flag("no_ta")?,
            no_tu: g.no_tu || file.flag("no_tu")?,
            workdir: g.workdir,
            file,
        })
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn ablation(&self) -> AblationFlags {
        AblationFlags { transformer_adaptive: !self.no_ta, transformer_unet: !self.no_tu }
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig::for_profile(self.profile, self.seed)
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let run = Run::new(cli.global)?;
    match cli.command {
        Command::Datagen(a) => datagen(&run, a.n, &a.out),
        Command::Pretrain(a) => pretrain(&run, a),
        Command::Train(a) => train(&run, a),
        Command::Harmonize(a) => harmonize(&run, a),
        Command::Sweep(a) => sweep(&run, a),
        Command::Eval(a) => eval(&run, a),
        Command::Gradcheck(a) => gradcheck(&run, a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("{}: cannot create directory", dir.display()))?;
    }
    Ok(())
}

fn open_log(path: &Path) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    Ok(BufWriter::new(File::create(path).with_context(|| format!("{}: cannot create log", path.display()))?))
}

fn datagen(run: &Run, n: usize, out: &Path) -> Result<ExitCode> {
    let size = run.model_config().image_size;
    let samples: Vec<CompositeSample<f32>> = generate(n, size, run.seed);
    let manifest = write_dataset(&samples, &run.path(out))?;
    println!("datagen n={n} size={size} manifest={}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn load_data(run: &Run, path: &Path, config: &ModelConfig) -> Result<Vec<CompositeSample<f32>>> {
    let data: Vec<CompositeSample<f32>> = load_manifest(&run.path(path))?;
    if let Some(s) = data.first() {
        let (h, w) = s.size();
        if h != config.image_size || w != config.image_size {
            bail!(Error::Shape(format!(
                "dataset images are {h}x{w} but the {} profile expects {}x{}",
                config.profile, config.image_size, config.image_size
            )));
        }
    }
    Ok(data)
}

fn pretrain(run: &Run, a: crate::PretrainArgs) -> Result<ExitCode> {
    let config = run.model_config();
    let data = load_data(run, &a.data, &config)?;
    let mut state = ModelState::<f32>::new(config)?;
    let d = PretrainConfig::default();
    let cfg = PretrainConfig {
        max_steps: pick(a.max_steps, &run.file, "max_steps", d.max_steps)?,
        min_steps: pick(a.min_steps, &run.file, "min_steps", d.min_steps)?,
        batch_size: pick(a.batch_size, &run.file, "batch_size", d.batch_size)?,
        learning_rate: pick(a.lr, &run.file, "lr", d.learning_rate)?,
        val_items: d.val_items.min(data.len() / 4),
        seed: run.seed,
        ..d
    };
    let out = run.path(&a.out);
    let log_path = a.log.map_or_else(|| out.with_extension("log"), |p| run.path(&p));
    let mut log = open_log(&log_path)?;
    let report = pretrain_backbone(&data, &mut state, &cfg, &mut log)?;
    log.flush()?;
    if !report.gate_met {
        log::warn!(
            "validation loss {:.5} did not reach {} x initial {:.5}",
            report.val_final,
            cfg.gate,
            report.val_initial
        );
    }
    ensure_parent(&out)?;
    save_state(&state, &out)?;
    println!(
        "pretrain steps={} val_initial={:.6} val_final={:.6} gate_met={} checkpoint={}",
        report.steps,
        report.val_initial,
        report.val_final,
        report.gate_met,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_checkpoint(run: &Run, path: &Path) -> Result<ModelState<f32>> {
    let state: ModelState<f32> = load_state(&run.path(path))?;
    if run.profile_given && state.config.profile != run.profile {
        bail!(Error::Parameter(format!(
            "checkpoint {} is a {} model, --profile asked for {}",
            path.display(),
            state.config.profile,
            run.profile
        )));
    }
    Ok(state)
}

fn train(run: &Run, a: crate::TrainArgs) -> Result<ExitCode> {
    let mut state = load_checkpoint(run, &a.checkpoint)?;
    let data = load_data(run, &a.data, &state.config)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: pick(a.epochs, &run.file, "epochs", d.epochs)?,
        batch_size: pick(a.batch_size, &run.file, "batch_size", d.batch_size)?,
        learning_rate: pick(a.lr, &run.file, "lr", d.learning_rate)?,
        max_steps: match a.max_steps {
            Some(m) => Some(m),
            None => run.file.get("max_steps")?,
        },
        seed: run.seed,
        losses: LossFlags { adain: !run.no_adain, contrastive: !run.no_cl, content: true },
        ablation: run.ablation(),
        ..d
    };
    let out = run.path(&a.out);
    let log_path = a.log.map_or_else(|| out.with_extension("log"), |p| run.path(&p));
    let mut log = open_log(&log_path)?;
    let report = train_adapter(&data, &mut state, &cfg, &mut log)?;
    log.flush()?;
    ensure_parent(&out)?;
    save_state(&state, &out)?;
    let last = report.epochs.last().map(|b| b.total).unwrap_or(f64::NAN);
    println!(
        "train steps={} epochs={} final_total={last:.6} frozen_digest={} checkpoint={}",
        report.steps,
        report.epochs.len(),
        report.frozen_digest,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

struct Input {
    state: ModelState<f32>,
    composite: Tensor<f32>,
    mask: Mask,
}

fn load_input(run: &Run, a: &crate::SampleArgs) -> Result<Input> {
    let state = load_checkpoint(run, &a.checkpoint)?;
    let composite: Tensor<f32> = load_rgb(&run.path(&a.composite))?;
    let mask = load_mask(&run.path(&a.mask))?;
    let (_, h, w) = composite.chw()?;
    if mask.dims() != (h, w) {
        bail!(Error::Shape(format!("mask {:?} does not match composite {h}x{w}", mask.dims())));
    }
    state.check_image(&composite)?;
    Ok(Input { state, composite, mask })
}

/// Inference flags: the variant the model was trained as, minus anything
/// disabled on the command line.
fn inference_options(run: &Run, state: &ModelState<f32>, strength: f64) -> HarmonizeOptions {
    let trained = state.ablation;
    let asked = run.ablation();
    HarmonizeOptions {
        strength,
        seed: run.seed,
        sampler: run.sampler,
        flags: AblationFlags {
            transformer_adaptive: trained.transformer_adaptive && asked.transformer_adaptive,
            transformer_unet: trained.transformer_unet && asked.transformer_unet,
        },
    }
}

fn metrics(state: &ModelState<f32>, out: &Tensor<f32>, composite: &Tensor<f32>, background: &Tensor<f32>, mask: &Mask) -> Result<(f64, f64)> {
    let style = style_distance(out, background, mask, &state.backbone)?;
    let content = match content_distance(out, composite, mask, &state.backbone) {
        Ok(v) => v,
        Err(Error::DegenerateRegion(m)) => {
            log::warn!("content distance undefined: {m}");
            f64::NAN
        }
        Err(e) => return Err(e.into()),
    };
    Ok((style, content))
}

fn harmonize(run: &Run, a: crate::HarmonizeArgs) -> Result<ExitCode> {
    let Input { state, composite, mask } = load_input(run, &a.input)?;
    let opts = inference_options(run, &state, run.strength);
    let mut recorder = AttentionRecorder::new(a.dump_attention.is_some());
    let h = state.harmonize(&composite, &mask, &opts, Some(&mut recorder))?;
    let out = run.path(&a.out);
    ensure_parent(&out)?;
    save_rgb(&h.image, &out)?;
    let mut line = format!("harmonize strength={} steps={} out={}", opts.strength, h.steps, out.display());
    if let Some(bg) = &a.background {
        let background: Tensor<f32> = load_rgb(&run.path(bg))?;
        background.expect_same_shape(&composite)?;
        let (s, c) = metrics(&state, &h.image, &composite, &background, &mask)?;
        line.push_str(&format!(" style_distance={s:.6} content_distance={c:.6}"));
    }
    if let Some(dir) = &a.dump_attention {
        let n = dump_attention(&recorder, &run.path(dir), mask.dims())?;
        line.push_str(&format!(" attention_maps={n}"));
    }
    println!("{line}");
    Ok(ExitCode::SUCCESS)
}

/// One grayscale PNG per recorded `(level, side, step)`: attention mass each
/// background position receives, averaged over foreground queries and
/// scaled to the maximum.
fn dump_attention(rec: &AttentionRecorder<f32>, dir: &Path, (h, w): (usize, usize)) -> Result<usize> {
    std::fs::create_dir_all(dir).with_context(|| format!("{}: cannot create directory", dir.display()))?;
    let keys: Vec<_> = rec.keys().collect();
    for &(level, side, step) in &keys {
        let maps = rec.export_attention(level, side, step, h, w)?;
        let nq = maps.shape()[0].max(1);
        let mut avg = vec![0f32; h * w];
        for (i, v) in maps.data().iter().enumerate() {
            avg[i % (h * w)] += v / nq as f32;
        }
        let peak = avg.iter().cloned().fold(0f32, f32::max);
        if peak > 0.0 {
            avg.iter_mut().for_each(|v| *v /= peak);
        }
        let path = dir.join(format!("attn_l{level}_{}_t{step:02}.png", side.as_str()));
        save_gray(&Tensor::new(&[h, w], avg)?, &path)?;
    }
    Ok(keys.len())
}

fn contact_sheet(panels: &[Tensor<f32>], gap: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = panels[0].chw()?;
    let total_w = panels.len() * w + (panels.len() - 1) * gap;
    let mut sheet = Tensor::from_fn(&[c, h, total_w], |_| 1.0f32);
    for (k, p) in panels.iter().enumerate() {
        let x0 = k * (w + gap);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    sheet.set3(ch, y, x0 + x, p.data()[(ch * h + y) * w + x]);
                }
            }
        }
    }
    Ok(sheet)
}

fn sweep(run: &Run, a: crate::SweepArgs) -> Result<ExitCode> {
    let Input { state, composite, mask } = load_input(run, &a.input)?;
    let background: Tensor<f32> = load_rgb(&run.path(&a.background))?;
    background.expect_same_shape(&composite)?;
    if a.strengths.is_empty() {
        bail!("--strengths needs at least one value");
    }
    let mut panels = Vec::new();
    let csv_path = a.csv.map_or_else(|| run.path(&a.out).with_extension("csv"), |p| run.path(&p));
    ensure_parent(&csv_path)?;
    let mut csv = csv::Writer::from_path(&csv_path).with_context(|| format!("{}: cannot create", csv_path.display()))?;
    csv.write_record(["strength", "steps", "style_distance", "content_distance"])?;
    for &s in &a.strengths {
        let h = state.harmonize(&composite, &mask, &inference_options(run, &state, s), None)?;
        let (style, content) = metrics(&state, &h.image, &composite, &background, &mask)?;
        csv.write_record([s.to_string(), h.steps.to_string(), format!("{style:.6}"), format!("{content:.6}")])?;
        println!("sweep strength={s} steps={} style_distance={style:.6} content_distance={content:.6}", h.steps);
        panels.push(h.image);
    }
    csv.flush()?;
    let out = run.path(&a.out);
    ensure_parent(&out)?;
    if panels.len() == 1 {
        save_rgb(&panels[0], &out)?;
    } else {
        save_rgb(&contact_sheet(&panels, 2)?, &out)?;
    }
    println!("sweep panels={} sheet={} csv={}", panels.len(), out.display(), csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(run: &Run, a: crate::EvalArgs) -> Result<ExitCode> {
    let records = read_records(&run.path(&a.records))?;
    let scores = bt_fit(&records, a.l2)?;
    let out = run.path(&a.out);
    ensure_parent(&out)?;
    write_scores(&scores, &out)?;
    for (m, s) in scores.ranking() {
        println!("{m},{s:.6}");
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(run: &Run, a: crate::GradcheckArgs) -> Result<ExitCode> {
    let config = ModelConfig::for_profile(Profile::Tiny, run.seed);
    let mut state = ModelState::<f64>::new(config.clone())?;
    state.ablation = run.ablation();
    // Fresh readouts are zero, which would leave most probes with no gradient.
    state.jitter_trainable(run.seed ^ 0x5eed, 0.05);
    let sample = quadrant_sample::<f64>(run.seed, config.image_size)?;
    let negatives: Vec<Tensor<f64>> = [1, 2]
        .iter()
        .map(|k| phdiff::datagen::make_background(run.seed + k, phdiff::datagen::StyleFamily::ALL[*k as usize], config.image_size))
        .collect();
    let cfg = GradCheckConfig { n_probes: a.probes, h: a.h, seed: run.seed, ..GradCheckConfig::default() };
    let report = grad_check(&state, &sample, &negatives, &cfg)?;
    for p in &report.probes {
        println!(
            "probe param={} index={} analytic={:.9e} numeric={:.9e} rel_err={:.3e}",
            p.param, p.index, p.analytic, p.numeric, p.rel_err
        );
    }
    let ok = report.max_rel_err < a.tolerance;
    println!("gradcheck probes={} max_rel_err={:.3e} tolerance={:.0e} pass={ok}", report.probes.len(), report.max_rel_err, a.tolerance);
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

//! Pipeline driver: synthesize data, distill the mask codec, train the
//! diffusion model, and run inference, evaluation, and robustness sweeps.
//!
//! One TOML config feeds every subcommand; flags override config keys, and
//! each run echoes its fully resolved config into the output directory.
//! Partial outputs are staged under temporary names and promoted atomically.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use maskdiff::checkpoint;
use maskdiff::config::ExperimentConfig;
use maskdiff::eval::{self, Perturbation};
use maskdiff::image::{ColorImage, MaskImage};
use maskdiff::sampling::{infer_auto, SamplerConfig};
use maskdiff::synth;
use maskdiff::training;

#[derive(Parser)]
#[command(name = "maskdiff", version, about = "latent-diffusion tamper localization pipeline")]
struct Cli {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Global seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct SamplerFlags {
    /// Denoising steps per chain.
    #[arg(long)]
    steps: Option<usize>,

    /// Ensemble size (independent chains averaged per image).
    #[arg(long)]
    ensemble: Option<usize>,

    /// Fuse predictions of the image and its horizontal flip.
    #[arg(long)]
    tta: bool,
}

impl SamplerFlags {
    fn apply(&self, sampler: &mut SamplerConfig) {
        if let Some(s) = self.steps {
            sampler.infer_steps = s;
        }
        if let Some(n) = self.ensemble {
            sampler.ensemble = n;
        }
        if self.tta {
            sampler.tta = true;
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic tampered dataset with a manifest.
    Synth {
        /// Number of samples (overrides config).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pre-train the teacher and distill the mask codec.
    Distill {
        /// Dataset directory whose masks join the codec training set.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overwrite an existing codec checkpoint.
        #[arg(long)]
        force: bool,
    },
    /// Train the condition encoder and denoiser against a frozen codec.
    Train {
        /// Training dataset directory (from `synth`).
        #[arg(long)]
        data: PathBuf,
        /// Codec checkpoint (defaults to <out>/codec.ckpt).
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Optimizer steps (overrides config).
        #[arg(long)]
        train_steps: Option<usize>,
        /// Disable edge supervision (single-loss ablation).
        #[arg(long)]
        no_edge: bool,
    },
    /// Predict the tamper mask of one image.
    Infer {
        /// Model checkpoint (defaults to <out>/model.ckpt).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Input image (PNG or JPEG).
        #[arg(long)]
        image: PathBuf,
        /// Also dump the raw probability map as little-endian f32.
        #[arg(long)]
        save_probs: bool,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Score the model (or a directory of precomputed predictions) on a
    /// dataset.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset directory (from `synth`).
        #[arg(long)]
        data: PathBuf,
        /// Score these prediction masks instead of running inference;
        /// files must be named like the dataset's mask files.
        #[arg(long)]
        preds: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Degradation sweeps: JPEG quality, Gaussian blur, Gaussian noise.
    Robustness {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// One axis (jpeg|blur|noise); all three when omitted.
        #[arg(long)]
        axis: Option<String>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if cfg.output_dir.as_os_str().is_empty() {
        cfg.output_dir = PathBuf::from("maskdiff-out");
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.distill.seed = seed;
        cfg.sampler.seed = seed;
    }
    Ok(cfg)
}

/// Stage a directory under a temporary name, fill it, then promote.
fn with_staged_dir(
    final_dir: &Path,
    fill: impl FnOnce(&Path) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    let staged = final_dir.with_extension(format!("staging-{}", std::process::id()));
    if staged.exists() {
        std::fs::remove_dir_all(&staged)?;
    }
    if let Some(parent) = final_dir.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::create_dir_all(&staged)?;
    fill(&staged)?;
    if final_dir.exists() {
        std::fs::remove_dir_all(final_dir)?;
    }
    std::fs::rename(&staged, final_dir)?;
    Ok(())
}

fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn cmd_synth(cfg: &ExperimentConfig, count: Option<usize>) -> anyhow::Result<()> {
    let mut synth_cfg = cfg.synth.clone();
    if let Some(c) = count {
        synth_cfg.count = c;
    }
    let out = cfg.output_dir.join("dataset");
    with_staged_dir(&out, |staged| {
        let manifest = synth::write_dataset(staged, &synth_cfg, cfg.seed)?;
        println!("wrote {} samples to {}", manifest.entries.len(), out.display());
        Ok(())
    })?;
    cfg.echo_into(&cfg.output_dir, "synth-resolved.toml")?;
    Ok(())
}

fn cmd_distill(cfg: &ExperimentConfig, data: Option<&Path>, force: bool) -> anyhow::Result<()> {
    let ckpt_path = cfg.output_dir.join("codec.ckpt");
    if ckpt_path.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", ckpt_path.display());
    }
    std::fs::create_dir_all(&cfg.output_dir)?;

    // Mask geometry for codec training: dataset masks when provided, topped
    // up with procedurally drawn regions.
    let mut masks: Vec<MaskImage> = Vec::new();
    if let Some(dir) = data {
        let (_, samples) = synth::load_dataset(dir)?;
        masks.extend(samples.into_iter().map(|s| s.mask).filter(|m| m.count_positive() > 0));
    }
    let n_extra = 600usize.saturating_sub(masks.len());
    for i in 0..n_extra {
        masks.push(synth::region_mask(&cfg.synth, cfg.seed, i)?);
    }
    let held_out: Vec<MaskImage> = (0..256)
        .map(|i| synth::region_mask(&cfg.synth, cfg.seed.wrapping_add(1), 100_000 + i))
        .collect::<maskdiff::Result<_>>()?;

    let (teacher, tstore, _trec) = training::train_teacher(&masks, &cfg.codec, &cfg.distill)?;
    let teacher_tensors = tstore.tensors()?;
    let (student, sstore, _srec) = training::distill_student(
        &teacher,
        Some(&teacher_tensors),
        &masks,
        &cfg.codec,
        &cfg.distill,
    )?;
    let f1 = maskdiff::codec::reconstruction_f1(&student, &held_out, 0.5)?;
    println!("held-out reconstruction F1: {f1:.4}");

    // regression probe: what the decoder paints for the zero latent
    let zero_latent = maskdiff::LatentGrid::from_vec(
        vec![0.0; cfg.codec.latent_channels * 64],
        (cfg.codec.latent_channels, 8, 8),
        cfg.codec.latent_scale,
    )?;
    use maskdiff::codec::MaskCodec;
    let zero_decode = student.decode(&zero_latent)?;
    let zero_value = zero_decode.get(32, 32);

    checkpoint::save_codec(&ckpt_path, &cfg.codec, &sstore, f1)?;
    let report = serde_json::json!({
        "reconstruction_f1": f1,
        "held_out_masks": held_out.len(),
        "training_masks": masks.len(),
        "zero_latent_decode_value": zero_value,
    });
    std::fs::write(
        cfg.output_dir.join("distill-report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    cfg.echo_into(&cfg.output_dir, "distill-resolved.toml")?;
    println!("codec checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn cmd_train(
    cfg: &ExperimentConfig,
    data: &Path,
    codec_path: Option<&Path>,
    train_steps: Option<usize>,
    no_edge: bool,
) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = train_steps {
        cfg.train.steps = s;
    }
    if no_edge {
        cfg.train.edge_supervision = false;
    }
    let codec_path = codec_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join("codec.ckpt"));
    if !codec_path.exists() {
        bail!("codec checkpoint {} not found; run `distill` first", codec_path.display());
    }
    let (_meta, codec, codec_tensors) = checkpoint::load_codec(&codec_path)?;
    let (_, samples) = synth::load_dataset(data)?;
    let dataset: Vec<(ColorImage, MaskImage)> =
        samples.into_iter().map(|s| (s.image, s.mask)).collect();

    std::fs::create_dir_all(&cfg.output_dir)?;
    let setup = training::DiffusionTrainSetup {
        schedule: &cfg.schedule,
        denoiser: &cfg.denoiser,
        edges: &cfg.edges,
        augment: &cfg.synth.augment,
        train: &cfg.train,
    };
    let out =
        training::train_diffusion(&dataset, &codec, &setup, &codec_tensors, Some(&cfg.output_dir))?;

    let meta = checkpoint::ModelMeta {
        kind: "model".into(),
        schedule: cfg.schedule.clone(),
        codec: cfg.codec.clone(),
        denoiser: cfg.denoiser.clone(),
        edges: cfg.edges.clone(),
        train: cfg.train.clone(),
    };
    let model_path = cfg.output_dir.join("model.ckpt");
    checkpoint::save_model(&model_path, &meta, &out.store, &codec_tensors)?;
    cfg.echo_into(&cfg.output_dir, "train-resolved.toml")?;
    let last = out.records.last().expect("at least one step");
    println!(
        "trained {} steps (final loss {:.5}); model checkpoint: {}",
        out.records.len(),
        last.total,
        model_path.display()
    );
    Ok(())
}

fn model_path_of(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("model.ckpt"))
}

fn cmd_infer(
    cfg: &ExperimentConfig,
    model_flag: Option<&Path>,
    image_path: &Path,
    save_probs: bool,
    flags: &SamplerFlags,
) -> anyhow::Result<()> {
    let mut sampler = cfg.sampler.clone();
    flags.apply(&mut sampler);
    let model_path = model_path_of(cfg, model_flag);
    let (_meta, model) = checkpoint::load_model(&model_path)?;
    let image = ColorImage::load_png(image_path)
        .with_context(|| format!("loading image {}", image_path.display()))?;
    let prob = infer_auto(&model, &image, &sampler)?;
    std::fs::create_dir_all(&cfg.output_dir)?;

    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "image".into());
    let mask_path = cfg.output_dir.join(format!("{stem}-mask.png"));
    write_atomic(&mask_path, |p| Ok(prob.binarize(sampler.decode_threshold).save_png(p)?))?;
    if save_probs {
        let probs_path = cfg.output_dir.join(format!("{stem}-probs.f32"));
        let mut bytes = Vec::with_capacity(prob.data().len() * 4);
        for v in prob.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(&probs_path, |p| Ok(std::fs::write(p, &bytes)?))?;
    }
    let meta = serde_json::json!({
        "image": image_path.display().to_string(),
        "model": model_path.display().to_string(),
        "height": prob.height(),
        "width": prob.width(),
        "seed": sampler.seed,
        "sampler": sampler,
    });
    std::fs::write(
        cfg.output_dir.join(format!("{stem}-meta.json")),
        serde_json::to_string_pretty(&meta)?,
    )?;
    cfg.echo_into(&cfg.output_dir, "infer-resolved.toml")?;
    println!("mask: {}", mask_path.display());
    Ok(())
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    model_flag: Option<&Path>,
    data: &Path,
    preds: Option<&Path>,
    flags: &SamplerFlags,
) -> anyhow::Result<()> {
    let mut sampler = cfg.sampler.clone();
    flags.apply(&mut sampler);
    let (manifest, samples) = synth::load_dataset(data)?;
    std::fs::create_dir_all(&cfg.output_dir)?;

    let report = match preds {
        Some(preds_dir) => {
            // Pass-through scoring of precomputed masks.
            let mut scores = Vec::with_capacity(samples.len());
            for entry in &manifest.entries {
                let name = Path::new(&entry.mask)
                    .file_name()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_else(|| format!("{:05}.png", entry.index));
                let pred = MaskImage::load_png(preds_dir.join(&name))
                    .with_context(|| format!("loading prediction {name}"))?;
                let gt = &samples[entry.index].mask;
                scores.push(eval::pixel_f1(&pred, gt, sampler.decode_threshold)?);
            }
            eval::EvalReport::from_scores(scores)?
        }
        None => {
            let model_path = model_path_of(cfg, model_flag);
            let (_meta, model) = checkpoint::load_model(&model_path)?;
            let set: Vec<(ColorImage, MaskImage)> =
                samples.iter().map(|s| (s.image.clone(), s.mask.clone())).collect();
            eval::evaluate_set(
                |img| infer_auto(&model, img, &sampler),
                &set,
                sampler.decode_threshold,
            )?
        }
    };
    let csv_path = cfg.output_dir.join("eval.csv");
    eval::write_report_csv(&csv_path, &report)?;
    cfg.echo_into(&cfg.output_dir, "eval-resolved.toml")?;
    println!("mean pixel F1 over {} images: {:.4}", report.per_image.len(), report.mean);
    println!("per-image scores: {}", csv_path.display());
    Ok(())
}

fn cmd_robustness(
    cfg: &ExperimentConfig,
    model_flag: Option<&Path>,
    data: &Path,
    axis: Option<&str>,
    flags: &SamplerFlags,
) -> anyhow::Result<()> {
    let mut sampler = cfg.sampler.clone();
    flags.apply(&mut sampler);
    let model_path = model_path_of(cfg, model_flag);
    let (_meta, model) = checkpoint::load_model(&model_path)?;
    let (_, samples) = synth::load_dataset(data)?;
    let set: Vec<(ColorImage, MaskImage)> =
        samples.iter().map(|s| (s.image.clone(), s.mask.clone())).collect();
    std::fs::create_dir_all(&cfg.output_dir)?;

    let axes: Vec<Perturbation> = match axis {
        Some(a) => vec![a.parse::<Perturbation>()?],
        None => Perturbation::ALL.to_vec(),
    };
    for pert in axes {
        let levels = match pert {
            Perturbation::JpegQuality => &cfg.eval.jpeg_levels,
            Perturbation::GaussianBlur => &cfg.eval.blur_levels,
            Perturbation::GaussianNoise => &cfg.eval.noise_levels,
        };
        let points = eval::robustness_sweep(
            |img| infer_auto(&model, img, &sampler),
            &set,
            pert,
            levels,
            sampler.decode_threshold,
            cfg.seed,
        )?;
        let csv = cfg.output_dir.join(format!("robustness-{pert}.csv"));
        let svg = cfg.output_dir.join(format!("robustness-{pert}.svg"));
        eval::write_sweep_csv(&csv, &points)?;
        eval::write_sweep_svg(&svg, &format!("robustness: {pert}"), &pert.to_string(), &points)?;
        println!("{pert}: {}", csv.display());
        for p in &points {
            println!("  level {:>8.4} -> mean F1 {:.4}", p.level, p.mean_f1);
        }
    }
    cfg.echo_into(&cfg.output_dir, "robustness-resolved.toml")?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Synth { count } => cmd_synth(&cfg, *count),
        Cmd::Distill { data, force } => cmd_distill(&cfg, data.as_deref(), *force),
        Cmd::Train { data, codec, train_steps, no_edge } => {
            cmd_train(&cfg, data, codec.as_deref(), *train_steps, *no_edge)
        }
        Cmd::Infer { model, image, save_probs, sampler } => {
            cmd_infer(&cfg, model.as_deref(), image, *save_probs, sampler)
        }
        Cmd::Eval { model, data, preds, sampler } => {
            cmd_eval(&cfg, model.as_deref(), data, preds.as_deref(), sampler)
        }
        Cmd::Robustness { model, data, axis, sampler } => {
            cmd_robustness(&cfg, model.as_deref(), data, axis.as_deref(), sampler)
        }
    }
}

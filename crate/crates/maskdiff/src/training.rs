//! Training loops: teacher pre-training, student distillation, and the
//! two-phase diffusion pipeline (codec frozen first, then condition encoder
//! plus denoiser trained jointly).
//!
//! Optimization is AdamW with cosine learning-rate decay to zero and global
//! gradient-norm clipping. Every stochastic choice (init, batch order,
//! timesteps, noise draws, augmentation) comes from derived sub-streams of
//! the run seed, so the loss sequence is bitwise reproducible in
//! single-worker mode.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::loss::mse;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::codec::{
    distill_loss, duplicate_channels_batch, CodecConfig, LightVae, TeacherEncoder, TeacherVae,
};
use crate::denoiser::{CleanLatentPredictor, ConditionEncoder, DenoiserConfig, DenoiserUnet};
use crate::edges::{combined_latent_loss, make_edge_map, EdgeConfig, LossWeights};
use crate::error::{Error, Result};
use crate::image::{ColorImage, MaskImage};
use crate::latent::{concat_channels, split_channels};
use crate::params::{ParamStore, Params};
use crate::rng::{self, StreamRng};
use crate::schedule::{prior_batch, ErrorPriorConfig, ScheduleConfig};
use crate::synth::{apply_augment_ops, draw_augment_ops, AugmentConfig};

/// Full-scale training regime these desk defaults scale down from.
pub const FULL_SCALE_EPOCHS: usize = 200;
pub const FULL_SCALE_BATCH_SIZE: usize = 128;
pub const FULL_SCALE_PEAK_LR: f64 = 1e-4;
pub const FULL_SCALE_WEIGHT_DECAY: f64 = 0.05;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Optimizer steps; when 0, `epochs` decides the length.
    pub steps: usize,
    /// Passes over the dataset; used only when `steps` is 0.
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the cosine decay.
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Segmentation weight of the combined latent loss.
    pub alpha: f64,
    /// Error-prior rate.
    pub lambda: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Train the stacked mask∥edge latent with the auxiliary edge loss.
    /// Disabled, the denoiser sees only the mask latent and a single loss.
    pub edge_supervision: bool,
    pub log_every: usize,
    /// Emit a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            epochs: 0,
            batch_size: 12,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            alpha: 0.2,
            lambda: 0.1,
            grad_clip: 1.0,
            seed: 0,
            edge_supervision: true,
            log_every: 200,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 && self.epochs == 0 {
            return Err(Error::Config("either steps or epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1)".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("weight decay and grad clip must be non-negative".into()));
        }
        Ok(())
    }

    pub fn resolved_steps(&self, dataset_len: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * dataset_len.div_ceil(self.batch_size)
        }
    }
}

/// Codec distillation settings (teacher pre-training plus student phase).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Pulls teacher latents toward zero mean and the RMS the latent scale
    /// factor assumes (1 / latent_scale), so scaled latents are unit-ish.
    pub latent_reg_weight: f64,
    /// Initial positive-pixel weight of the teacher reconstruction loss;
    /// annealed to 1 over training. Counters the heavy class imbalance of
    /// tamper masks early without biasing the converged boundaries.
    pub teacher_pos_weight: f64,
    /// Copy the trained teacher decoder into the student before the
    /// distillation phase when the architectures match (they do for the
    /// built-in surrogate teacher; a full-scale teacher would not, and the
    /// warm start is skipped).
    pub warm_start_decoder: bool,
    pub log_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            teacher_steps: 1600,
            student_steps: 1400,
            batch_size: 8,
            learning_rate: 7e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            latent_reg_weight: 0.05,
            teacher_pos_weight: 4.0,
            warm_start_decoder: true,
            log_every: 100,
        }
    }
}

/// Cosine decay from `peak` to zero over `total` steps.
pub fn cosine_lr(step: usize, total: usize, peak: f64) -> f64 {
    if total <= 1 {
        return peak;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Global-norm gradient clipping. Returns the pre-clip norm.
pub fn clip_grad_norm(vars: &[Var], grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let mut sq_sum = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq_sum += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        }
    }
    let norm = sq_sum.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            let scaled = match grads.get(v) {
                Some(g) => g.affine(scale, 0.0)?,
                None => continue,
            };
            grads.insert(v.as_tensor(), scaled);
        }
    }
    Ok(norm)
}

fn adamw(store: &ParamStore, lr: f64, weight_decay: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        store.all_vars(),
        ParamsAdamW { lr, weight_decay, ..Default::default() },
    )?)
}

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub seg: f64,
    pub edg: f64,
}

fn write_loss_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,lr,total,seg,edg")?;
    for r in records {
        writeln!(f, "{},{},{},{},{}", r.step, r.lr, r.total, r.seg, r.edg)?;
    }
    Ok(())
}

fn stack_masks(masks: &[&MaskImage]) -> Result<Tensor> {
    let ts: Vec<Tensor> = masks.iter().map(|m| m.to_tensor()).collect::<Result<_>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

fn stack_images(images: &[ColorImage]) -> Result<Tensor> {
    let ts: Vec<Tensor> = images.iter().map(|m| m.to_tensor()).collect::<Result<_>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

fn sample_indices(rng: &mut StreamRng, len: usize, batch: usize) -> Vec<usize> {
    use rand::Rng;
    (0..batch).map(|_| rng.random_range(0..len)).collect()
}

/// Pre-train the surrogate teacher autoencoder on synthetic masks (duplicated
/// to three channels) until it reconstructs them well, with the latent
/// distribution regularized toward the scale the latent factor assumes.
pub fn train_teacher(
    masks: &[MaskImage],
    codec_cfg: &CodecConfig,
    cfg: &DistillConfig,
) -> Result<(TeacherVae, ParamStore, Vec<StepRecord>)> {
    if masks.is_empty() {
        return Err(Error::Input("teacher training needs masks".into()));
    }
    let mut store = ParamStore::new();
    let mut init_rng = rng::substream(cfg.seed, 10);
    let teacher = {
        let mut p = Params::fresh(&mut store, &mut init_rng);
        TeacherVae::new(&mut p, codec_cfg)?
    };
    let mut opt = adamw(&store, cfg.learning_rate, cfg.weight_decay)?;
    let vars = store.all_vars();
    let mut batch_rng = rng::substream(cfg.seed, 11);
    let target_rms = 1.0 / codec_cfg.latent_scale as f64;
    let mut records = Vec::new();

    for step in 0..cfg.teacher_steps {
        let idx = sample_indices(&mut batch_rng, masks.len(), cfg.batch_size);
        let batch: Vec<&MaskImage> = idx.iter().map(|i| &masks[*i]).collect();
        let y = stack_masks(&batch)?;
        let rgb = duplicate_channels_batch(&y)?;
        let z = teacher.encode_rgb(&rgb)?;
        let recon = teacher.decode_raw(&z)?;
        // Positive-weighted squared error, annealed to unweighted by the end
        // of training, plus per-sample soft dice so small regions are not
        // drowned out by the class imbalance.
        let frac = if cfg.teacher_steps > 1 {
            step as f64 / (cfg.teacher_steps - 1) as f64
        } else {
            1.0
        };
        let pos_w = 1.0 + (cfg.teacher_pos_weight - 1.0).max(0.0) * (1.0 - frac);
        let err = (recon.clone() - &y)?.sqr()?;
        let weights = y.affine(pos_w - 1.0, 1.0)?;
        let recon_loss = (err * weights)?.mean_all()?;
        let dice = crate::codec::soft_dice(&recon, &y)?;
        // latent moments: mean^2 + (rms/target - 1)^2, weighted
        let mean = z.mean_all()?;
        let rms_t = z.sqr()?.mean_all()?.sqrt()?;
        let rms = rms_t.to_scalar::<f32>()? as f64;
        let reg = mean.sqr()?.add(&rms_t.affine(1.0 / target_rms, -1.0)?.sqr()?)?;
        let loss = recon_loss.add(&dice)?.add(&reg.affine(cfg.latent_reg_weight, 0.0)?)?;

        let total = loss.to_scalar::<f32>()? as f64;
        if !total.is_finite() {
            return Err(Error::Train(format!("teacher loss became non-finite at step {step}")));
        }
        let mut grads = loss.backward()?;
        clip_grad_norm(&vars, &mut grads, cfg.grad_clip)?;
        let lr = cosine_lr(step, cfg.teacher_steps, cfg.learning_rate);
        opt.set_learning_rate(lr);
        opt.step(&grads)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            eprintln!("teacher step {step}: loss {total:.5} (latent rms {rms:.3})");
        }
        records.push(StepRecord { step, lr, total, seg: total, edg: 0.0 });
    }
    Ok((teacher, store, records))
}

/// Distill the student codec from a frozen teacher. `teacher_tensors`
/// enables the decoder warm start when the architectures line up.
pub fn distill_student(
    teacher: &TeacherVae,
    teacher_tensors: Option<&BTreeMap<String, Tensor>>,
    masks: &[MaskImage],
    codec_cfg: &CodecConfig,
    cfg: &DistillConfig,
) -> Result<(LightVae, ParamStore, Vec<StepRecord>)> {
    if masks.is_empty() {
        return Err(Error::Input("distillation needs masks".into()));
    }
    let mut store = ParamStore::new();
    let mut init_rng = rng::substream(cfg.seed, 20);
    let student = {
        let mut p = Params::fresh(&mut store, &mut init_rng);
        LightVae::new(&mut p, codec_cfg)?
    };
    if cfg.warm_start_decoder {
        if let Some(teacher_map) = teacher_tensors {
            let copied = warm_start_student_decoder(&mut store, teacher_map)?;
            if cfg.log_every > 0 {
                eprintln!("warm start: copied {copied} decoder tensors from the teacher");
            }
        }
    }
    let mut opt = adamw(&store, cfg.learning_rate, cfg.weight_decay)?;
    let vars = store.all_vars();
    let mut batch_rng = rng::substream(cfg.seed, 21);
    let mut records = Vec::new();

    for step in 0..cfg.student_steps {
        let idx = sample_indices(&mut batch_rng, masks.len(), cfg.batch_size);
        let batch: Vec<&MaskImage> = idx.iter().map(|i| &masks[*i]).collect();
        let y = stack_masks(&batch)?;
        let rgb = duplicate_channels_batch(&y)?;
        let z_teacher = teacher.encode_rgb(&rgb)?.detach();
        let (loss, l1, lat) = distill_loss(&student, &y, &z_teacher, codec_cfg.lambda_lat)?;

        let total = loss.to_scalar::<f32>()? as f64;
        if !total.is_finite() {
            return Err(Error::Train(format!("distill loss became non-finite at step {step}")));
        }
        let mut grads = loss.backward()?;
        clip_grad_norm(&vars, &mut grads, cfg.grad_clip)?;
        let lr = cosine_lr(step, cfg.student_steps, cfg.learning_rate);
        opt.set_learning_rate(lr);
        opt.step(&grads)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            eprintln!("distill step {step}: total {total:.5} l1 {l1:.5} latent {lat:.5}");
        }
        records.push(StepRecord { step, lr, total, seg: l1, edg: lat });
    }
    Ok((student, store, records))
}

/// Copy teacher decoder weights into the student where names and shapes
/// match; returns how many tensors were copied (zero when the architectures
/// differ, e.g. with a full-scale teacher).
fn warm_start_student_decoder(
    student: &mut ParamStore,
    teacher_tensors: &BTreeMap<String, Tensor>,
) -> Result<usize> {
    let mut copied = 0usize;
    for (name, tensor) in teacher_tensors {
        let Some(rest) = name.strip_prefix("teacher.dec.") else {
            continue;
        };
        let target = format!("student.dec.{rest}");
        if student.set_value(&target, tensor).is_ok() {
            copied += 1;
        }
    }
    Ok(copied)
}

/// Loss components of one diffusion training step, factored out so the exact
/// target arithmetic can be exercised with stub predictors.
///
/// With edge supervision, `targets` is (z_y, Some(z_e)) and the result is
/// (α·MSE_seg + (1−α)·MSE_edg, seg, edg); without it the total is the plain
/// mask-latent MSE and `edg` is zero.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss(
    predictor: &dyn CleanLatentPredictor,
    cond: &crate::denoiser::ConditionFeatures,
    z_y: &Tensor,
    z_e: Option<&Tensor>,
    ts: &[usize],
    eps: &Tensor,
    xi: Option<&Tensor>,
    prior: &ErrorPriorConfig,
    weights: &LossWeights,
    schedule: &crate::schedule::NoiseSchedule,
) -> Result<(Tensor, f64, f64)> {
    let z0 = match z_e {
        Some(z_e) => concat_channels(z_y, z_e)?,
        None => z_y.clone(),
    };
    let z_hat = prior_batch(&z0, eps, xi, ts, prior, schedule)?;
    let pred = predictor.predict_clean(&z_hat, ts, cond)?;
    match z_e {
        Some(z_e) => {
            let (pred_y, pred_e) = split_channels(&pred)?;
            let seg = mse(&pred_y, z_y)?.to_scalar::<f32>()? as f64;
            let edg = mse(&pred_e, z_e)?.to_scalar::<f32>()? as f64;
            let total = combined_latent_loss(&pred_y, &pred_e, z_y, z_e, weights)?;
            Ok((total, seg, edg))
        }
        None => {
            let total = mse(&pred, z_y)?;
            let seg = total.to_scalar::<f32>()? as f64;
            Ok((total, seg, 0.0))
        }
    }
}

pub struct DiffusionTrainSetup<'a> {
    pub schedule: &'a ScheduleConfig,
    pub denoiser: &'a DenoiserConfig,
    pub edges: &'a EdgeConfig,
    pub augment: &'a AugmentConfig,
    pub train: &'a TrainConfig,
}

pub struct DiffusionTrainOutput {
    pub store: ParamStore,
    pub cond: ConditionEncoder,
    pub unet: DenoiserUnet,
    pub records: Vec<StepRecord>,
}

/// Cached mask/edge latents per (sample, hflip, vflip), since the frozen
/// codec makes them deterministic.
struct LatentCache {
    map: HashMap<(usize, bool, bool), (Tensor, Option<Tensor>)>,
}

impl LatentCache {
    fn get(
        &mut self,
        key: (usize, bool, bool),
        mask: &MaskImage,
        codec: &LightVae,
        edges: Option<&EdgeConfig>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        if let Some(hit) = self.map.get(&key) {
            return Ok(hit.clone());
        }
        let m = mask.to_tensor()?.unsqueeze(0)?;
        let z_y = codec.encode_batch(&m)?.squeeze(0)?;
        let z_e = match edges {
            Some(cfg) => {
                let edge = make_edge_map(mask, cfg.dilation_radius, &cfg.canny_params())?;
                let e = edge.map.to_tensor()?.unsqueeze(0)?;
                Some(codec.encode_batch(&e)?.squeeze(0)?)
            }
            None => None,
        };
        self.map.insert(key, (z_y.clone(), z_e.clone()));
        Ok((z_y, z_e))
    }
}

/// Train condition encoder and denoiser jointly against a frozen codec,
/// following the two-phase design (the codec was distilled beforehand).
pub fn train_diffusion(
    dataset: &[(ColorImage, MaskImage)],
    codec: &LightVae,
    setup: &DiffusionTrainSetup,
    codec_tensors: &BTreeMap<String, Tensor>,
    out_dir: Option<&Path>,
) -> Result<DiffusionTrainOutput> {
    if dataset.is_empty() {
        return Err(Error::Input("diffusion training needs a dataset".into()));
    }
    let train = setup.train;
    train.validate()?;
    let schedule = setup.schedule.build()?;
    let prior = ErrorPriorConfig::new(train.lambda)?;
    let weights = LossWeights::new(train.alpha)?;
    let latent_c = codec.config().latent_channels;
    let io_channels = if train.edge_supervision { 2 * latent_c } else { latent_c };

    let mut store = ParamStore::new();
    let mut init_rng = rng::substream(train.seed, 0);
    let (cond_enc, unet) = {
        let mut p = Params::fresh(&mut store, &mut init_rng);
        let cond = ConditionEncoder::new(&mut p.sub("cond"), setup.denoiser)?;
        let unet =
            DenoiserUnet::new(&mut p.sub("unet"), io_channels, schedule.steps(), setup.denoiser)?;
        (cond, unet)
    };
    // The optimizer sees only denoiser and condition-encoder variables; the
    // codec was rebuilt from detached tensors, so no gradient can reach it.
    debug_assert!(store.names().iter().all(|n| n.starts_with("cond.") || n.starts_with("unet.")));

    let mut opt = adamw(&store, train.learning_rate, train.weight_decay)?;
    let vars = store.all_vars();
    let steps = train.resolved_steps(dataset.len());
    let mut aug_rng = rng::substream(train.seed, 1);
    let mut noise_rng = rng::substream(train.seed, 2);
    let mut batch_rng = rng::substream(train.seed, 3);
    let mut cache = LatentCache { map: HashMap::new() };
    let edge_cfg = train.edge_supervision.then_some(setup.edges);
    let mut records = Vec::with_capacity(steps);

    for step in 0..steps {
        let idx = sample_indices(&mut batch_rng, dataset.len(), train.batch_size);
        let mut images = Vec::with_capacity(idx.len());
        let mut z_ys = Vec::with_capacity(idx.len());
        let mut z_es = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (image, mask) = &dataset[i];
            let ops = draw_augment_ops(setup.augment, &mut aug_rng);
            let (aug_img, aug_mask) = apply_augment_ops(image, mask, &ops)?;
            let (z_y, z_e) =
                cache.get((i, ops.hflip, ops.vflip), &aug_mask, codec, edge_cfg)?;
            images.push(aug_img);
            z_ys.push(z_y);
            if let Some(z_e) = z_e {
                z_es.push(z_e);
            }
        }
        let img_batch = stack_images(&images)?;
        let z_y = Tensor::stack(&z_ys, 0)?;
        let z_e = if train.edge_supervision { Some(Tensor::stack(&z_es, 0)?) } else { None };

        let ts: Vec<usize> =
            (0..idx.len()).map(|_| rng::uniform_timestep(&mut noise_rng, schedule.steps())).collect();
        let shape = [idx.len(), io_channels, z_y.dims()[2], z_y.dims()[3]];
        let eps = rng::randn_tensor(&mut noise_rng, &shape)?;
        let xi = if train.lambda > 0.0 {
            Some(rng::randn_tensor(&mut noise_rng, &shape)?)
        } else {
            None
        };

        let cond = cond_enc.forward(&img_batch)?;
        let (loss, seg, edg) = diffusion_loss(
            &unet,
            &cond,
            &z_y,
            z_e.as_ref(),
            &ts,
            &eps,
            xi.as_ref(),
            &prior,
            &weights,
            &schedule,
        )?;
        let total = loss.to_scalar::<f32>()? as f64;
        let lr = cosine_lr(step, steps, train.learning_rate);
        if !total.is_finite() {
            if let Some(dir) = out_dir {
                let dump = serde_json::json!({
                    "step": step, "lr": lr, "seg": seg, "edg": edg,
                    "timesteps": ts, "batch": idx,
                });
                let _ = std::fs::write(
                    dir.join("train-fault.json"),
                    serde_json::to_string_pretty(&dump)?,
                );
            }
            return Err(Error::Train(format!("loss became non-finite at step {step}")));
        }

        let mut grads = loss.backward()?;
        clip_grad_norm(&vars, &mut grads, train.grad_clip)?;
        opt.set_learning_rate(lr);
        opt.step(&grads)?;

        if train.log_every > 0 && step % train.log_every == 0 {
            eprintln!("diffusion step {step}/{steps}: total {total:.5} seg {seg:.5} edg {edg:.5} lr {lr:.2e}");
        }
        records.push(StepRecord { step, lr, total, seg, edg });

        if train.checkpoint_every > 0 && step > 0 && step % train.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("model-step-{step}.ckpt"));
                save_periodic_checkpoint(&path, &store, codec_tensors, setup)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        write_loss_csv(&dir.join("loss.csv"), &records)?;
    }
    Ok(DiffusionTrainOutput { store, cond: cond_enc, unet, records })
}

fn save_periodic_checkpoint(
    path: &Path,
    store: &ParamStore,
    codec_tensors: &BTreeMap<String, Tensor>,
    setup: &DiffusionTrainSetup,
) -> Result<()> {
    let mut tensors = store.tensors()?;
    for (k, v) in codec_tensors {
        tensors.insert(k.clone(), v.clone());
    }
    let meta = serde_json::json!({
        "kind": "model",
        "schedule": setup.schedule,
        "denoiser": setup.denoiser,
        "edges": setup.edges,
        "train": setup.train,
    });
    crate::checkpoint::save(path, &meta, &tensors)
}

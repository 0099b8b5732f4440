//! Deterministic respaced DDIM reverse chain, ensemble generation with
//! latent averaging, decode, and flip test-time augmentation.
//!
//! The DDIM noise term is fixed at zero, so a chain is a pure function of its
//! Gaussian initialization, the image condition, and the weights. The
//! stochastic ancestral rule (re-adding √β noise per step) is the σ > 0
//! generalization of [`ddim_step`]; it is covered analytically by the same
//! update and intentionally not exposed as a sampling path.
//!
//! Ensemble members share one condition (it is computed exactly once per
//! call) and use independent Gaussian initializations from a single seeded
//! stream; their final latents are averaged in latent space before decoding,
//! and the edge half of the averaged latent is discarded.

use candle_core::Tensor;

use crate::codec::LightVae;
use crate::denoiser::{CleanLatentPredictor, ConditionEncoder, ConditionFeatures, ConditionProvider};
use crate::error::{Error, Result};
use crate::image::{ColorImage, MaskImage};
use crate::latent::{split_channels, LatentGrid};
use crate::rng;
use crate::schedule::NoiseSchedule;

/// Inference-time sampler settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Respaced denoising steps per chain.
    pub infer_steps: usize,
    /// Number of independent chains averaged per image.
    pub ensemble: usize,
    /// Threshold applied when binarizing decoded probability maps.
    pub decode_threshold: f32,
    /// Fuse predictions of the image and its horizontal flip.
    pub tta: bool,
    /// Seed for the chain initializations.
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { infer_steps: 8, ensemble: 5, decode_threshold: 0.5, tta: false, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.infer_steps < 1 || self.infer_steps > schedule.steps() {
            return Err(Error::Config(format!(
                "infer_steps must lie in 1..={}, got {}",
                schedule.steps(),
                self.infer_steps
            )));
        }
        if self.ensemble < 1 {
            return Err(Error::Config("ensemble size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.decode_threshold) {
            return Err(Error::Config("decode threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `n` timesteps uniformly strided over {1..T}, descending; the final reverse
/// transition targets the clean (ᾱ_0 = 1) boundary.
pub fn respace_steps(t_total: usize, n: usize) -> Result<Vec<usize>> {
    if t_total < 1 {
        return Err(Error::Config("schedule must have at least one step".into()));
    }
    if n < 1 || n > t_total {
        return Err(Error::Config(format!("inference steps must lie in 1..={t_total}, got {n}")));
    }
    Ok((0..n).map(|i| t_total - i * t_total / n).collect())
}

/// One deterministic DDIM transition from t to t_prev:
/// ε̂ = (z_t − √ᾱ_t·ẑ_0) / √(1−ᾱ_t), then √ᾱ_{t_prev}·ẑ_0 + √(1−ᾱ_{t_prev})·ε̂.
pub fn ddim_step_tensor(
    z_t: &Tensor,
    z0_pred: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::Index(format!("ddim step needs t > t_prev, got {t} <= {t_prev}")));
    }
    if z_t.dims() != z0_pred.dims() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} does not match state {:?}",
            z0_pred.dims(),
            z_t.dims()
        )));
    }
    if t_prev == 0 {
        // Clean boundary: the transition emits the prediction exactly.
        return Ok(z0_pred.clone());
    }
    let ab_t = schedule.alpha_bar(t)?;
    if ab_t >= 1.0 {
        return Err(Error::Config(format!(
            "alpha_bar({t}) = 1 at a non-terminal step; noise direction undefined"
        )));
    }
    let (sig_t, noi_t) = schedule.marginal_coeffs(t)?;
    let (sig_p, noi_p) = schedule.marginal_coeffs(t_prev)?;
    let eps_hat = ((z_t - z0_pred.affine(sig_t, 0.0)?)? / noi_t)?;
    Ok((z0_pred.affine(sig_p, 0.0)? + eps_hat.affine(noi_p, 0.0)?)?)
}

/// Grid-level DDIM transition.
pub fn ddim_step(
    z_t: &LatentGrid,
    z0_pred: &LatentGrid,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    let out = ddim_step_tensor(z_t.tensor(), z0_pred.tensor(), t, t_prev, schedule)?;
    LatentGrid::new(out, z_t.scale())
}

/// Run one reverse chain from `z_init` over the given descending timestep
/// list, ending at the clean boundary.
pub fn sample_chain<P: CleanLatentPredictor + ?Sized>(
    predictor: &P,
    cond: &ConditionFeatures,
    z_init: Tensor,
    steps: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if steps.is_empty() {
        return Err(Error::Config("timestep list must not be empty".into()));
    }
    let mut z = z_init;
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let z0_pred = predictor.predict_clean(&z, &[t], cond)?;
        z = ddim_step_tensor(&z, &z0_pred, t, t_prev, schedule)?;
    }
    Ok(z)
}

/// Run `ensemble` independent chains from fresh Gaussian initializations and
/// average the final latents (ordered sum, deterministic given the seed).
#[allow(clippy::too_many_arguments)]
pub fn sample_ensemble<P: CleanLatentPredictor + ?Sized>(
    predictor: &P,
    cond: &ConditionFeatures,
    latent_shape: (usize, usize, usize),
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut rng::StreamRng,
) -> Result<Tensor> {
    cfg.validate(schedule)?;
    let (c, h, w) = latent_shape;
    let steps = respace_steps(schedule.steps(), cfg.infer_steps)?;
    let mut total: Option<Tensor> = None;
    for _ in 0..cfg.ensemble {
        let z_init = rng::randn_tensor(rng, &[1, c, h, w])?;
        let z = sample_chain(predictor, cond, z_init, &steps, schedule)?;
        total = Some(match total {
            Some(acc) => (acc + z)?,
            None => z,
        });
    }
    Ok(total.expect("ensemble >= 1").affine(1.0 / cfg.ensemble as f64, 0.0)?)
}

/// Everything needed to run inference: trained condition encoder and
/// denoiser, the frozen codec, and the schedule they were trained under.
pub struct InferModel {
    pub cond: ConditionEncoder,
    pub unet: crate::denoiser::DenoiserUnet,
    pub codec: LightVae,
    pub schedule: NoiseSchedule,
    /// Whether the denoiser was trained on the stacked mask∥edge latent.
    pub edge_supervision: bool,
}

impl InferModel {
    fn latent_channels_io(&self) -> usize {
        let c = self.codec.config().latent_channels;
        if self.edge_supervision {
            2 * c
        } else {
            c
        }
    }
}

/// Condition-generic, predictor-generic core of the inference path: computes
/// the condition exactly once, runs the ensemble, and returns the averaged
/// latent. Exposed so harness tests can count condition calls and substitute
/// oracle denoisers.
pub fn infer_latent<C: ConditionProvider + ?Sized, P: CleanLatentPredictor + ?Sized>(
    cond_provider: &C,
    predictor: &P,
    image: &ColorImage,
    latent_shape: (usize, usize, usize),
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let (h, w) = image.dims();
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Shape(format!("image dims must be divisible by 8, got {h}x{w}")));
    }
    let img_t = image.to_tensor()?.unsqueeze(0)?;
    // Algorithm order: the condition is extracted once, outside both loops.
    let cond = cond_provider.condition(&img_t)?;
    let mut chain_rng = rng::seeded(cfg.seed);
    sample_ensemble(predictor, &cond, latent_shape, schedule, cfg, &mut chain_rng)
}

/// Full inference: ensemble-sample the stacked latent, discard the edge half
/// of the average, and decode the mask half to a probability map.
pub fn infer(model: &InferModel, image: &ColorImage, cfg: &SamplerConfig) -> Result<MaskImage> {
    let (h, w) = image.dims();
    let c_io = model.latent_channels_io();
    let avg = infer_latent(
        &model.cond,
        &model.unet,
        image,
        (c_io, h / 8, w / 8),
        &model.schedule,
        cfg,
    )?;
    let mask_half = if model.edge_supervision {
        split_channels(&avg)?.0
    } else {
        avg
    };
    let prob = model.codec.decode_batch(&mask_half)?.squeeze(0)?;
    MaskImage::from_tensor(&prob)
}

/// Flip test-time augmentation: the pixelwise mean of the plain prediction
/// and the un-flipped prediction of the horizontally flipped image, fused on
/// probability maps before any thresholding.
pub fn tta_infer(model: &InferModel, image: &ColorImage, cfg: &SamplerConfig) -> Result<MaskImage> {
    let plain = infer(model, image, cfg)?;
    let flipped = infer(model, &image.flip_horizontal(), cfg)?;
    fuse_probability_maps(&plain, &flipped.flip_horizontal())
}

/// Pixelwise mean of two probability maps.
pub fn fuse_probability_maps(a: &MaskImage, b: &MaskImage) -> Result<MaskImage> {
    if a.dims() != b.dims() {
        return Err(Error::Shape("fused maps must share dimensions".into()));
    }
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| 0.5 * (x + y)).collect();
    MaskImage::new(a.height(), a.width(), data)
}

/// Dispatch on the TTA flag.
pub fn infer_auto(model: &InferModel, image: &ColorImage, cfg: &SamplerConfig) -> Result<MaskImage> {
    if cfg.tta {
        tta_infer(model, image, cfg)
    } else {
        infer(model, image, cfg)
    }
}

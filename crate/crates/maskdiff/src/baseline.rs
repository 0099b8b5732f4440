//! Deterministic (non-generative) segmentation baseline: the same condition
//! encoder followed by a direct upsampling head, trained with a plain
//! regression loss. Used by the robustness harness to compare degradation
//! slopes against the diffusion model trained on identical data.

use candle_core::Tensor;
use candle_nn::{Conv2d, Module};

use crate::denoiser::{ConditionEncoder, DenoiserConfig};
use crate::error::{Error, Result};
use crate::image::{ColorImage, MaskImage};
use crate::params::{ParamStore, Params};
use crate::rng;
use crate::synth::{apply_augment_ops, draw_augment_ops, AugmentConfig};
use crate::training::{clip_grad_norm, cosine_lr, StepRecord, TrainConfig};

pub struct DirectSegmenter {
    cond: ConditionEncoder,
    head: Conv2d,
    mid: Conv2d,
    out: Conv2d,
}

impl DirectSegmenter {
    pub fn new(p: &mut Params, cfg: &DenoiserConfig) -> Result<Self> {
        let cond = ConditionEncoder::new(&mut p.sub("cond"), cfg)?;
        let w = 2 * cfg.base_channels;
        let head = p.conv("head", cfg.cond_channels, w, 3, 1, 1)?;
        let mid = p.conv("mid", w, w, 3, 1, 1)?;
        let out = p.conv("out", w, 64, 3, 1, 1)?;
        Ok(Self { cond, head, mid, out })
    }

    /// Raw mask regressions [B, 1, H, W] for an image batch (subpixel head at
    /// latent resolution); callers clamp.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let cond = self.cond.forward(images)?;
        let h = candle_nn::ops::silu(&self.head.forward(&cond.fusion)?)?;
        let h = candle_nn::ops::silu(&self.mid.forward(&h)?)?;
        crate::latent::pixel_shuffle(&self.out.forward(&h)?, 8)
    }

    pub fn infer(&self, image: &ColorImage) -> Result<MaskImage> {
        let t = image.to_tensor()?.unsqueeze(0)?;
        let prob = self.forward(&t)?.squeeze(0)?;
        MaskImage::from_tensor(&prob)
    }
}

/// Train the baseline on (image, mask) pairs with the same optimizer recipe
/// as the diffusion model.
pub fn train_baseline(
    dataset: &[(ColorImage, MaskImage)],
    denoiser_cfg: &DenoiserConfig,
    augment: &AugmentConfig,
    train: &TrainConfig,
) -> Result<(DirectSegmenter, ParamStore, Vec<StepRecord>)> {
    if dataset.is_empty() {
        return Err(Error::Input("baseline training needs a dataset".into()));
    }
    train.validate()?;
    let mut store = ParamStore::new();
    let mut init_rng = rng::substream(train.seed, 40);
    let model = {
        let mut p = Params::fresh(&mut store, &mut init_rng);
        DirectSegmenter::new(&mut p, denoiser_cfg)?
    };
    let mut opt = candle_nn::AdamW::new(
        store.all_vars(),
        candle_nn::ParamsAdamW {
            lr: train.learning_rate,
            weight_decay: train.weight_decay,
            ..Default::default()
        },
    )?;
    use candle_nn::Optimizer;
    let vars = store.all_vars();
    let steps = train.resolved_steps(dataset.len());
    let mut batch_rng = rng::substream(train.seed, 41);
    let mut aug_rng = rng::substream(train.seed, 42);
    let mut records = Vec::with_capacity(steps);
    use rand::Rng;

    for step in 0..steps {
        let mut images = Vec::with_capacity(train.batch_size);
        let mut masks = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size {
            let i = batch_rng.random_range(0..dataset.len());
            let (img, msk) = &dataset[i];
            let ops = draw_augment_ops(augment, &mut aug_rng);
            let (ai, am) = apply_augment_ops(img, msk, &ops)?;
            images.push(ai.to_tensor()?);
            masks.push(am.to_tensor()?);
        }
        let x = Tensor::stack(&images, 0)?;
        let y = Tensor::stack(&masks, 0)?;
        let pred = model.forward(&x)?;
        let loss = candle_nn::loss::mse(&pred, &y)?;
        let total = loss.to_scalar::<f32>()? as f64;
        if !total.is_finite() {
            return Err(Error::Train(format!("baseline loss became non-finite at step {step}")));
        }
        let mut grads = loss.backward()?;
        clip_grad_norm(&vars, &mut grads, train.grad_clip)?;
        let lr = cosine_lr(step, steps, train.learning_rate);
        opt.set_learning_rate(lr);
        opt.step(&grads)?;
        if train.log_every > 0 && step % train.log_every == 0 {
            eprintln!("baseline step {step}/{steps}: loss {total:.5}");
        }
        records.push(StepRecord { step, lr, total, seg: total, edg: 0.0 });
    }
    Ok((model, store, records))
}

//! The lightweight mask-specific codec and its distillation objective.
//!
//! A fully convolutional, attention-free student compresses single-channel
//! masks and edge maps into a 1/8-resolution latent and decodes latents back
//! to probability maps. It is trained by distilling a frozen teacher
//! autoencoder: the student minimizes an L1 reconstruction term plus a
//! weighted L2 match to the teacher's latent. The teacher here is a
//! desk-scale convolutional autoencoder pre-trained on synthetic masks; it
//! sits behind [`TeacherEncoder`] so full-scale pretrained weights can be
//! swapped in.

use candle_core::Tensor;
use candle_nn::{loss::mse, Conv2d, GroupNorm, Module};

use crate::error::{Error, Result};
use crate::image::{ColorImage, MaskImage};
use crate::latent::LatentGrid;
use crate::params::Params;

/// Reconstruction quality of the full-scale codec, kept as the reference
/// upper bound for the desk-scale round-trip check.
pub const FULL_SCALE_RECONSTRUCTION_F1: f64 = 0.9970;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    /// Channels per encoded map; the stacked diffusion latent has twice this.
    pub latent_channels: usize,
    /// Scale factor applied after encoding and removed before decoding.
    pub latent_scale: f32,
    /// Weight of the latent-matching term of the distillation objective.
    pub lambda_lat: f64,
    /// Student stage widths, shallow to deep.
    pub student_widths: [usize; 3],
    /// Teacher stage widths, shallow to deep.
    pub teacher_widths: [usize; 3],
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_scale: 0.18215,
            lambda_lat: 1.0,
            student_widths: [24, 48, 96],
            teacher_widths: [24, 48, 96],
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_scale <= 0.0 {
            return Err(Error::Config("latent scale must be positive".into()));
        }
        if self.latent_channels == 0 {
            return Err(Error::Config("latent channels must be positive".into()));
        }
        if self.lambda_lat < 0.0 {
            return Err(Error::Config("lambda_lat must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_div8(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Shape(format!("spatial dims must be divisible by 8, got {h}x{w}")));
    }
    Ok(())
}

/// Mask-to-latent codec interface. Encoding is deterministic (the encoder
/// emits the distribution mean; there is no sampling at encode time).
pub trait MaskCodec {
    fn encode(&self, mask: &MaskImage) -> Result<LatentGrid>;
    fn decode(&self, latent: &LatentGrid) -> Result<MaskImage>;
}

fn groups_for(channels: usize) -> usize {
    let mut g = 8.min(channels);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

struct EncoderStack {
    stem: Conv2d,
    down: Vec<(Conv2d, GroupNorm)>,
    head: Conv2d,
}

impl EncoderStack {
    fn new(p: &mut Params, in_ch: usize, widths: &[usize; 3], latent_ch: usize) -> Result<Self> {
        let stem = p.conv("stem", in_ch, widths[0], 3, 1, 1)?;
        let plan = [(widths[0], widths[1]), (widths[1], widths[2]), (widths[2], widths[2])];
        let mut down = Vec::new();
        for (i, (ci, co)) in plan.into_iter().enumerate() {
            let conv = p.conv(&format!("down{i}"), ci, co, 3, 2, 1)?;
            let norm = p.group_norm(&format!("down{i}_norm"), co, groups_for(co))?;
            down.push((conv, norm));
        }
        let head = p.conv("head", widths[2], latent_ch, 3, 1, 1)?;
        Ok(Self { stem, down, head })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = candle_nn::ops::silu(&self.stem.forward(x)?)?;
        for (conv, norm) in &self.down {
            h = candle_nn::ops::silu(&norm.forward(&conv.forward(&h)?)?)?;
        }
        Ok(self.head.forward(&h)?)
    }
}

struct DecoderStack {
    stem: (Conv2d, GroupNorm),
    mid: (Conv2d, GroupNorm),
    head: Conv2d,
    out_ch: usize,
}

impl DecoderStack {
    fn new(p: &mut Params, widths: &[usize; 3], latent_ch: usize, out_ch: usize) -> Result<Self> {
        // Subpixel decoder: every conv runs at latent resolution and the head
        // emits one 8x8 patch of output values per latent cell, rearranged by
        // pixel shuffle. Keeps sharp patch boundaries and all compute at 1/8
        // scale.
        let w = widths[2];
        let stem = (
            p.conv("stem", latent_ch, w, 3, 1, 1)?,
            p.group_norm("stem_norm", w, groups_for(w))?,
        );
        let mid = (p.conv("mid", w, w, 3, 1, 1)?, p.group_norm("mid_norm", w, groups_for(w))?);
        let head = p.conv("head", w, out_ch * 64, 3, 1, 1)?;
        Ok(Self { stem, mid, head, out_ch })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        // The head is linear: reconstruction losses against binary targets
        // keep full gradients everywhere, and the public decode path clamps
        // to [0, 1].
        let h = candle_nn::ops::silu(&self.stem.1.forward(&self.stem.0.forward(z)?)?)?;
        let h = candle_nn::ops::silu(&self.mid.1.forward(&self.mid.0.forward(&h)?)?)?;
        let logits = self.head.forward(&h)?;
        let out = crate::latent::pixel_shuffle(&logits, 8)?;
        debug_assert_eq!(out.dims()[1], self.out_ch);
        Ok(out)
    }
}

/// The distilled student codec: single-channel input, ×8 downsampling
/// encoder, mirrored upsampling decoder, no attention.
pub struct LightVae {
    enc: EncoderStack,
    dec: DecoderStack,
    cfg: CodecConfig,
}

impl LightVae {
    pub fn new(p: &mut Params, cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let mut scope = p.sub("student");
        let enc = EncoderStack::new(
            &mut scope.sub("enc"),
            1,
            &cfg.student_widths,
            cfg.latent_channels,
        )?;
        let dec = DecoderStack::new(
            &mut scope.sub("dec"),
            &cfg.student_widths,
            cfg.latent_channels,
            1,
        )?;
        Ok(Self { enc, dec, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    /// Raw (unscaled) latent for a [B, 1, H, W] batch.
    pub fn encode_raw(&self, masks: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = masks.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("student encoder takes 1 channel, got {c}")));
        }
        check_div8(h, w)?;
        self.enc.forward(masks)
    }

    /// Raw reconstructions [B, 1, H, W] from an unscaled latent batch
    /// (unclamped; the training losses want full gradients).
    pub fn decode_raw(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = latents.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(Error::Shape(format!(
                "decoder expects {} channels, got {c}",
                self.cfg.latent_channels
            )));
        }
        self.dec.forward(latents)
    }

    /// Scaled latents for a batch, detached — the training-time path for
    /// building diffusion targets from a frozen codec.
    pub fn encode_batch(&self, masks: &Tensor) -> Result<Tensor> {
        Ok(self
            .encode_raw(masks)?
            .affine(self.cfg.latent_scale as f64, 0.0)?
            .detach())
    }

    /// Decode a scaled latent batch to probability maps.
    pub fn decode_batch(&self, latents: &Tensor) -> Result<Tensor> {
        let unscaled = latents.affine(1.0 / self.cfg.latent_scale as f64, 0.0)?;
        self.decode_raw(&unscaled)
    }
}

impl MaskCodec for LightVae {
    fn encode(&self, mask: &MaskImage) -> Result<LatentGrid> {
        let t = mask.to_tensor()?.unsqueeze(0)?;
        let z = self.encode_batch(&t)?.squeeze(0)?;
        LatentGrid::new(z, self.cfg.latent_scale)
    }

    fn decode(&self, latent: &LatentGrid) -> Result<MaskImage> {
        let z = latent.tensor().unsqueeze(0)?;
        let y = self.decode_batch(&z)?.squeeze(0)?;
        MaskImage::from_tensor(&y)
    }
}

/// Latent extraction interface of the (frozen) teacher. The teacher consumes
/// three-channel input, so single-channel masks go through
/// [`duplicate_channels`] first.
pub trait TeacherEncoder {
    fn encode_rgb(&self, rgb: &Tensor) -> Result<Tensor>;
}

/// Desk-scale surrogate teacher: a three-channel convolutional autoencoder
/// pre-trained on synthetic masks, then frozen for distillation.
pub struct TeacherVae {
    enc: EncoderStack,
    dec: DecoderStack,
    latent_channels: usize,
}

impl TeacherVae {
    pub fn new(p: &mut Params, cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let mut scope = p.sub("teacher");
        let enc = EncoderStack::new(
            &mut scope.sub("enc"),
            3,
            &cfg.teacher_widths,
            cfg.latent_channels,
        )?;
        let dec = DecoderStack::new(
            &mut scope.sub("dec"),
            &cfg.teacher_widths,
            cfg.latent_channels,
            1,
        )?;
        Ok(Self { enc, dec, latent_channels: cfg.latent_channels })
    }

    pub fn decode_raw(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = latents.dims4()?;
        if c != self.latent_channels {
            return Err(Error::Shape(format!(
                "teacher decoder expects {} channels, got {c}",
                self.latent_channels
            )));
        }
        self.dec.forward(latents)
    }
}

impl TeacherEncoder for TeacherVae {
    fn encode_rgb(&self, rgb: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = rgb.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("teacher encoder takes 3 channels, got {c}")));
        }
        check_div8(h, w)?;
        self.enc.forward(rgb)
    }
}

/// Duplicate a single-channel mask along the channel dimension, producing the
/// three-channel input the teacher requires.
pub fn duplicate_channels(mask: &MaskImage) -> ColorImage {
    let (h, w) = mask.dims();
    let mut planes = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        planes.extend_from_slice(mask.data());
    }
    ColorImage::new(h, w, planes).expect("mask values are valid image values")
}

/// Batched duplicate: [B, 1, H, W] -> [B, 3, H, W].
pub fn duplicate_channels_batch(masks: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[masks, masks, masks], 1)?)
}

/// Per-sample soft dice loss over raw reconstructions (clamped to [0, 1]):
/// mean over the batch of 1 − 2·Σpy / (Σp² + Σy² + eps). Scale-invariant per
/// sample, so small tamper regions carry full weight.
pub fn soft_dice(recon: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if recon.dims() != targets.dims() {
        return Err(Error::Shape("dice operands must share dimensions".into()));
    }
    let p = recon.clamp(0.0, 1.0)?;
    let inter = (p.clone() * targets)?.flatten_from(1)?.sum(1)?;
    let den = (p.sqr()?.flatten_from(1)?.sum(1)?
        + targets.sqr()?.flatten_from(1)?.sum(1)?)?;
    Ok((inter.affine(2.0, 0.0)?.div(&den.affine(1.0, 1e-3)?))?
        .affine(-1.0, 1.0)?
        .mean_all()?)
}

/// Distillation objective: ‖D_S(z_S) − y‖₁ + λ_lat·‖z_S − z_T‖₂², with
/// z_S = E_S(y). The teacher latent must be detached so gradients flow to the
/// student only.
pub fn distill_loss(
    student: &LightVae,
    masks: &Tensor,
    teacher_latent: &Tensor,
    lambda_lat: f64,
) -> Result<(Tensor, f64, f64)> {
    if lambda_lat < 0.0 {
        return Err(Error::Config("lambda_lat must be non-negative".into()));
    }
    let z_s = student.encode_raw(masks)?;
    if z_s.dims() != teacher_latent.dims() {
        return Err(Error::Shape(format!(
            "teacher latent shape {:?} does not match student latent {:?}",
            teacher_latent.dims(),
            z_s.dims()
        )));
    }
    let recon = student.decode_raw(&z_s)?;
    let l1 = (recon - masks)?.abs()?.mean_all()?;
    let lat = mse(&z_s, &teacher_latent.detach())?;
    let l1_v = l1.to_scalar::<f32>()? as f64;
    let lat_v = lat.to_scalar::<f32>()? as f64;
    let total = (l1 + lat.affine(lambda_lat, 0.0)?)?;
    Ok((total, l1_v, lat_v))
}

/// Single-pair distillation loss value.
pub fn distill_step(
    student: &LightVae,
    mask: &MaskImage,
    teacher_latent: &LatentGrid,
    lambda_lat: f64,
) -> Result<f64> {
    let m = mask.to_tensor()?.unsqueeze(0)?;
    let z_t = teacher_latent.tensor().unsqueeze(0)?;
    let (total, _, _) = distill_loss(student, &m, &z_t, lambda_lat)?;
    Ok(total.to_scalar::<f32>()? as f64)
}

/// Mean pixel F1 of decode(encode(y)) against y at the given threshold.
pub fn reconstruction_f1(
    codec: &dyn MaskCodec,
    masks: &[MaskImage],
    threshold: f32,
) -> Result<f64> {
    if masks.is_empty() {
        return Err(Error::Input("reconstruction check needs at least one mask".into()));
    }
    let mut acc = 0.0f64;
    for mask in masks {
        let decoded = codec.decode(&codec.encode(mask)?)?;
        acc += crate::eval::pixel_f1(&decoded, mask, threshold)?;
    }
    Ok(acc / masks.len() as f64)
}

/// Identity codec testing hook: stores the mask itself as a single-channel
/// latent at full resolution. Violates the 1/8-resolution contract on
/// purpose; only for harness tests.
pub struct IdentityCodec;

impl MaskCodec for IdentityCodec {
    fn encode(&self, mask: &MaskImage) -> Result<LatentGrid> {
        LatentGrid::new(mask.to_tensor()?, 1.0)
    }

    fn decode(&self, latent: &LatentGrid) -> Result<MaskImage> {
        MaskImage::from_tensor(latent.tensor())
    }
}

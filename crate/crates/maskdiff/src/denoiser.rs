//! The decoupled denoising pipeline: a trainable condition encoder that
//! extracts artifact features once per image, and a lightweight UNet that
//! predicts the clean concatenated latent from a noisy latent, a timestep,
//! and the condition.
//!
//! The UNet is x0-parameterized: it predicts the clean latent directly, not
//! the added noise. Condition injection is the cheapest wiring consistent
//! with a lightweight denoiser: the fusion map is concatenated channel-wise
//! at the UNet input, and a per-level 1x1 projection of it is added at each
//! encoder stage.

use candle_core::{Device, Tensor};
use candle_nn::{Conv2d, GroupNorm, Linear, Module};

use crate::error::{Error, Result};
use crate::image::ColorImage;
use crate::params::Params;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Base UNet width; full scale uses 128, desk scale 32.
    pub base_channels: usize,
    /// Per-level channel multipliers; each level after the first halves the
    /// spatial resolution.
    pub channel_mults: Vec<usize>,
    /// Condition backbone identifier: "tiny-conv" or "mid-conv".
    pub cond_backbone: String,
    /// Channels of the projected fusion map.
    pub cond_channels: usize,
    /// Sinusoidal timestep embedding width.
    pub time_embed_dim: usize,
    /// GroupNorm group count.
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mults: vec![1, 2],
            cond_backbone: "tiny-conv".into(),
            cond_channels: 32,
            time_embed_dim: 128,
            groups: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 8 {
            return Err(Error::Config("base_channels must be at least 8".into()));
        }
        if self.channel_mults.is_empty() {
            return Err(Error::Config("channel_mults must not be empty".into()));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even".into()));
        }
        backbone_widths(&self.cond_backbone)?;
        Ok(())
    }
}

/// Stage widths of the built-in condition backbones. The encoder is
/// replaceable: any backbone that fills the same contract (stage maps at
/// /2, /4, /8, /16 plus a fusion map at /8) can stand in.
pub fn backbone_widths(id: &str) -> Result<Vec<usize>> {
    match id {
        "tiny-conv" => Ok(vec![16, 32, 64, 64]),
        "mid-conv" => Ok(vec![32, 64, 128, 128]),
        other => Err(Error::Config(format!("unknown condition backbone {other}"))),
    }
}

/// Per-scale feature maps from the condition encoder plus the projected
/// fusion map at latent (1/8) resolution. Computed exactly once per image
/// per inference call.
pub struct ConditionFeatures {
    pub stages: Vec<Tensor>,
    pub fusion: Tensor,
}

/// Four-stage strided convolutional artifact extractor.
pub struct ConditionEncoder {
    stages: Vec<(Conv2d, Conv2d)>,
    projs: Vec<Conv2d>,
    cond_channels: usize,
}

impl ConditionEncoder {
    pub fn new(p: &mut Params, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = backbone_widths(&cfg.cond_backbone)?;
        let mut stages = Vec::new();
        let mut projs = Vec::new();
        let mut in_ch = 3;
        for (i, &w) in widths.iter().enumerate() {
            let mut scope = p.sub(&format!("stage{i}"));
            let down = scope.conv("down", in_ch, w, 3, 2, 1)?;
            let conv = scope.conv("conv", w, w, 3, 1, 1)?;
            stages.push((down, conv));
            projs.push(p.conv(&format!("proj{i}"), w, cfg.cond_channels, 1, 1, 0)?);
            in_ch = w;
        }
        Ok(Self { stages, projs, cond_channels: cfg.cond_channels })
    }

    pub fn cond_channels(&self) -> usize {
        self.cond_channels
    }

    /// Deterministic features for a [B, 3, H, W] image batch (H, W divisible
    /// by 8). Pixel values in [0, 1] are shifted to [-1, 1] internally.
    pub fn forward(&self, image: &Tensor) -> Result<ConditionFeatures> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("condition encoder takes RGB input, got {c} channels")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!("image dims must be divisible by 8, got {h}x{w}")));
        }
        let (lat_h, lat_w) = (h / 8, w / 8);
        let mut x = image.affine(2.0, -1.0)?;
        let mut stage_maps = Vec::with_capacity(self.stages.len());
        for (down, conv) in &self.stages {
            x = candle_nn::ops::silu(&down.forward(&x)?)?;
            x = candle_nn::ops::silu(&conv.forward(&x)?)?;
            stage_maps.push(x.clone());
        }
        // Project every stage to the fusion width and resize to latent
        // resolution, then sum.
        let mut fusion: Option<Tensor> = None;
        for (map, proj) in stage_maps.iter().zip(self.projs.iter()) {
            let p = proj.forward(map)?;
            let (_, _, ph, _) = p.dims4()?;
            let resized = if ph > lat_h {
                p.avg_pool2d(ph / lat_h)?
            } else if ph < lat_h {
                p.upsample_nearest2d(lat_h, lat_w)?
            } else {
                p
            };
            fusion = Some(match fusion {
                Some(f) => (f + resized)?,
                None => resized,
            });
        }
        let fusion = candle_nn::ops::silu(&fusion.expect("at least one stage"))?;
        Ok(ConditionFeatures { stages: stage_maps, fusion })
    }
}

/// Artifact-condition extraction for a single image.
pub fn encode_condition(enc: &ConditionEncoder, image: &ColorImage) -> Result<ConditionFeatures> {
    let t = image.to_tensor()?.unsqueeze(0)?;
    enc.forward(&t)
}

/// Anything that can produce condition features; lets the inference path be
/// tested with counting or stub providers.
pub trait ConditionProvider {
    fn condition(&self, image: &Tensor) -> Result<ConditionFeatures>;
}

impl ConditionProvider for ConditionEncoder {
    fn condition(&self, image: &Tensor) -> Result<ConditionFeatures> {
        self.forward(image)
    }
}

/// Clean-latent prediction interface of the denoiser: given ẑ_t, per-sample
/// timesteps, and the image condition, predict z_0.
pub trait CleanLatentPredictor {
    fn predict_clean(&self, z_t: &Tensor, ts: &[usize], cond: &ConditionFeatures)
        -> Result<Tensor>;
}

/// Sinusoidal timestep embedding: [B, dim] with sin halves then cos halves.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::Config("embedding dim must be even".into()));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        let mut sins = Vec::with_capacity(half);
        let mut coss = Vec::with_capacity(half);
        for i in 0..half {
            let freq = (-(i as f64) * (10000f64).ln() / (half as f64 - 1.0).max(1.0)).exp();
            sins.push((t * freq).sin() as f32);
            coss.push((t * freq).cos() as f32);
        }
        data.extend(sins);
        data.extend(coss);
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), &Device::Cpu)?)
}

struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(p: &mut Params, in_ch: usize, out_ch: usize, temb_dim: usize, groups: usize) -> Result<Self> {
        let gn1 = p.group_norm("gn1", in_ch, groups.min(in_ch))?;
        let conv1 = p.conv("conv1", in_ch, out_ch, 3, 1, 1)?;
        let temb_proj = p.linear("temb", temb_dim, out_ch)?;
        let gn2 = p.group_norm("gn2", out_ch, groups.min(out_ch))?;
        let conv2 = p.conv("conv2", out_ch, out_ch, 3, 1, 1)?;
        let skip = if in_ch != out_ch { Some(p.conv("skip", in_ch, out_ch, 1, 1, 0)?) } else { None };
        Ok(Self { gn1, conv1, temb_proj, gn2, conv2, skip })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let mut h = self.conv1.forward(&candle_nn::ops::silu(&self.gn1.forward(x)?)?)?;
        let b = temb.dims()[0];
        let t = self.temb_proj.forward(&candle_nn::ops::silu(temb)?)?;
        let t = t.reshape((b, t.dims()[1], 1, 1))?;
        h = h.broadcast_add(&t)?;
        h = self.conv2.forward(&candle_nn::ops::silu(&self.gn2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

struct DownLevel {
    cond_proj: Conv2d,
    res: ResBlock,
    down: Option<Conv2d>,
}

struct UpLevel {
    res: ResBlock,
    upsample: bool,
}

/// Lightweight UNet over the stacked latent. `io_channels` is 2C with edge
/// supervision (mask latent ∥ edge latent) or C without.
pub struct DenoiserUnet {
    in_conv: Conv2d,
    time_lin1: Linear,
    time_lin2: Linear,
    downs: Vec<DownLevel>,
    mid: ResBlock,
    ups: Vec<UpLevel>,
    out_gn: GroupNorm,
    out_conv: Conv2d,
    io_channels: usize,
    time_embed_dim: usize,
    max_timestep: usize,
}

impl DenoiserUnet {
    pub fn new(p: &mut Params, io_channels: usize, max_timestep: usize, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        if io_channels == 0 {
            return Err(Error::Config("io_channels must be positive".into()));
        }
        let base = cfg.base_channels;
        let temb_dim = cfg.time_embed_dim;
        let in_conv = p.conv("in", io_channels + cfg.cond_channels, base, 3, 1, 1)?;
        let time_lin1 = p.linear("time1", temb_dim, temb_dim)?;
        let time_lin2 = p.linear("time2", temb_dim, temb_dim)?;

        let chans: Vec<usize> = cfg.channel_mults.iter().map(|m| base * m).collect();
        let mut downs = Vec::new();
        let mut in_ch = base;
        for (i, &ch) in chans.iter().enumerate() {
            let mut scope = p.sub(&format!("down{i}"));
            let cond_proj = scope.conv("cond", cfg.cond_channels, in_ch, 1, 1, 0)?;
            let res = ResBlock::new(&mut scope.sub("res"), in_ch, ch, temb_dim, cfg.groups)?;
            let down = if i + 1 < chans.len() {
                Some(scope.conv("down", ch, chans[i + 1], 3, 2, 1)?)
            } else {
                None
            };
            in_ch = if i + 1 < chans.len() { chans[i + 1] } else { ch };
            downs.push(DownLevel { cond_proj, res, down });
        }

        let mid_ch = *chans.last().expect("non-empty mults");
        let mid = ResBlock::new(&mut p.sub("mid"), mid_ch, mid_ch, temb_dim, cfg.groups)?;

        let mut ups = Vec::new();
        let mut cur = mid_ch;
        for (i, &ch) in chans.iter().enumerate().rev() {
            let mut scope = p.sub(&format!("up{i}"));
            // concat with the skip recorded at this level
            let res = ResBlock::new(&mut scope.sub("res"), cur + ch, ch, temb_dim, cfg.groups)?;
            ups.push(UpLevel { res, upsample: i > 0 });
            cur = ch;
        }

        let out_gn = p.group_norm("out_gn", cur, cfg.groups.min(cur))?;
        let out_conv = p.conv("out", cur, io_channels, 3, 1, 1)?;
        Ok(Self {
            in_conv,
            time_lin1,
            time_lin2,
            downs,
            mid,
            ups,
            out_gn,
            out_conv,
            io_channels,
            time_embed_dim: temb_dim,
            max_timestep,
        })
    }

    pub fn io_channels(&self) -> usize {
        self.io_channels
    }

    /// Predict the clean latent for a noisy batch. `ts[i]` conditions sample
    /// i; the output has the input's shape.
    pub fn forward(&self, z_t: &Tensor, ts: &[usize], cond: &ConditionFeatures) -> Result<Tensor> {
        let (b, c, h, w) = z_t.dims4()?;
        if c != self.io_channels {
            return Err(Error::Shape(format!(
                "denoiser expects {} latent channels, got {c}",
                self.io_channels
            )));
        }
        if ts.len() != b {
            return Err(Error::Shape(format!(
                "timestep vector length {} does not match batch {b}",
                ts.len()
            )));
        }
        if let Some(&bad) = ts.iter().find(|&&t| t < 1 || t > self.max_timestep) {
            return Err(Error::Index(format!(
                "timestep {bad} out of 1..={}",
                self.max_timestep
            )));
        }
        let (_, _, fh, fw) = cond.fusion.dims4()?;
        if fh != h || fw != w {
            return Err(Error::Shape(format!(
                "fusion map {fh}x{fw} does not match latent {h}x{w}"
            )));
        }

        let temb = timestep_embedding(ts, self.time_embed_dim)?;
        let temb = self.time_lin2.forward(&candle_nn::ops::silu(&self.time_lin1.forward(&temb)?)?)?;

        let mut x = self.in_conv.forward(&crate::latent::concat_channels(z_t, &cond.fusion)?)?;
        let mut fusion_at = cond.fusion.clone();
        let mut skips = Vec::new();
        for level in &self.downs {
            x = (x.clone() + level.cond_proj.forward(&fusion_at)?)?;
            x = level.res.forward(&x, &temb)?;
            skips.push(x.clone());
            if let Some(down) = &level.down {
                x = down.forward(&x)?;
                fusion_at = fusion_at.avg_pool2d(2)?;
            }
        }
        x = self.mid.forward(&x, &temb)?;
        for up in &self.ups {
            let skip = skips.pop().expect("skip per level");
            x = up.res.forward(&crate::latent::concat_channels(&x, &skip)?, &temb)?;
            if up.upsample {
                let (_, _, hh, ww) = x.dims4()?;
                x = x.upsample_nearest2d(hh * 2, ww * 2)?;
            }
        }
        let x = candle_nn::ops::silu(&self.out_gn.forward(&x)?)?;
        Ok(self.out_conv.forward(&x)?)
    }
}

impl CleanLatentPredictor for DenoiserUnet {
    fn predict_clean(
        &self,
        z_t: &Tensor,
        ts: &[usize],
        cond: &ConditionFeatures,
    ) -> Result<Tensor> {
        self.forward(z_t, ts, cond)
    }
}

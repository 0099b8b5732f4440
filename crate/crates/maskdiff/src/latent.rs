//! Latent-space types: the 1/8-resolution channel-stacked grid the diffusion
//! process runs on, plus channel split/concat between the mask and edge
//! halves.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// C×h×w latent tensor at 1/8 of the pixel resolution, with the scale factor
/// that was applied on encode.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    tensor: Tensor,
    scale: f32,
}

impl LatentGrid {
    pub fn new(tensor: Tensor, scale: f32) -> Result<Self> {
        if tensor.dims().len() != 3 {
            return Err(Error::Shape(format!(
                "latent grid must be rank 3 [C, h, w], got {:?}",
                tensor.dims()
            )));
        }
        if scale <= 0.0 {
            return Err(Error::Config("latent scale must be positive".into()));
        }
        let values = tensor.flatten_all()?.to_vec1::<f32>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("latent grid contains non-finite values".into()));
        }
        Ok(Self { tensor, scale })
    }

    pub fn from_vec(data: Vec<f32>, shape: (usize, usize, usize), scale: f32) -> Result<Self> {
        let tensor = Tensor::from_vec(data, shape, &candle_core::Device::Cpu)?;
        Self::new(tensor, scale)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.tensor.dims();
        (d[1], d[2])
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.tensor.flatten_all()?.to_vec1::<f32>()?)
    }
}

fn channel_dim(t: &Tensor) -> Result<usize> {
    match t.dims().len() {
        3 => Ok(0),
        4 => Ok(1),
        n => Err(Error::Shape(format!("expected rank 3 or 4 latent tensor, got rank {n}"))),
    }
}

/// Split a channel-stacked latent into its first and second halves
/// (mask latent, edge latent). Errors on odd channel counts.
pub fn split_channels(t: &Tensor) -> Result<(Tensor, Tensor)> {
    let dim = channel_dim(t)?;
    let ch = t.dims()[dim];
    if ch % 2 != 0 {
        return Err(Error::Shape(format!("cannot split odd channel count {ch}")));
    }
    let half = ch / 2;
    let a = t.narrow(dim, 0, half)?;
    let b = t.narrow(dim, half, half)?;
    Ok((a, b))
}

/// Concatenate two latents along the channel dimension.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dim = channel_dim(a)?;
    if a.dims().len() != b.dims().len() {
        return Err(Error::Shape("concat operands must have the same rank".into()));
    }
    Ok(Tensor::cat(&[a, b], dim)?)
}

/// Split a latent grid into (mask half, edge half).
pub fn split_latent(z: &LatentGrid) -> Result<(LatentGrid, LatentGrid)> {
    let (a, b) = split_channels(z.tensor())?;
    Ok((LatentGrid::new(a, z.scale())?, LatentGrid::new(b, z.scale())?))
}

/// Depth-to-space rearrangement: [B, C·r·r, h, w] -> [B, C, h·r, w·r], with
/// input channel c·r² + i·r + j landing at offset (i, j) of each r×r patch.
pub fn pixel_shuffle(t: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c_in, h, w) = t.dims4()?;
    if r == 0 || c_in % (r * r) != 0 {
        return Err(Error::Shape(format!(
            "pixel shuffle needs channels divisible by {}, got {c_in}",
            r * r
        )));
    }
    let c = c_in / (r * r);
    let x = t.reshape((b, c, r, r, h, w))?;
    let x = x.permute((0, 1, 4, 2, 5, 3))?;
    Ok(x.reshape((b, c, h * r, w * r))?.contiguous()?)
}

/// Stack (mask latent, edge latent) back into one grid. Scales must agree.
pub fn concat_latent(a: &LatentGrid, b: &LatentGrid) -> Result<LatentGrid> {
    if a.scale() != b.scale() {
        return Err(Error::Config(format!(
            "latent scales differ: {} vs {}",
            a.scale(),
            b.scale()
        )));
    }
    LatentGrid::new(concat_channels(a.tensor(), b.tensor())?, a.scale())
}

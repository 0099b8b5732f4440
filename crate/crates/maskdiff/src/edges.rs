//! Tamper-boundary edge maps and the combined latent-space training loss.
//!
//! Edge maps are produced by Canny edge detection on the binary mask followed
//! by a square morphological dilation, and are regenerated on the fly from
//! masks rather than stored. On clean binary masks the detector marks the
//! one-pixel inner boundary of each region.

use candle_core::Tensor;
use candle_nn::loss::mse;

use crate::error::{Error, Result};
use crate::image::{EdgeMap, MaskImage};

/// Canny detector parameters. Thresholds are fractions of the maximum
/// gradient magnitude; masks are binary so the defaults are permissive.
#[derive(Debug, Clone, Copy)]
pub struct CannyParams {
    pub low_ratio: f32,
    pub high_ratio: f32,
    /// Pre-smoothing sigma; 0 disables smoothing, which keeps boundaries of
    /// binary masks exactly one pixel wide.
    pub gaussian_sigma: f32,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { low_ratio: 0.1, high_ratio: 0.3, gaussian_sigma: 0.0 }
    }
}

/// Serializable edge-map settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EdgeConfig {
    pub dilation_radius: usize,
    pub canny_low: f32,
    pub canny_high: f32,
    pub canny_sigma: f32,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self { dilation_radius: 2, canny_low: 0.1, canny_high: 0.3, canny_sigma: 0.0 }
    }
}

impl EdgeConfig {
    pub fn canny_params(&self) -> CannyParams {
        CannyParams {
            low_ratio: self.canny_low,
            high_ratio: self.canny_high,
            gaussian_sigma: self.canny_sigma,
        }
    }
}

fn clamp_get(data: &[f32], h: usize, w: usize, r: isize, c: isize) -> f32 {
    let r = r.clamp(0, h as isize - 1) as usize;
    let c = c.clamp(0, w as isize - 1) as usize;
    data[r * w + c]
}

fn smooth(data: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::new();
    for i in -radius..=radius {
        kernel.push((-(i * i) as f32 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f32 = kernel.iter().sum();
    let mut tmp = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                acc += k * clamp_get(data, h, w, r as isize, c as isize + ki as isize - radius);
            }
            tmp[r * w + c] = acc / norm;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                acc += k * clamp_get(&tmp, h, w, r as isize + ki as isize - radius, c as isize);
            }
            out[r * w + c] = acc / norm;
        }
    }
    out
}

/// Offsets for the eight quantized gradient directions, 45 degrees apart,
/// as (dr, dc) with rows growing downward. Index k covers angles around
/// k * 45 degrees measured from +x toward +y.
const DIRS: [(isize, isize); 8] =
    [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

/// Canny edge detection. Returns a binary map.
pub fn canny(mask: &MaskImage, params: &CannyParams) -> MaskImage {
    let (h, w) = mask.dims();
    let data = smooth(mask.data(), h, w, params.gaussian_sigma);

    let mut gx = vec![0.0f32; h * w];
    let mut gy = vec![0.0f32; h * w];
    let mut mag = vec![0.0f32; h * w];
    let mut max_mag = 0.0f32;
    for r in 0..h {
        for c in 0..w {
            let at = |dr: isize, dc: isize| clamp_get(&data, h, w, r as isize + dr, c as isize + dc);
            let sx = (at(-1, 1) + 2.0 * at(0, 1) + at(1, 1))
                - (at(-1, -1) + 2.0 * at(0, -1) + at(1, -1));
            let sy = (at(1, -1) + 2.0 * at(1, 0) + at(1, 1))
                - (at(-1, -1) + 2.0 * at(-1, 0) + at(-1, 1));
            let m = (sx * sx + sy * sy).sqrt();
            gx[r * w + c] = sx;
            gy[r * w + c] = sy;
            mag[r * w + c] = m;
            if m > max_mag {
                max_mag = m;
            }
        }
    }
    if max_mag <= 0.0 {
        return MaskImage::zeros(h, w);
    }

    // Non-maximum suppression along the signed gradient direction. The
    // asymmetric tie-break (strict forward, non-strict backward) keeps
    // exactly one side of a two-pixel plateau: the higher-intensity side.
    let mut nms = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let m = mag[r * w + c];
            if m <= 0.0 {
                continue;
            }
            let angle = gy[r * w + c].atan2(gx[r * w + c]);
            let k = ((angle / std::f32::consts::FRAC_PI_4).round() as isize).rem_euclid(8) as usize;
            let (dr, dc) = DIRS[k];
            let fwd = {
                let rr = r as isize + dr;
                let cc = c as isize + dc;
                if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                    0.0
                } else {
                    mag[rr as usize * w + cc as usize]
                }
            };
            let bwd = {
                let rr = r as isize - dr;
                let cc = c as isize - dc;
                if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                    0.0
                } else {
                    mag[rr as usize * w + cc as usize]
                }
            };
            if m > fwd && m >= bwd {
                nms[r * w + c] = m;
            }
        }
    }

    // Double threshold plus hysteresis from strong pixels through weak ones.
    let low = params.low_ratio * max_mag;
    let high = params.high_ratio * max_mag;
    let mut state = vec![0u8; h * w]; // 0 none, 1 weak, 2 strong
    let mut stack = Vec::new();
    for i in 0..h * w {
        if nms[i] >= high {
            state[i] = 2;
            stack.push(i);
        } else if nms[i] >= low {
            state[i] = 1;
        }
    }
    let mut out = vec![0.0f32; h * w];
    while let Some(i) = stack.pop() {
        out[i] = 1.0;
        let (r, c) = (i / w, i % w);
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let rr = r as isize + dr;
                let cc = c as isize + dc;
                if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                    continue;
                }
                let j = rr as usize * w + cc as usize;
                if state[j] == 1 && out[j] == 0.0 {
                    state[j] = 2;
                    stack.push(j);
                }
            }
        }
    }
    MaskImage::new(h, w, out).expect("canny output is binary")
}

/// Morphological dilation with a square structuring element of side
/// 2*radius + 1, done as two 1-D max passes.
pub fn dilate(map: &MaskImage, radius: usize) -> MaskImage {
    let (h, w) = map.dims();
    let r = radius as isize;
    let mut tmp = vec![0.0f32; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut m = 0.0f32;
            for d in -r..=r {
                let cc = col as isize + d;
                if cc >= 0 && cc < w as isize {
                    m = m.max(map.get(row, cc as usize));
                }
            }
            tmp[row * w + col] = m;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut m = 0.0f32;
            for d in -r..=r {
                let rr = row as isize + d;
                if rr >= 0 && rr < h as isize {
                    m = m.max(tmp[rr as usize * w + col]);
                }
            }
            out[row * w + col] = m;
        }
    }
    MaskImage::new(h, w, out).expect("dilation output is binary")
}

/// e = dilate(canny(y)): the dilated tamper-boundary map of a binary mask.
pub fn make_edge_map(
    mask: &MaskImage,
    dilation_radius: usize,
    params: &CannyParams,
) -> Result<EdgeMap> {
    if dilation_radius < 1 {
        return Err(Error::Config("dilation radius must be at least 1".into()));
    }
    let binary = mask.binarize(0.5);
    let edges = canny(&binary, params);
    let map = dilate(&edges, dilation_radius);
    Ok(EdgeMap { map, dilation_radius })
}

/// Segmentation weight α of the combined latent loss.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// α·MSE(pred_y, tgt_y) + (1−α)·MSE(pred_e, tgt_e), in latent space.
/// Returns a scalar tensor so gradients can flow to the predictions.
pub fn combined_latent_loss(
    pred_y: &Tensor,
    pred_e: &Tensor,
    tgt_y: &Tensor,
    tgt_e: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    if pred_y.dims() != tgt_y.dims() {
        return Err(Error::Shape(format!(
            "mask latent shapes differ: {:?} vs {:?}",
            pred_y.dims(),
            tgt_y.dims()
        )));
    }
    if pred_e.dims() != tgt_e.dims() {
        return Err(Error::Shape(format!(
            "edge latent shapes differ: {:?} vs {:?}",
            pred_e.dims(),
            tgt_e.dims()
        )));
    }
    let seg = mse(pred_y, tgt_y)?;
    let edg = mse(pred_e, tgt_e)?;
    Ok((seg.affine(weights.alpha, 0.0)? + edg.affine(1.0 - weights.alpha, 0.0)?)?)
}

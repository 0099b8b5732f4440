//! Pixel-domain types: single-channel maps, RGB images, and the photometric
//! operations shared by the augmentation and robustness harnesses.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use rand_distr::StandardNormal;

/// Single-channel H×W map with values in [0, 1].
///
/// Ground-truth tamper masks are binary {0, 1}; decoded predictions are
/// probabilities. Stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl MaskImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Input("mask values must be finite and in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.width + col] = value;
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    pub fn binarize(&self, threshold: f32) -> MaskImage {
        let data = self.data.iter().map(|v| if *v >= threshold { 1.0 } else { 0.0 }).collect();
        MaskImage { height: self.height, width: self.width, data }
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|v| **v > 0.0).count()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| *v as f64).sum()
    }

    pub fn flip_horizontal(&self) -> MaskImage {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.height {
            for c in 0..self.width {
                data.push(self.get(r, self.width - 1 - c));
            }
        }
        MaskImage { height: self.height, width: self.width, data }
    }

    pub fn flip_vertical(&self) -> MaskImage {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.height {
            for c in 0..self.width {
                data.push(self.get(self.height - 1 - r, c));
            }
        }
        MaskImage { height: self.height, width: self.width, data }
    }

    /// Tensor of shape [1, H, W].
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, self.height, self.width), &Device::Cpu)?)
    }

    /// From a tensor of shape [1, H, W] or [H, W]; values clamped to [0, 1].
    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        let t = match tensor.dims() {
            [1, _, _] => tensor.squeeze(0)?,
            [_, _] => tensor.clone(),
            dims => {
                return Err(Error::Shape(format!(
                    "expected [1, H, W] or [H, W] tensor, got {dims:?}"
                )))
            }
        };
        let (h, w) = t.dims2()?;
        let data: Vec<f32> =
            t.flatten_all()?.to_vec1::<f32>()?.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        MaskImage::new(h, w, data)
    }

    pub fn save_png<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let bytes: Vec<u8> =
            self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            ExtendedColorType::L8,
        )?;
        Ok(())
    }

    pub fn load_png<P: AsRef<Path>>(path: P) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
        MaskImage::new(h, w, data)
    }
}

/// RGB image with f32 values in [0, 1], stored planar (channel, row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    height: usize,
    width: usize,
    planes: Vec<f32>,
}

impl ColorImage {
    pub fn new(height: usize, width: usize, planes: Vec<f32>) -> Result<Self> {
        if planes.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image data length {} does not match 3x{}x{}",
                planes.len(),
                height,
                width
            )));
        }
        if planes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("image values must be finite".into()));
        }
        Ok(Self { height, width, planes })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, planes: vec![0.0; 3 * height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn planes(&self) -> &[f32] {
        &self.planes
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.planes[(channel * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f32) {
        self.planes[(channel * self.height + row) * self.width + col] = value;
    }

    pub fn flip_horizontal(&self) -> ColorImage {
        let mut out = self.clone();
        for ch in 0..3 {
            for r in 0..self.height {
                for c in 0..self.width {
                    out.set(ch, r, c, self.get(ch, r, self.width - 1 - c));
                }
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> ColorImage {
        let mut out = self.clone();
        for ch in 0..3 {
            for r in 0..self.height {
                for c in 0..self.width {
                    out.set(ch, r, c, self.get(ch, self.height - 1 - r, c));
                }
            }
        }
        out
    }

    /// Tensor of shape [3, H, W].
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.planes.clone(), (3, self.height, self.width), &Device::Cpu)?)
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        let (c, h, w) = tensor.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data: Vec<f32> =
            tensor.flatten_all()?.to_vec1::<f32>()?.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        ColorImage::new(h, w, data)
    }

    /// Interleaved 8-bit RGB bytes (HWC), for codec round-trips and file IO.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 * self.height * self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                for ch in 0..3 {
                    out.push((self.get(ch, r, c).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * height * width {
            return Err(Error::Shape("rgb8 buffer length mismatch".into()));
        }
        let mut planes = vec![0.0f32; 3 * height * width];
        for r in 0..height {
            for c in 0..width {
                for ch in 0..3 {
                    planes[(ch * height + r) * width + c] =
                        bytes[(r * width + c) * 3 + ch] as f32 / 255.0;
                }
            }
        }
        ColorImage::new(height, width, planes)
    }

    pub fn save_png<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    pub fn load_png<P: AsRef<Path>>(path: P) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        ColorImage::from_rgb8(h, w, img.as_raw())
    }

    /// Resized copy (bilinear), for ingesting photos at the working resolution.
    pub fn resize(&self, height: usize, width: usize) -> Result<ColorImage> {
        let rgb: image::RgbImage = image::ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.to_rgb8(),
        )
        .ok_or_else(|| Error::Input("image buffer conversion failed".into()))?;
        let resized = image::DynamicImage::ImageRgb8(rgb).resize_exact(
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        ColorImage::from_rgb8(height, width, resized.to_rgb8().as_raw())
    }
}

/// Binary tamper-boundary map together with the dilation radius it was built
/// with.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub map: MaskImage,
    pub dilation_radius: usize,
}

/// Separable Gaussian blur applied per channel; sigma <= 0 returns the input
/// unchanged. Borders use replicate padding.
pub fn gaussian_blur(img: &ColorImage, sigma: f32) -> ColorImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i * i) as f32 / denom).exp());
    }
    let norm: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let (h, w) = img.dims();
    let mut out = img.clone();
    let mut tmp = img.clone();
    // horizontal pass
    for ch in 0..3 {
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0f32;
                for (ki, k) in kernel.iter().enumerate() {
                    let cc = (c as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += k * img.get(ch, r, cc);
                }
                tmp.set(ch, r, c, acc);
            }
        }
    }
    // vertical pass
    for ch in 0..3 {
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0f32;
                for (ki, k) in kernel.iter().enumerate() {
                    let rr = (r as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += k * tmp.get(ch, rr, c);
                }
                out.set(ch, r, c, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Lossy JPEG encode/decode round-trip at the given quality (1..=100).
///
/// Quality >= 100 is treated as the identity so that the top of the
/// degradation sweep matches the clean score exactly.
pub fn jpeg_roundtrip(img: &ColorImage, quality: u8) -> Result<ColorImage> {
    if quality >= 100 {
        return Ok(img.clone());
    }
    let (h, w) = img.dims();
    let mut buf = Vec::new();
    let mut encoder = JpegEncoder::new_with_quality(&mut buf, quality);
    encoder.encode(&img.to_rgb8(), w as u32, h as u32, ExtendedColorType::Rgb8)?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)?.to_rgb8();
    ColorImage::from_rgb8(h, w, decoded.as_raw())
}

/// Additive Gaussian noise with the given sigma (in [0,1] intensity units),
/// clamped back to [0, 1]. Sigma <= 0 returns the input unchanged.
pub fn add_gaussian_noise(img: &ColorImage, sigma: f32, rng: &mut StreamRng) -> ColorImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    let (h, w) = img.dims();
    for ch in 0..3 {
        for r in 0..h {
            for c in 0..w {
                let n: f32 = rand::Rng::sample(rng, StandardNormal);
                out.set(ch, r, c, (img.get(ch, r, c) + sigma * n).clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn gradient_image(h: usize, w: usize) -> ColorImage {
        let mut img = ColorImage::zeros(h, w);
        for ch in 0..3 {
            for r in 0..h {
                for c in 0..w {
                    img.set(ch, r, c, ((r + c + ch) % 17) as f32 / 16.0);
                }
            }
        }
        img
    }

    #[test]
    fn mask_roundtrips_through_tensor() {
        let mask = MaskImage::new(4, 6, (0..24).map(|i| (i % 2) as f32).collect()).unwrap();
        let t = mask.to_tensor().unwrap();
        assert_eq!(t.dims(), &[1, 4, 6]);
        let back = MaskImage::from_tensor(&t).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn flip_is_involutive() {
        let img = gradient_image(8, 10);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
        let mask = MaskImage::new(3, 5, (0..15).map(|i| (i % 2) as f32).collect()).unwrap();
        assert_eq!(mask.flip_horizontal().flip_horizontal(), mask);
    }

    #[test]
    fn blur_zero_sigma_is_identity() {
        let img = gradient_image(8, 8);
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = ColorImage::new(8, 8, vec![0.5; 3 * 64]).unwrap();
        let blurred = gaussian_blur(&img, 1.5);
        for v in blurred.planes() {
            assert!((v - 0.5).abs() < 1e-5);
        }
    }

    #[test]
    fn jpeg_roundtrip_keeps_dims_and_quality_100_is_identity() {
        let img = gradient_image(16, 16);
        let out = jpeg_roundtrip(&img, 80).unwrap();
        assert_eq!(out.dims(), img.dims());
        assert_eq!(jpeg_roundtrip(&img, 100).unwrap(), img);
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let img = gradient_image(8, 8);
        let mut r = rng::seeded(1);
        assert_eq!(add_gaussian_noise(&img, 0.0, &mut r), img);
    }

    #[test]
    fn mask_rejects_out_of_range() {
        assert!(MaskImage::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(MaskImage::new(1, 2, vec![0.0]).is_err());
    }
}

//! Synthetic manipulated image/mask pairs and training-time augmentation.
//!
//! Base imagery is procedurally generated multi-octave value noise (or any
//! user-supplied photo folder resized to the working resolution).
//! Manipulations are a copy-paste of a square region or a classical
//! iterative-averaging inpaint of a region; the mask covers exactly the
//! modified pixels. Generation is a pure function of (seed, index), so a
//! dataset can be regenerated bitwise-identically from its manifest.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{add_gaussian_noise, gaussian_blur, jpeg_roundtrip, ColorImage, MaskImage};
use crate::rng::{self, StreamRng};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulationKind {
    CopyPaste,
    Inpaint,
    Authentic,
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: ColorImage,
    pub mask: MaskImage,
    pub kind: ManipulationKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_blur: f64,
    pub blur_sigma: (f32, f32),
    pub p_jpeg: f64,
    pub jpeg_quality: (u8, u8),
    pub p_noise: f64,
    pub noise_sigma: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_hflip: 0.5,
            p_vflip: 0.25,
            p_blur: 0.15,
            blur_sigma: (0.4, 1.2),
            p_jpeg: 0.15,
            jpeg_quality: (50, 95),
            p_noise: 0.15,
            noise_sigma: (0.004, 0.03),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_blur: 0.0,
            p_jpeg: 0.0,
            p_noise: 0.0,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    /// Fraction of authentic (untouched) samples.
    pub authentic_fraction: f64,
    /// Fraction of tampered samples that use inpainting (the rest copy-paste).
    pub inpaint_fraction: f64,
    /// Square side as a fraction of the shorter image side.
    pub square_frac: (f64, f64),
    pub inpaint_max_iters: usize,
    pub inpaint_tol: f32,
    pub augment: AugmentConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            count: 512,
            authentic_fraction: 0.0,
            inpaint_fraction: 0.5,
            square_frac: (0.10, 0.40),
            inpaint_max_iters: 2000,
            inpaint_tol: 1e-3,
            augment: AugmentConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("synthesis dims must be positive multiples of 8".into()));
        }
        if !(0.0..=1.0).contains(&self.authentic_fraction)
            || !(0.0..=1.0).contains(&self.inpaint_fraction)
        {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if !(self.square_frac.0 > 0.0 && self.square_frac.0 <= self.square_frac.1 && self.square_frac.1 <= 1.0) {
            return Err(Error::Config("square_frac must satisfy 0 < lo <= hi <= 1".into()));
        }
        Ok(())
    }
}

/// Multi-octave value noise with a random per-channel palette mix; the base
/// imagery manipulations are applied to.
pub fn base_texture(height: usize, width: usize, rng: &mut StreamRng) -> ColorImage {
    let octaves = [(4usize, 0.55f32), (8, 0.3), (16, 0.15)];
    // three independent noise fields
    let mut fields = Vec::new();
    for _ in 0..3 {
        let mut field = vec![0.0f32; height * width];
        for &(cells, weight) in &octaves {
            let gh = cells + 1;
            let gw = cells + 1;
            let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random::<f32>()).collect();
            for r in 0..height {
                for c in 0..width {
                    let fy = r as f32 / height as f32 * cells as f32;
                    let fx = c as f32 / width as f32 * cells as f32;
                    let (y0, x0) = (fy as usize, fx as usize);
                    let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
                    let sy = ty * ty * (3.0 - 2.0 * ty);
                    let sx = tx * tx * (3.0 - 2.0 * tx);
                    let at = |y: usize, x: usize| lattice[y.min(cells) * gw + x.min(cells)];
                    let v = at(y0, x0) * (1.0 - sy) * (1.0 - sx)
                        + at(y0, x0 + 1) * (1.0 - sy) * sx
                        + at(y0 + 1, x0) * sy * (1.0 - sx)
                        + at(y0 + 1, x0 + 1) * sy * sx;
                    field[r * width + c] += weight * v;
                }
            }
        }
        fields.push(field);
    }
    // random palette: mix the fields into RGB channels
    let mut planes = Vec::with_capacity(3 * height * width);
    for ch in 0..3 {
        let w0 = 0.4 + 0.6 * rng.random::<f32>();
        let w1 = rng.random::<f32>() * 0.5;
        let bias = rng.random::<f32>() * 0.25;
        for i in 0..height * width {
            let v = (w0 * fields[ch][i] + w1 * fields[(ch + 1) % 3][i] + bias).clamp(0.0, 1.0);
            planes.push(v);
        }
    }
    ColorImage::new(height, width, planes).expect("texture values are clamped")
}

fn draw_square_side(h: usize, w: usize, frac: (f64, f64), rng: &mut StreamRng) -> Result<usize> {
    let m = h.min(w) as f64;
    let min_side = (frac.0 * m).round() as usize;
    if min_side < 2 || min_side >= h.min(w) {
        return Err(Error::Input(format!(
            "image {h}x{w} too small for the minimum square side {min_side}"
        )));
    }
    let f = frac.0 + (frac.1 - frac.0) * rng.random::<f64>();
    let side = (f * m).round() as usize;
    Ok(side.clamp(min_side, h.min(w) - 1))
}

fn rects_overlap(a: (usize, usize, usize), b: (usize, usize, usize)) -> bool {
    let (ar, ac, asz) = a;
    let (br, bc, bsz) = b;
    ar < br + bsz && br < ar + asz && ac < bc + bsz && bc < ac + asz
}

/// Copy a square region from one location and paste it at a non-overlapping
/// location; the mask is exactly the pasted square.
pub fn copy_paste_manipulate(
    image: &ColorImage,
    cfg: &SynthConfig,
    rng: &mut StreamRng,
) -> Result<SynthSample> {
    let (h, w) = image.dims();
    let side = draw_square_side(h, w, cfg.square_frac, rng)?;
    let max_r = h - side;
    let max_c = w - side;
    // Draw source and destination jointly: a centered source can make a
    // disjoint destination impossible on its own.
    let mut attempts = 0;
    let (src, dst) = loop {
        attempts += 1;
        if attempts > 200 {
            return Err(Error::Input(format!(
                "image {h}x{w} cannot host two disjoint {side}px squares"
            )));
        }
        let a = (rng.random_range(0..=max_r), rng.random_range(0..=max_c), side);
        let b = (rng.random_range(0..=max_r), rng.random_range(0..=max_c), side);
        if !rects_overlap(a, b) {
            break (a, b);
        }
    };
    let mut out = image.clone();
    let mut mask = MaskImage::zeros(h, w);
    for r in 0..side {
        for c in 0..side {
            for ch in 0..3 {
                out.set(ch, dst.0 + r, dst.1 + c, image.get(ch, src.0 + r, src.1 + c));
            }
            mask.set(dst.0 + r, dst.1 + c, 1.0);
        }
    }
    Ok(SynthSample { image: out, mask, kind: ManipulationKind::CopyPaste })
}

/// Jacobi relaxation fill of the masked region from its boundary values.
/// Returns (iterations used, final max per-pixel change).
pub fn harmonic_fill(
    image: &mut ColorImage,
    mask: &MaskImage,
    max_iters: usize,
    tol: f32,
) -> (usize, f32) {
    let (h, w) = image.dims();
    let inside: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| mask.get(r, c) == 1.0)
        .collect();
    if inside.is_empty() {
        return (0, 0.0);
    }
    // initialize the region to the mean of its boundary ring, per channel
    for ch in 0..3 {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for &(r, c) in &inside {
            for (dr, dc) in [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)] {
                let rr = r as isize + dr;
                let cc = c as isize + dc;
                if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                    continue;
                }
                if mask.get(rr as usize, cc as usize) == 0.0 {
                    sum += image.get(ch, rr as usize, cc as usize) as f64;
                    n += 1;
                }
            }
        }
        let mean = if n > 0 { (sum / n as f64) as f32 } else { 0.5 };
        for &(r, c) in &inside {
            image.set(ch, r, c, mean);
        }
    }
    let mut delta = 0.0f32;
    for iter in 0..max_iters {
        delta = 0.0;
        for ch in 0..3 {
            let snapshot = image.clone();
            for &(r, c) in &inside {
                let mut acc = 0.0f32;
                let mut n = 0.0f32;
                for (dr, dc) in [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)] {
                    let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                    let cc = (c as isize + dc).clamp(0, w as isize - 1) as usize;
                    acc += snapshot.get(ch, rr, cc);
                    n += 1.0;
                }
                let new = acc / n;
                delta = delta.max((new - snapshot.get(ch, r, c)).abs());
                image.set(ch, r, c, new);
            }
        }
        if delta < tol {
            return (iter + 1, delta);
        }
    }
    (max_iters, delta)
}

/// Remove a region (rectangle or ellipse) and fill it by iterative
/// neighborhood averaging; the mask is exactly the filled region.
pub fn inpaint_manipulate(
    image: &ColorImage,
    cfg: &SynthConfig,
    rng: &mut StreamRng,
) -> Result<SynthSample> {
    let (h, w) = image.dims();
    let side = draw_square_side(h, w, cfg.square_frac, rng)?;
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..=w - side);
    let elliptic = rng.random::<f32>() < 0.5;
    let mut mask = MaskImage::zeros(h, w);
    let half = side as f32 / 2.0;
    for r in 0..side {
        for c in 0..side {
            let keep = if elliptic {
                let dy = r as f32 + 0.5 - half;
                let dx = c as f32 + 0.5 - half;
                dy * dy + dx * dx <= half * half
            } else {
                true
            };
            if keep {
                mask.set(top + r, left + c, 1.0);
            }
        }
    }
    let mut out = image.clone();
    harmonic_fill(&mut out, &mask, cfg.inpaint_max_iters, cfg.inpaint_tol);
    Ok(SynthSample { image: out, mask, kind: ManipulationKind::Inpaint })
}

/// Concrete augmentation decisions for one sample. Geometric ops apply to the
/// mask as well; photometric ops never touch it.
#[derive(Debug, Clone, Copy, Default)]
pub struct AugmentOps {
    pub hflip: bool,
    pub vflip: bool,
    pub blur_sigma: Option<f32>,
    pub jpeg_quality: Option<u8>,
    pub noise: Option<(f32, u64)>,
}

pub fn draw_augment_ops(cfg: &AugmentConfig, rng: &mut StreamRng) -> AugmentOps {
    let hflip = rng.random::<f64>() < cfg.p_hflip;
    let vflip = rng.random::<f64>() < cfg.p_vflip;
    let blur_sigma = (rng.random::<f64>() < cfg.p_blur).then(|| {
        cfg.blur_sigma.0 + (cfg.blur_sigma.1 - cfg.blur_sigma.0) * rng.random::<f32>()
    });
    let jpeg_quality = (rng.random::<f64>() < cfg.p_jpeg)
        .then(|| rng.random_range(cfg.jpeg_quality.0..=cfg.jpeg_quality.1));
    let noise = (rng.random::<f64>() < cfg.p_noise).then(|| {
        let sigma =
            cfg.noise_sigma.0 + (cfg.noise_sigma.1 - cfg.noise_sigma.0) * rng.random::<f32>();
        (sigma, rng.random::<u64>())
    });
    AugmentOps { hflip, vflip, blur_sigma, jpeg_quality, noise }
}

pub fn apply_augment_ops(
    image: &ColorImage,
    mask: &MaskImage,
    ops: &AugmentOps,
) -> Result<(ColorImage, MaskImage)> {
    if image.dims() != mask.dims() {
        return Err(Error::Shape("image and mask dims must match".into()));
    }
    let mut img = image.clone();
    let mut msk = mask.clone();
    if ops.hflip {
        img = img.flip_horizontal();
        msk = msk.flip_horizontal();
    }
    if ops.vflip {
        img = img.flip_vertical();
        msk = msk.flip_vertical();
    }
    if let Some(sigma) = ops.blur_sigma {
        img = gaussian_blur(&img, sigma);
    }
    if let Some(q) = ops.jpeg_quality {
        img = jpeg_roundtrip(&img, q)?;
    }
    if let Some((sigma, seed)) = ops.noise {
        let mut noise_rng = rng::seeded(seed);
        img = add_gaussian_noise(&img, sigma, &mut noise_rng);
    }
    Ok((img, msk))
}

/// Randomized training augmentation: flips applied identically to the mask,
/// then blur, JPEG round-trip, and additive noise on the image only, each
/// gated by its configured probability.
pub fn augment(
    image: &ColorImage,
    mask: &MaskImage,
    cfg: &AugmentConfig,
    rng: &mut StreamRng,
) -> Result<(ColorImage, MaskImage)> {
    let ops = draw_augment_ops(cfg, rng);
    apply_augment_ops(image, mask, &ops)
}

/// Tamper-mask geometry only (square, rectangle, or ellipse region), without
/// synthesizing imagery. Matches the region distribution the manipulations
/// produce; used to train the mask codec cheaply.
pub fn region_mask(cfg: &SynthConfig, seed: u64, index: usize) -> Result<MaskImage> {
    cfg.validate()?;
    let mut r = rng::substream(seed, 5000 + index as u64);
    let (h, w) = (cfg.height, cfg.width);
    let side = draw_square_side(h, w, cfg.square_frac, &mut r)?;
    let top = r.random_range(0..=h - side);
    let left = r.random_range(0..=w - side);
    let elliptic = r.random::<f32>() < 0.4;
    let mut mask = MaskImage::zeros(h, w);
    let half = side as f32 / 2.0;
    for row in 0..side {
        for col in 0..side {
            let keep = if elliptic {
                let dy = row as f32 + 0.5 - half;
                let dx = col as f32 + 0.5 - half;
                dy * dy + dx * dx <= half * half
            } else {
                true
            };
            if keep {
                mask.set(top + row, left + col, 1.0);
            }
        }
    }
    Ok(mask)
}

/// Deterministic kind assignment honoring the configured ratios exactly over
/// the dataset: exact counts, then a seeded shuffle.
pub fn plan_kinds(cfg: &SynthConfig, seed: u64) -> Vec<ManipulationKind> {
    let n_auth = (cfg.count as f64 * cfg.authentic_fraction).round() as usize;
    let n_tampered = cfg.count - n_auth;
    let n_inpaint = (n_tampered as f64 * cfg.inpaint_fraction).round() as usize;
    let n_copy = n_tampered - n_inpaint;
    let mut kinds = Vec::with_capacity(cfg.count);
    kinds.extend(std::iter::repeat_n(ManipulationKind::Authentic, n_auth));
    kinds.extend(std::iter::repeat_n(ManipulationKind::CopyPaste, n_copy));
    kinds.extend(std::iter::repeat_n(ManipulationKind::Inpaint, n_inpaint));
    // Fisher-Yates with a dedicated stream
    let mut r = rng::substream(seed, 0x6b);
    for i in (1..kinds.len()).rev() {
        let j = r.random_range(0..=i);
        kinds.swap(i, j);
    }
    kinds
}

/// Generate sample `index` of the dataset: bitwise reproducible from
/// (seed, index, kind).
pub fn generate_sample(
    cfg: &SynthConfig,
    seed: u64,
    index: usize,
    kind: ManipulationKind,
) -> Result<SynthSample> {
    cfg.validate()?;
    let mut r = rng::substream(seed, 1000 + index as u64);
    let base = base_texture(cfg.height, cfg.width, &mut r);
    match kind {
        ManipulationKind::Authentic => Ok(SynthSample {
            mask: MaskImage::zeros(cfg.height, cfg.width),
            image: base,
            kind,
        }),
        ManipulationKind::CopyPaste => copy_paste_manipulate(&base, cfg, &mut r),
        ManipulationKind::Inpaint => inpaint_manipulate(&base, cfg, &mut r),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub kind: ManipulationKind,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<ManifestEntry>,
}

/// Generate the full dataset into `dir` (images/, masks/, manifest.json).
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let kinds = plan_kinds(cfg, seed);
    let mut entries = Vec::with_capacity(cfg.count);
    for (index, kind) in kinds.into_iter().enumerate() {
        let sample = generate_sample(cfg, seed, index, kind)?;
        let image_rel = format!("images/{index:05}.png");
        let mask_rel = format!("masks/{index:05}.png");
        sample.image.save_png(dir.join(&image_rel))?;
        sample.mask.save_png(dir.join(&mask_rel))?;
        entries.push(ManifestEntry { index, kind, image: image_rel, mask: mask_rel });
    }
    let manifest =
        Manifest { version: MANIFEST_VERSION, seed, height: cfg.height, width: cfg.width, entries };
    std::fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<SynthSample>)> {
    let raw = std::fs::read_to_string(dir.join(MANIFEST_NAME))
        .map_err(|e| Error::Input(format!("cannot read manifest in {}: {e}", dir.display())))?;
    let manifest: Manifest = serde_json::from_str(&raw)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Input(format!("unsupported manifest version {}", manifest.version)));
    }
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let image = ColorImage::load_png(dir.join(&entry.image))?;
        let mask = MaskImage::load_png(dir.join(&entry.mask))?.binarize(0.5);
        samples.push(SynthSample { image, mask, kind: entry.kind });
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig::default()
    }

    #[test]
    fn texture_is_reproducible() {
        let a = base_texture(32, 32, &mut rng::substream(5, 1));
        let b = base_texture(32, 32, &mut rng::substream(5, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn copy_paste_mask_covers_exactly_the_pasted_square() {
        let cfg = cfg();
        let mut r = rng::seeded(3);
        let base = base_texture(64, 64, &mut r);
        let sample = copy_paste_manipulate(&base, &cfg, &mut r).unwrap();
        let area = sample.mask.sum();
        let side = (area as f64).sqrt().round() as usize;
        assert_eq!((side * side) as f64, area, "mask must be a full square");
        // pixels outside the mask are unchanged
        for row in 0..64 {
            for col in 0..64 {
                if sample.mask.get(row, col) == 0.0 {
                    for ch in 0..3 {
                        assert_eq!(sample.image.get(ch, row, col), base.get(ch, row, col));
                    }
                }
            }
        }
    }

    #[test]
    fn copy_paste_side_fraction_is_uniform() {
        // 1000 samples at 256x256 so integer rounding of the side barely
        // perturbs the bins; chi-squared with a generous bound for the
        // fixed seed (99.99% critical value for 7 dof is ~29).
        let cfg = cfg();
        let mut r = rng::seeded(17);
        let base = base_texture(256, 256, &mut r);
        let bins = 8usize;
        let mut counts = vec![0usize; bins];
        let n = 1000usize;
        for _ in 0..n {
            let s = copy_paste_manipulate(&base, &cfg, &mut r).unwrap();
            let side = (s.mask.sum() as f64).sqrt() / 256.0;
            let t = ((side - cfg.square_frac.0) / (cfg.square_frac.1 - cfg.square_frac.0))
                .clamp(0.0, 1.0 - 1e-9);
            counts[(t * bins as f64) as usize] += 1;
        }
        let expected = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 35.0, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn too_small_image_rejected() {
        let cfg = cfg();
        let mut r = rng::seeded(4);
        let tiny = base_texture(8, 8, &mut r);
        assert!(matches!(copy_paste_manipulate(&tiny, &cfg, &mut r), Err(Error::Input(_))));
    }

    #[test]
    fn inpaint_fill_stays_in_boundary_hull_and_outside_untouched() {
        let cfg = cfg();
        let mut r = rng::seeded(5);
        let base = base_texture(64, 64, &mut r);
        let sample = inpaint_manipulate(&base, &cfg, &mut r).unwrap();
        for ch in 0..3 {
            // hull of boundary values
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for row in 0..64usize {
                for col in 0..64usize {
                    if sample.mask.get(row, col) == 1.0 {
                        continue;
                    }
                    let near_region = [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)]
                        .iter()
                        .any(|&(dr, dc)| {
                            let rr = row as isize + dr;
                            let cc = col as isize + dc;
                            rr >= 0
                                && rr < 64
                                && cc >= 0
                                && cc < 64
                                && sample.mask.get(rr as usize, cc as usize) == 1.0
                        });
                    if near_region {
                        lo = lo.min(base.get(ch, row, col));
                        hi = hi.max(base.get(ch, row, col));
                    }
                }
            }
            for row in 0..64 {
                for col in 0..64 {
                    if sample.mask.get(row, col) == 1.0 {
                        let v = sample.image.get(ch, row, col);
                        assert!(v >= lo - 1e-4 && v <= hi + 1e-4, "fill {v} outside [{lo}, {hi}]");
                    } else {
                        assert_eq!(sample.image.get(ch, row, col), base.get(ch, row, col));
                    }
                }
            }
        }
    }

    #[test]
    fn harmonic_fill_converges_on_fixture() {
        let mut r = rng::seeded(6);
        let mut img = base_texture(32, 32, &mut r);
        let mut mask = MaskImage::zeros(32, 32);
        for row in 10..22 {
            for col in 10..22 {
                mask.set(row, col, 1.0);
            }
        }
        let (iters, delta) = harmonic_fill(&mut img, &mask, 2000, 1e-3);
        assert!(delta < 1e-3, "final delta {delta}");
        assert!(iters < 2000, "should converge before the cap, used {iters}");
    }

    #[test]
    fn augment_identity_with_zero_probabilities() {
        let cfg = AugmentConfig::disabled();
        let mut r = rng::seeded(7);
        let img = base_texture(32, 32, &mut r);
        let mut mask = MaskImage::zeros(32, 32);
        mask.set(3, 4, 1.0);
        let (ai, am) = augment(&img, &mask, &cfg, &mut r).unwrap();
        assert_eq!(ai, img);
        assert_eq!(am, mask);
    }

    #[test]
    fn flips_apply_to_image_and_mask_identically() {
        let ops = AugmentOps { hflip: true, vflip: true, ..Default::default() };
        let mut r = rng::seeded(8);
        let img = base_texture(16, 16, &mut r);
        let mut mask = MaskImage::zeros(16, 16);
        mask.set(2, 3, 1.0);
        let (ai, am) = apply_augment_ops(&img, &mask, &ops).unwrap();
        assert_eq!(ai, img.flip_horizontal().flip_vertical());
        assert_eq!(am.get(13, 12), 1.0);
        assert_eq!(am.count_positive(), 1);
    }

    #[test]
    fn photometric_ops_never_touch_masks() {
        let ops = AugmentOps {
            blur_sigma: Some(1.0),
            jpeg_quality: Some(60),
            noise: Some((0.02, 99)),
            ..Default::default()
        };
        let mut r = rng::seeded(9);
        let img = base_texture(16, 16, &mut r);
        let mut mask = MaskImage::zeros(16, 16);
        mask.set(5, 5, 1.0);
        let (ai, am) = apply_augment_ops(&img, &mask, &ops).unwrap();
        assert_eq!(am, mask);
        assert_ne!(ai, img);
    }

    #[test]
    fn kind_plan_honours_ratios_exactly() {
        let mut cfg = cfg();
        cfg.count = 40;
        cfg.authentic_fraction = 0.25;
        cfg.inpaint_fraction = 0.5;
        let kinds = plan_kinds(&cfg, 11);
        let auth = kinds.iter().filter(|k| **k == ManipulationKind::Authentic).count();
        let inp = kinds.iter().filter(|k| **k == ManipulationKind::Inpaint).count();
        let cp = kinds.iter().filter(|k| **k == ManipulationKind::CopyPaste).count();
        assert_eq!(auth, 10);
        assert_eq!(inp, 15);
        assert_eq!(cp, 15);
        assert_eq!(plan_kinds(&cfg, 11), kinds);
    }

    #[test]
    fn samples_are_reproducible_and_masks_binary() {
        let cfg = cfg();
        for (i, kind) in [
            (0usize, ManipulationKind::CopyPaste),
            (1, ManipulationKind::Inpaint),
            (2, ManipulationKind::Authentic),
        ] {
            let a = generate_sample(&cfg, 21, i, kind).unwrap();
            let b = generate_sample(&cfg, 21, i, kind).unwrap();
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
            assert!(a.mask.is_binary());
            assert_eq!(a.mask.dims(), a.image.dims());
            match kind {
                ManipulationKind::Authentic => assert_eq!(a.mask.count_positive(), 0),
                _ => assert!(a.mask.count_positive() > 0),
            }
        }
    }
}

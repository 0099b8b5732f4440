//! Scoring and experiment harnesses: fixed-threshold pixel F1, robustness
//! degradation sweeps, and the ensemble-stability study.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::{add_gaussian_noise, gaussian_blur, jpeg_roundtrip, ColorImage, MaskImage};
use crate::rng;

/// Reference ensemble study at full scale: (ensemble size, mean F1, std of
/// five runs). Kept as the trend the desk-scale study is compared against.
pub const REFERENCE_ENSEMBLE_STABILITY: [(usize, f64, f64); 4] = [
    (1, 0.7185, 0.0042),
    (3, 0.7392, 0.0028),
    (5, 0.7461, 0.0015),
    (10, 0.7483, 0.0018),
];

/// Scoring options. `empty_empty_score` is the convention for images whose
/// ground truth has no positive pixels: with no predicted positives either
/// they score this value (default 1.0); any predicted positive scores 0.
#[derive(Debug, Clone, Copy)]
pub struct F1Options {
    pub threshold: f32,
    pub empty_empty_score: f64,
}

impl Default for F1Options {
    fn default() -> Self {
        Self { threshold: 0.5, empty_empty_score: 1.0 }
    }
}

/// (TP, FP, FN) after binarizing `pred` at `threshold`. `gt` must be binary.
pub fn confusion_counts(
    pred: &MaskImage,
    gt: &MaskImage,
    threshold: f32,
) -> Result<(u64, u64, u64)> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction dims {:?} do not match ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    if !gt.is_binary() {
        return Err(Error::Input("ground-truth mask must be binary".into()));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (p, g) in pred.data().iter().zip(gt.data().iter()) {
        let p = *p >= threshold;
        let g = *g == 1.0;
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fn_))
}

/// Pixel F1 = 2TP / (2TP + FP + FN) at a fixed threshold.
pub fn pixel_f1(pred: &MaskImage, gt: &MaskImage, threshold: f32) -> Result<f64> {
    pixel_f1_with(pred, gt, &F1Options { threshold, ..Default::default() })
}

pub fn pixel_f1_with(pred: &MaskImage, gt: &MaskImage, opts: &F1Options) -> Result<f64> {
    let (tp, fp, fn_) = confusion_counts(pred, gt, opts.threshold)?;
    if tp + fn_ == 0 {
        // Ground truth has no positives.
        return Ok(if fp == 0 { opts.empty_empty_score } else { 0.0 });
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64))
}

/// Per-image scores of one evaluation pass and their macro average.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_image: Vec<f64>,
    pub mean: f64,
}

impl EvalReport {
    pub fn from_scores(per_image: Vec<f64>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Input("evaluation needs at least one image".into()));
        }
        if per_image.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Input("scores must lie in [0, 1]".into()));
        }
        let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
        Ok(Self { per_image, mean })
    }
}

/// Score an inference function over a test set at a fixed threshold.
pub fn evaluate_set(
    mut infer: impl FnMut(&ColorImage) -> Result<MaskImage>,
    set: &[(ColorImage, MaskImage)],
    threshold: f32,
) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(set.len());
    for (image, gt) in set {
        let pred = infer(image)?;
        scores.push(pixel_f1(&pred, gt, threshold)?);
    }
    EvalReport::from_scores(scores)
}

/// Degradation axis of the robustness sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    /// Level is the JPEG quality; 100 means identity.
    JpegQuality,
    /// Level is the blur sigma in pixels; 0 means identity.
    GaussianBlur,
    /// Level is the noise sigma in [0,1] intensity units; 0 means identity.
    GaussianNoise,
}

impl Perturbation {
    pub const ALL: [Perturbation; 3] =
        [Perturbation::JpegQuality, Perturbation::GaussianBlur, Perturbation::GaussianNoise];
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Perturbation::JpegQuality => "jpeg_quality",
            Perturbation::GaussianBlur => "gaussian_blur",
            Perturbation::GaussianNoise => "gaussian_noise",
        };
        f.write_str(s)
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jpeg_quality" | "jpeg" => Ok(Perturbation::JpegQuality),
            "gaussian_blur" | "blur" => Ok(Perturbation::GaussianBlur),
            "gaussian_noise" | "noise" => Ok(Perturbation::GaussianNoise),
            other => Err(Error::Config(format!("unknown perturbation {other}"))),
        }
    }
}

/// Apply one degradation level to a test image. Ground-truth masks are never
/// touched by the sweep.
pub fn perturb_image(
    img: &ColorImage,
    perturbation: Perturbation,
    level: f64,
    noise_rng: &mut rng::StreamRng,
) -> Result<ColorImage> {
    match perturbation {
        Perturbation::JpegQuality => jpeg_roundtrip(img, level.round().clamp(1.0, 100.0) as u8),
        Perturbation::GaussianBlur => Ok(gaussian_blur(img, level as f32)),
        Perturbation::GaussianNoise => Ok(add_gaussian_noise(img, level as f32, noise_rng)),
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub level: f64,
    pub mean_f1: f64,
}

/// For each level, perturb every test image, run inference, and record the
/// mean F1. Noise draws are seeded per (level, image) so the sweep is
/// reproducible.
pub fn robustness_sweep(
    mut infer: impl FnMut(&ColorImage) -> Result<MaskImage>,
    set: &[(ColorImage, MaskImage)],
    perturbation: Perturbation,
    levels: &[f64],
    threshold: f32,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if set.is_empty() {
        return Err(Error::Input("robustness sweep needs a non-empty test set".into()));
    }
    let mut out = Vec::with_capacity(levels.len());
    for (li, &level) in levels.iter().enumerate() {
        let mut scores = Vec::with_capacity(set.len());
        for (ii, (image, gt)) in set.iter().enumerate() {
            let mut noise_rng = rng::substream(seed, (li * set.len() + ii) as u64);
            let degraded = perturb_image(image, perturbation, level, &mut noise_rng)?;
            let pred = infer(&degraded)?;
            scores.push(pixel_f1(&pred, gt, threshold)?);
        }
        out.push(SweepPoint { level, mean_f1: EvalReport::from_scores(scores)?.mean });
    }
    Ok(out)
}

/// One row of the ensemble-stability study.
#[derive(Debug, Clone)]
pub struct StabilityRow {
    pub ensemble: usize,
    pub runs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Repeat a full-set evaluation `runs` times per ensemble size with derived
/// seeds, reporting mean and standard deviation of the mean F1.
pub fn ensemble_stability(
    mut run: impl FnMut(usize, u64) -> Result<f64>,
    n_values: &[usize],
    runs: usize,
    base_seed: u64,
) -> Result<Vec<StabilityRow>> {
    if runs < 2 {
        return Err(Error::Input("stability study needs at least two runs".into()));
    }
    let mut out = Vec::with_capacity(n_values.len());
    for (ni, &n) in n_values.iter().enumerate() {
        let mut scores = Vec::with_capacity(runs);
        for r in 0..runs {
            let seed = rng::derive_seed(base_seed, (ni * runs + r) as u64);
            scores.push(run(n, seed)?);
        }
        let mean = scores.iter().sum::<f64>() / runs as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        out.push(StabilityRow { ensemble: n, runs: scores, mean, std: var.sqrt() });
    }
    Ok(out)
}

/// Two-column CSV: `level,mean_f1`.
pub fn write_sweep_csv<P: AsRef<Path>>(path: P, points: &[SweepPoint]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "level,mean_f1")?;
    for p in points {
        writeln!(f, "{},{}", p.level, p.mean_f1)?;
    }
    Ok(())
}

/// CSV schema: `ensemble,mean,std,run_0,...,run_{k-1}`.
pub fn write_stability_csv<P: AsRef<Path>>(path: P, rows: &[StabilityRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let runs = rows.first().map(|r| r.runs.len()).unwrap_or(0);
    let run_cols: Vec<String> = (0..runs).map(|i| format!("run_{i}")).collect();
    writeln!(f, "ensemble,mean,std,{}", run_cols.join(","))?;
    for r in rows {
        let runs: Vec<String> = r.runs.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{},{},{},{}", r.ensemble, r.mean, r.std, runs.join(","))?;
    }
    Ok(())
}

/// Per-image CSV: `index,f1` plus a trailing `mean` row.
pub fn write_report_csv<P: AsRef<Path>>(path: P, report: &EvalReport) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "index,f1")?;
    for (i, s) in report.per_image.iter().enumerate() {
        writeln!(f, "{i},{s}")?;
    }
    writeln!(f, "mean,{}", report.mean)?;
    Ok(())
}

/// Minimal line-chart SVG for a sweep curve: axes, ticks, one polyline.
pub fn write_sweep_svg<P: AsRef<Path>>(
    path: P,
    title: &str,
    x_label: &str,
    points: &[SweepPoint],
) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Input("cannot plot an empty sweep".into()));
    }
    let (w, h) = (640.0f64, 420.0f64);
    let (ml, mr, mt, mb) = (70.0, 25.0, 45.0, 55.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let xs: Vec<f64> = points.iter().map(|p| p.level).collect();
    let xmin = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if (xmax - xmin).abs() < 1e-12 { 1.0 } else { xmax - xmin };
    let px = |x: f64| ml + (x - xmin) / span * pw;
    let py = |y: f64| mt + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        w / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph
    ));
    // y ticks at 0, 0.25, 0.5, 0.75, 1
    for i in 0..=4 {
        let y = i as f64 * 0.25;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y2}\" x2=\"{ml}\" y2=\"{y2}\" stroke=\"black\"/><text x=\"{}\" y=\"{y3}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{y:.2}</text>\n",
            ml - 5.0,
            ml - 9.0,
            y2 = py(y),
            y3 = py(y) + 4.0
        ));
    }
    // x ticks at the data points
    for p in points {
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/><text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            mt + ph,
            mt + ph + 5.0,
            mt + ph + 20.0,
            p.level,
            x = px(p.level)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{x_label}</text>\n",
        ml + pw / 2.0,
        h - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">mean F1</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0
    ));
    let poly: Vec<String> =
        points.iter().map(|p| format!("{:.2},{:.2}", px(p.level), py(p.mean_f1))).collect();
    svg.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>\n",
        poly.join(" ")
    ));
    for p in points {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#1f77b4\"/>\n",
            px(p.level),
            py(p.mean_f1)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, data: &[f32]) -> MaskImage {
        MaskImage::new(h, w, data.to_vec()).unwrap()
    }

    /// Brute-force oracle: per-pixel confusion counts with no shortcuts.
    fn brute_force_f1(pred: &MaskImage, gt: &MaskImage, thr: f32, empty: f64) -> f64 {
        let (h, w) = gt.dims();
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for r in 0..h {
            for c in 0..w {
                let p = pred.get(r, c) >= thr;
                let g = gt.get(r, c) == 1.0;
                if p && g {
                    tp += 1;
                } else if p && !g {
                    fp += 1;
                } else if !p && g {
                    fn_ += 1;
                }
            }
        }
        if tp + fn_ == 0 {
            return if fp == 0 { empty } else { 0.0 };
        }
        if tp == 0 {
            return 0.0;
        }
        2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = mask(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(pixel_f1(&gt, &gt, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn all_negative_prediction_scores_zero_when_gt_has_positives() {
        let gt = mask(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let pred = MaskImage::zeros(2, 2);
        assert_eq!(pixel_f1(&pred, &gt, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_two_thirds() {
        // pred [[1,0],[0,0]] vs gt [[1,1],[0,0]]: TP=1, FP=0, FN=1 -> 2/3
        let pred = mask(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let gt = mask(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let f1 = pixel_f1(&pred, &gt, 0.5).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_gt_convention() {
        let gt = MaskImage::zeros(2, 2);
        let empty_pred = MaskImage::zeros(2, 2);
        assert_eq!(pixel_f1(&empty_pred, &gt, 0.5).unwrap(), 1.0);
        let fp_pred = mask(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(pixel_f1(&fp_pred, &gt, 0.5).unwrap(), 0.0);
        let opts = F1Options { threshold: 0.5, empty_empty_score: 0.25 };
        assert_eq!(pixel_f1_with(&empty_pred, &gt, &opts).unwrap(), 0.25);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let a = MaskImage::zeros(2, 2);
        let b = MaskImage::zeros(2, 3);
        assert!(matches!(pixel_f1(&a, &b, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn matches_brute_force_on_random_masks() {
        let mut r = crate::rng::seeded(1234);
        use rand::Rng;
        for _ in 0..100 {
            let data_p: Vec<f32> = (0..256).map(|_| r.random::<f32>()).collect();
            let data_g: Vec<f32> =
                (0..256).map(|_| if r.random::<f32>() < 0.4 { 1.0 } else { 0.0 }).collect();
            let pred = mask(16, 16, &data_p);
            let gt = mask(16, 16, &data_g);
            let ours = pixel_f1(&pred, &gt, 0.5).unwrap();
            let oracle = brute_force_f1(&pred, &gt, 0.5, 1.0);
            assert_eq!(ours, oracle);
        }
    }

    #[test]
    fn identity_levels_match_the_clean_score_exactly() {
        // quality=100 / blur 0 / noise 0 leave images untouched, so the sweep
        // point equals the clean-set score bit for bit.
        let mut r = crate::rng::seeded(5);
        let set: Vec<(crate::image::ColorImage, MaskImage)> = (0..4)
            .map(|i| {
                let img = crate::synth::base_texture(16, 16, &mut r);
                let gt = crate::synth::region_mask(
                    &crate::synth::SynthConfig { height: 16, width: 16, ..Default::default() },
                    9,
                    i,
                )
                .unwrap();
                (img, gt)
            })
            .collect();
        // stub model: predict from the image's red plane
        let infer = |img: &crate::image::ColorImage| {
            let data: Vec<f32> = (0..img.height() * img.width())
                .map(|i| img.planes()[i].clamp(0.0, 1.0))
                .collect();
            MaskImage::new(img.height(), img.width(), data)
        };
        let clean = evaluate_set(infer, &set, 0.5).unwrap();
        for (pert, level) in [
            (Perturbation::JpegQuality, 100.0),
            (Perturbation::GaussianBlur, 0.0),
            (Perturbation::GaussianNoise, 0.0),
        ] {
            let sweep = robustness_sweep(infer, &set, pert, &[level], 0.5, 3).unwrap();
            assert_eq!(sweep[0].mean_f1, clean.mean, "{pert} identity level");
        }
    }

    #[test]
    fn stability_with_identical_seeds_has_zero_std() {
        let rows = ensemble_stability(|_, _| Ok(0.625), &[1, 5], 2, 0).unwrap();
        for row in rows {
            assert_eq!(row.std, 0.0);
            assert_eq!(row.mean, 0.625);
        }
    }

    #[test]
    fn stability_requires_two_runs() {
        assert!(ensemble_stability(|_, _| Ok(0.5), &[1], 1, 0).is_err());
    }

    #[test]
    fn report_mean_is_arithmetic_mean() {
        let r = EvalReport::from_scores(vec![0.25, 0.75, 0.5]).unwrap();
        assert!((r.mean - 0.5).abs() < 1e-12);
        assert!(EvalReport::from_scores(vec![]).is_err());
        assert!(EvalReport::from_scores(vec![1.5]).is_err());
    }

    #[test]
    fn unknown_perturbation_rejected() {
        assert!("sharpen".parse::<Perturbation>().is_err());
        assert_eq!("jpeg".parse::<Perturbation>().unwrap(), Perturbation::JpegQuality);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn threshold_monotonicity_of_predicted_positives(
            values in proptest::collection::vec(0.0f32..1.0, 64),
            t1 in 0.0f32..1.0,
            t2 in 0.0f32..1.0,
        ) {
            // Raising the threshold never increases TP + FP.
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let pred = MaskImage::new(8, 8, values.clone()).unwrap();
            let gt = MaskImage::new(8, 8, values.iter().map(|v| if *v > 0.5 { 1.0 } else { 0.0 }).collect()).unwrap();
            let (tp_lo, fp_lo, _) = confusion_counts(&pred, &gt, lo).unwrap();
            let (tp_hi, fp_hi, _) = confusion_counts(&pred, &gt, hi).unwrap();
            prop_assert!(tp_hi + fp_hi <= tp_lo + fp_lo);
        }
    }
}

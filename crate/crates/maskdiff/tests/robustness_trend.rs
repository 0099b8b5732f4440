//! Long-running study: Gaussian-noise degradation of the diffusion model
//! versus a deterministic baseline trained identically. The diffusion model
//! trains on noisy latents, so its accuracy should fall off more slowly as
//! test-time noise grows; asserted as a trend, not a constant.
//!
//! Ignored by default; run with
//! `cargo test -p maskdiff --test robustness_trend -- --ignored --nocapture`.

use maskdiff::baseline::{train_baseline, DirectSegmenter};
use maskdiff::codec::CodecConfig;
use maskdiff::denoiser::DenoiserConfig;
use maskdiff::edges::EdgeConfig;
use maskdiff::eval::{self, Perturbation};
use maskdiff::image::{ColorImage, MaskImage};
use maskdiff::sampling::{infer, InferModel, SamplerConfig};
use maskdiff::schedule::ScheduleConfig;
use maskdiff::synth::{self, AugmentConfig, SynthConfig};
use maskdiff::training::{self, DiffusionTrainSetup, DistillConfig, TrainConfig};

fn dataset(seed: u64, count: usize) -> Vec<(ColorImage, MaskImage)> {
    let cfg = SynthConfig { count, ..Default::default() };
    synth::plan_kinds(&cfg, seed)
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            let s = synth::generate_sample(&cfg, seed, i, kind).expect("synthesis");
            (s.image, s.mask)
        })
        .collect()
}

/// Least-squares slope of mean F1 against the noise level.
fn slope(points: &[eval::SweepPoint]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.level).sum::<f64>() / n;
    let my = points.iter().map(|p| p.mean_f1).sum::<f64>() / n;
    let num: f64 = points.iter().map(|p| (p.level - mx) * (p.mean_f1 - my)).sum();
    let den: f64 = points.iter().map(|p| (p.level - mx).powi(2)).sum();
    num / den
}

#[test]
#[ignore = "trains two models; several tens of minutes on CPU"]
fn gaussian_noise_degrades_diffusion_less_than_deterministic_baseline() {
    let train = dataset(1, 160);
    let test = dataset(2, 64);
    let synth_cfg = SynthConfig::default();
    let codec_cfg = CodecConfig::default();
    let distill = DistillConfig::default();
    let masks: Vec<MaskImage> = (0..600)
        .map(|i| synth::region_mask(&synth_cfg, 5, i))
        .collect::<maskdiff::Result<_>>()
        .unwrap();
    let (teacher, tstore, _) = training::train_teacher(&masks, &codec_cfg, &distill).unwrap();
    let teacher_tensors = tstore.tensors().unwrap();
    let (codec, codec_store, _) =
        training::distill_student(&teacher, Some(&teacher_tensors), &masks, &codec_cfg, &distill)
            .unwrap();
    let codec_tensors = codec_store.tensors().unwrap();

    let schedule_cfg = ScheduleConfig::default();
    let dn = DenoiserConfig::default();
    let edges = EdgeConfig::default();
    let augment = AugmentConfig { p_blur: 0.0, p_jpeg: 0.0, p_noise: 0.0, ..Default::default() };
    let tc = TrainConfig {
        steps: 2200,
        batch_size: 12,
        learning_rate: 1e-3,
        seed: 11,
        log_every: 250,
        ..Default::default()
    };
    let setup = DiffusionTrainSetup {
        schedule: &schedule_cfg,
        denoiser: &dn,
        edges: &edges,
        augment: &augment,
        train: &tc,
    };
    let out = training::train_diffusion(&train, &codec, &setup, &codec_tensors, None).unwrap();
    let model = InferModel {
        cond: out.cond,
        unet: out.unet,
        codec,
        schedule: schedule_cfg.build().unwrap(),
        edge_supervision: true,
    };

    // identical data, steps, optimizer recipe for the baseline
    let (baseline, _store, _) = train_baseline(&train, &dn, &augment, &tc).unwrap();

    let levels = [0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0];
    let sampler = SamplerConfig { infer_steps: 8, ensemble: 5, seed: 9, ..Default::default() };
    let diff_curve = eval::robustness_sweep(
        |img| infer(&model, img, &sampler),
        &test,
        Perturbation::GaussianNoise,
        &levels,
        0.5,
        77,
    )
    .unwrap();
    let base_curve = eval::robustness_sweep(
        |img| DirectSegmenter::infer(&baseline, img),
        &test,
        Perturbation::GaussianNoise,
        &levels,
        0.5,
        77,
    )
    .unwrap();
    let diff_slope = slope(&diff_curve);
    let base_slope = slope(&base_curve);
    println!("diffusion noise curve: {diff_curve:?}");
    println!("baseline  noise curve: {base_curve:?}");
    println!("slopes: diffusion {diff_slope:.3} vs baseline {base_slope:.3}");
    // Both slopes are negative (accuracy degrades); the diffusion model's
    // must be the shallower of the two.
    assert!(
        diff_slope > base_slope,
        "diffusion degradation slope {diff_slope:.3} should be shallower than baseline {base_slope:.3}"
    );
}

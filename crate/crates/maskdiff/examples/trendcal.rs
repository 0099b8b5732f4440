//! Trend calibration: trains edge/no-edge models on synthetic data and
//! previews the ensemble, edge-ablation, and steps-ablation orderings the
//! acceptance suite asserts. Dev tool.
//!
//! Usage: trendcal [train_steps] [train_count] [test_count]

use std::path::Path;
use std::time::Instant;

use maskdiff::checkpoint;
use maskdiff::denoiser::DenoiserConfig;
use maskdiff::edges::EdgeConfig;
use maskdiff::eval;
use maskdiff::image::{ColorImage, MaskImage};
use maskdiff::params::Params;
use maskdiff::sampling::{infer, InferModel, SamplerConfig};
use maskdiff::schedule::ScheduleConfig;
use maskdiff::synth::{self, AugmentConfig, SynthConfig};
use maskdiff::training::{self, DiffusionTrainSetup, TrainConfig};

fn dataset(seed: u64, count: usize) -> Vec<(ColorImage, MaskImage)> {
    let cfg = SynthConfig { count, ..Default::default() };
    synth::plan_kinds(&cfg, seed)
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let s = synth::generate_sample(&cfg, seed, i, k).expect("synth");
            (s.image, s.mask)
        })
        .collect()
}

fn main() -> maskdiff::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1800);
    let train_count: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(160);
    let test_count: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);

    let ckpt = Path::new("/tmp/diffcal-codec.ckpt");
    let (meta, codec, codec_tensors) = checkpoint::load_codec(ckpt)?;
    eprintln!("codec recon F1 {:.4}", meta.reconstruction_f1);

    let train = dataset(11, train_count);
    let test = dataset(12, test_count);
    let schedule_cfg = ScheduleConfig::default();
    let dn = DenoiserConfig::default();
    let edges = EdgeConfig::default();
    let augment = AugmentConfig { p_blur: 0.0, p_jpeg: 0.0, p_noise: 0.0, ..Default::default() };

    let build = |edge: bool| -> maskdiff::Result<InferModel> {
        let tc = TrainConfig {
            steps,
            batch_size: 12,
            learning_rate: 1e-3,
            edge_supervision: edge,
            seed: 31,
            log_every: 200,
            ..Default::default()
        };
        let setup = DiffusionTrainSetup {
            schedule: &schedule_cfg,
            denoiser: &dn,
            edges: &edges,
            augment: &augment,
            train: &tc,
        };
        let t0 = Instant::now();
        let out = training::train_diffusion(&train, &codec, &setup, &codec_tensors, None)?;
        eprintln!(
            "trained edge={edge} in {:.0}s (final loss {:.5})",
            t0.elapsed().as_secs_f64(),
            out.records.last().unwrap().total
        );
        let map: std::collections::HashMap<_, _> = codec_tensors.clone().into_iter().collect();
        let mut p = Params::frozen(&map);
        Ok(InferModel {
            cond: out.cond,
            unet: out.unet,
            codec: maskdiff::codec::LightVae::new(&mut p, &meta.codec)?,
            schedule: schedule_cfg.build()?,
            edge_supervision: edge,
        })
    };

    let main_model = build(true)?;
    let mean_at = |model: &InferModel, n: usize, s: usize, seed: u64| -> maskdiff::Result<f64> {
        let cfg = SamplerConfig { infer_steps: s, ensemble: n, seed, ..Default::default() };
        Ok(eval::evaluate_set(|img| infer(model, img, &cfg), &test, 0.5)?.mean)
    };

    // ensemble trend
    let t0 = Instant::now();
    let rows = eval::ensemble_stability(
        |n, seed| mean_at(&main_model, n, 8, seed),
        &[1, 5],
        5,
        777,
    )?;
    for r in &rows {
        eprintln!("ensemble N={}: mean {:.4} std {:.4} runs {:?}", r.ensemble, r.mean, r.std, r.runs);
    }
    eprintln!("stability study took {:.0}s", t0.elapsed().as_secs_f64());

    // steps trend
    let f1_8 = mean_at(&main_model, 5, 8, 4)?;
    let f1_1 = mean_at(&main_model, 5, 1, 4)?;
    eprintln!("steps trend: 8 -> {f1_8:.4}, 1 -> {f1_1:.4}");

    // edge ablation
    let noedge = build(false)?;
    let f1_edge = mean_at(&main_model, 5, 8, 3)?;
    let f1_plain = mean_at(&noedge, 5, 8, 3)?;
    eprintln!("edge ablation: with {f1_edge:.4} vs without {f1_plain:.4}");
    Ok(())
}

//! Diffusion-phase calibration: times training steps and runs a short
//! overfit probe against a cached distilled codec. Dev tool.
//!
//! Usage: diffcal [steps] [batch] [pairs] [eval_every]

use std::path::Path;
use std::time::Instant;

use maskdiff::checkpoint;
use maskdiff::codec::reconstruction_f1;
use maskdiff::denoiser::DenoiserConfig;
use maskdiff::edges::EdgeConfig;
use maskdiff::eval;
use maskdiff::image::{ColorImage, MaskImage};
use maskdiff::sampling::{infer, InferModel, SamplerConfig};
use maskdiff::schedule::ScheduleConfig;
use maskdiff::synth::{self, AugmentConfig, SynthConfig};
use maskdiff::training::{self, DiffusionTrainSetup, DistillConfig, TrainConfig};

fn codec_cached(
    path: &Path,
    synth_cfg: &SynthConfig,
) -> maskdiff::Result<(maskdiff::codec::LightVae, std::collections::BTreeMap<String, candle_core::Tensor>)>
{
    if path.exists() {
        let (meta, vae, tensors) = checkpoint::load_codec(path)?;
        eprintln!("loaded cached codec (recon F1 {:.4})", meta.reconstruction_f1);
        return Ok((vae, tensors));
    }
    let cfg = maskdiff::codec::CodecConfig::default();
    let distill = DistillConfig::default();
    let masks: Vec<MaskImage> =
        (0..600).map(|i| synth::region_mask(synth_cfg, 1, i)).collect::<maskdiff::Result<_>>()?;
    let held: Vec<MaskImage> = (0..128)
        .map(|i| synth::region_mask(synth_cfg, 2, 90_000 + i))
        .collect::<maskdiff::Result<_>>()?;
    let t0 = Instant::now();
    let (teacher, tstore, _) = training::train_teacher(&masks, &cfg, &distill)?;
    let teacher_tensors = tstore.tensors()?;
    let (student, sstore, _) =
        training::distill_student(&teacher, Some(&teacher_tensors), &masks, &cfg, &distill)?;
    let f1 = reconstruction_f1(&student, &held, 0.5)?;
    eprintln!("distilled codec: recon F1 {f1:.4} in {:.0}s", t0.elapsed().as_secs_f64());
    checkpoint::save_codec(path, &cfg, &sstore, f1)?;
    let (_, vae, tensors) = checkpoint::load_codec(path)?;
    Ok((vae, tensors))
}

fn main() -> maskdiff::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let pairs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let eval_every: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);

    let synth_cfg = SynthConfig::default();
    let (codec, codec_tensors) = codec_cached(Path::new("/tmp/diffcal-codec.ckpt"), &synth_cfg)?;

    let mut pair_cfg = synth_cfg.clone();
    pair_cfg.count = pairs;
    let kinds = synth::plan_kinds(&pair_cfg, 99);
    let dataset: Vec<(ColorImage, MaskImage)> = kinds
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let s = synth::generate_sample(&pair_cfg, 99, i, k)?;
            Ok((s.image, s.mask))
        })
        .collect::<maskdiff::Result<_>>()?;

    let schedule_cfg = ScheduleConfig::default();
    let dn = DenoiserConfig::default();
    let edges = EdgeConfig::default();
    let augment = AugmentConfig::disabled();
    let tc = TrainConfig {
        steps: if eval_every > 0 { eval_every } else { steps },
        batch_size: batch,
        learning_rate: 1e-3,
        edge_supervision: true,
        seed: 7,
        log_every: 100,
        ..Default::default()
    };

    // time a short run first
    let warm = TrainConfig { steps: 12, log_every: 0, ..tc.clone() };
    let setup = DiffusionTrainSetup {
        schedule: &schedule_cfg,
        denoiser: &dn,
        edges: &edges,
        augment: &augment,
        train: &warm,
    };
    let t0 = Instant::now();
    training::train_diffusion(&dataset, &codec, &setup, &codec_tensors, None)?;
    eprintln!(
        "diffusion step cost at batch {batch}: {:.0} ms/step",
        t0.elapsed().as_secs_f64() * 1000.0 / 12.0
    );

    // overfit probe with periodic evaluation
    let rounds = if eval_every > 0 { steps / eval_every } else { 1 };
    let mut total_trained = 0usize;
    for round in 0..rounds {
        let seed = 7 + round as u64;
        let tc_round = TrainConfig {
            steps: if eval_every > 0 { eval_every * (round + 1) } else { steps },
            seed: 7,
            ..tc.clone()
        };
        let _ = seed;
        let setup = DiffusionTrainSetup {
            schedule: &schedule_cfg,
            denoiser: &dn,
            edges: &edges,
            augment: &augment,
            train: &tc_round,
        };
        let t0 = Instant::now();
        let out = training::train_diffusion(&dataset, &codec, &setup, &codec_tensors, None)?;
        total_trained = tc_round.steps;
        let model = InferModel {
            cond: out.cond,
            unet: out.unet,
            codec: {
                let map: std::collections::HashMap<_, _> =
                    codec_tensors.clone().into_iter().collect();
                let mut p = maskdiff::params::Params::frozen(&map);
                maskdiff::codec::LightVae::new(&mut p, &maskdiff::codec::CodecConfig::default())?
            },
            schedule: schedule_cfg.build()?,
            edge_supervision: true,
        };
        let cfg = SamplerConfig { infer_steps: 8, ensemble: 5, seed: 5, ..Default::default() };
        let report = eval::evaluate_set(|img| infer(&model, img, &cfg), &dataset, 0.5)?;
        eprintln!(
            "after {total_trained} steps ({:.0}s this round): train-set F1 {:.4}",
            t0.elapsed().as_secs_f64(),
            report.mean
        );
    }
    Ok(())
}

//! Codec convergence experiments: standalone student autoencoder under
//! unweighted vs positive-weighted L1, measuring held-out round-trip F1.

use std::time::Instant;

use candle_core::Tensor;
use candle_nn::{Module, Optimizer};
use maskdiff::codec::{reconstruction_f1, CodecConfig, LightVae};
use maskdiff::image::MaskImage;
use maskdiff::params::{ParamStore, Params};
use maskdiff::rng;
use maskdiff::synth::{region_mask, SynthConfig};
use maskdiff::training::{clip_grad_norm, cosine_lr};

fn stack(masks: &[&MaskImage]) -> maskdiff::Result<Tensor> {
    let ts: Vec<Tensor> = masks.iter().map(|m| m.to_tensor()).collect::<maskdiff::Result<_>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

fn run(pos_weight: f64, steps: usize, lr: f64, batch: usize, use_mse: bool) -> maskdiff::Result<()> {
    let synth = SynthConfig::default();
    let cfg = CodecConfig::default();
    let train: Vec<MaskImage> =
        (0..600).map(|i| region_mask(&synth, 1, i)).collect::<maskdiff::Result<_>>()?;
    let held: Vec<MaskImage> =
        (0..128).map(|i| region_mask(&synth, 2, 50_000 + i)).collect::<maskdiff::Result<_>>()?;

    let mut store = ParamStore::new();
    let mut init = rng::seeded(3);
    let vae = {
        let mut p = Params::fresh(&mut store, &mut init);
        LightVae::new(&mut p, &cfg)?
    };
    let mut opt = candle_nn::AdamW::new(
        store.all_vars(),
        candle_nn::ParamsAdamW { lr, weight_decay: 1e-4, ..Default::default() },
    )?;
    let vars = store.all_vars();
    let mut batch_rng = rng::seeded(11);
    let t0 = Instant::now();
    use rand::Rng;
    for step in 0..steps {
        let idx: Vec<usize> = (0..batch).map(|_| batch_rng.random_range(0..train.len())).collect();
        let sel: Vec<&MaskImage> = idx.iter().map(|i| &train[*i]).collect();
        let y = stack(&sel)?;
        let z = vae.encode_raw(&y)?;
        let recon = vae.decode_raw(&z)?;
        let err = if use_mse {
            (recon.clone() - &y)?.sqr()?
        } else {
            (recon.clone() - &y)?.abs()?
        };
        let base = if pos_weight != 1.0 {
            let w = y.affine(pos_weight - 1.0, 1.0)?;
            (err * w)?.mean_all()?
        } else {
            err.mean_all()?
        };
        // per-sample soft dice on clamped outputs
        let p = recon.clamp(0.0, 1.0)?;
        let inter = (p.clone() * &y)?.flatten_from(1)?.sum(1)?;
        let den = (p.sqr()?.flatten_from(1)?.sum(1)? + y.sqr()?.flatten_from(1)?.sum(1)?)?;
        let dice = (inter.affine(2.0, 0.0)?.div(&den.affine(1.0, 1e-3)?))?
            .affine(-1.0, 1.0)?
            .mean_all()?;
        let loss = base.add(&dice)?;
        let v = loss.to_scalar::<f32>()? as f64;
        let mut grads = loss.backward()?;
        clip_grad_norm(&vars, &mut grads, 1.0)?;
        opt.set_learning_rate(cosine_lr(step, steps, lr));
        opt.step(&grads)?;
        if step % 100 == 0 {
            eprintln!("[w={pos_weight}] step {step}: loss {v:.5}");
        }
        if step % 200 == 199 {
            let f1 = reconstruction_f1(&vae, &held[..64], 0.5)?;
            let rmin = recon.min_all()?.to_scalar::<f32>()?;
            let rmax = recon.max_all()?.to_scalar::<f32>()?;
            let inside = (recon.clone() * &y)?.sum_all()?.to_scalar::<f32>()?
                / y.sum_all()?.to_scalar::<f32>()?.max(1.0);
            eprintln!(
                "[w={pos_weight}] step {step}: interim F1 {f1:.4} recon range [{rmin:.3}, {rmax:.3}] mean-inside {inside:.3}"
            );
            use maskdiff::codec::MaskCodec;
            let sample = &held[0];
            let dec = vae.decode(&vae.encode(sample)?)?;
            let (tp, fp, fn_) = maskdiff::eval::confusion_counts(&dec, sample, 0.5)?;
            eprintln!("  held[0]: tp {tp} fp {fp} fn {fn_}");
            for r in (0..64).step_by(2) {
                let mut line = String::new();
                for c in (0..64).step_by(2) {
                    let g = sample.get(r, c) == 1.0;
                    let p = dec.get(r, c) >= 0.5;
                    line.push(match (g, p) {
                        (true, true) => '#',
                        (true, false) => '-',
                        (false, true) => '+',
                        (false, false) => '.',
                    });
                }
                eprintln!("  {line}");
            }
        }
    }
    let f1 = reconstruction_f1(&vae, &held, 0.5)?;
    eprintln!(
        "[w={pos_weight}] {} steps lr {lr} batch {batch}: F1 {f1:.4} in {:.0}s",
        steps,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn main() -> maskdiff::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let w: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(800);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);
    let use_mse = args.get(5).map(|s| s == "mse").unwrap_or(false);
    run(w, steps, lr, batch, use_mse)
}

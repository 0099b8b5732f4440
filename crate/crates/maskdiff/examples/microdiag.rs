//! Minimal divergence repro: one conv stack matching large-scale targets.

use candle_nn::{loss::mse, Optimizer};
use maskdiff::params::{ParamStore, Params};
use maskdiff::rng;
use maskdiff::training::clip_grad_norm;

fn main() -> maskdiff::Result<()> {
    let mut store = ParamStore::new();
    let mut r = rng::seeded(0);
    let (c1, c2, c3) = {
        let mut p = Params::fresh(&mut store, &mut r);
        (
            p.conv("c1", 1, 16, 3, 2, 1)?,
            p.conv("c2", 16, 32, 3, 2, 1)?,
            p.conv("c3", 32, 4, 3, 2, 1)?,
        )
    };
    let mut opt = candle_nn::AdamW::new(
        store.all_vars(),
        candle_nn::ParamsAdamW { lr: 2e-3, weight_decay: 1e-4, ..Default::default() },
    )?;
    let vars = store.all_vars();
    use candle_nn::Module;

    let x = rng::randn_tensor(&mut r, &[8, 1, 64, 64])?;
    let target = rng::randn_tensor(&mut r, &[8, 4, 8, 8])?.affine(5.5, 0.0)?;
    for step in 0..400 {
        let h = candle_nn::ops::silu(&c1.forward(&x)?)?;
        let h = candle_nn::ops::silu(&c2.forward(&h)?)?;
        let z = c3.forward(&h)?;
        let loss = mse(&z, &target)?;
        let v = loss.to_scalar::<f32>()?;
        if step % 50 == 0 {
            let znorm = z.sqr()?.mean_all()?.to_scalar::<f32>()?.sqrt();
            println!("step {step}: mse {v:.3} z_rms {znorm:.3}");
        }
        let mut grads = loss.backward()?;
        clip_grad_norm(&vars, &mut grads, 1.0)?;
        opt.set_learning_rate(2e-3);
        opt.step(&grads)?;
    }
    Ok(())
}

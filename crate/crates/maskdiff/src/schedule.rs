//! Closed-form diffusion math: the β/ᾱ noise schedule, the forward marginal
//! q(z_t | z_0), and the error-prior perturbation used to build training
//! inputs.
//!
//! Timesteps are indexed 1..=T; `alpha_bar(0) == 1` is the clean boundary so
//! the final reverse transition emits the clean prediction exactly. All
//! Gaussian draws enter as explicit arguments, so every identity here is
//! testable deterministically.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::latent::LatentGrid;

/// Serializable schedule parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// β sequence and cumulative ᾱ products governing the forward and reverse
/// processes.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// alpha_bars[t] = ∏_{s<=t} (1 - β_s), with alpha_bars[0] = 1.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β schedule from `beta_start` to `beta_end` inclusive over
    /// `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid beta bounds: need 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0f64;
        for beta in &betas {
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t < 1 || t > self.steps() {
            return Err(Error::Index(format!("beta index {t} out of 1..={}", self.steps())));
        }
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for t in 0..=T, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Index(format!("alpha_bar index {t} out of 0..={}", self.steps())))
    }

    /// (√ᾱ_t, √(1−ᾱ_t)) — the affine coefficients of the forward marginal.
    pub fn marginal_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

/// Error-prior configuration: the rate λ of the training-time perturbation
/// z_0 + λξ that models iterative sampling error.
#[derive(Debug, Clone, Copy)]
pub struct ErrorPriorConfig {
    lambda: f64,
}

impl ErrorPriorConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::Config(format!("prior rate must be non-negative, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn disabled() -> Self {
        Self { lambda: 0.0 }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// ζ_t = √ᾱ_t · λ, the standard deviation of the prior perturbation as it
    /// appears inside the marginal. Decreases monotonically in t.
    pub fn zeta(&self, t: usize, schedule: &NoiseSchedule) -> Result<f64> {
        Ok(schedule.alpha_bar(t)?.sqrt() * self.lambda)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what} shape {:?} does not match {:?}",
            b.dims(),
            a.dims()
        )));
    }
    Ok(())
}

/// √ᾱ·z0 + √(1−ᾱ)·eps on raw tensors, with a fixed ᾱ.
pub fn marginal_tensor(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    check_same_shape(z0, eps, "noise")?;
    let signal = z0.affine(alpha_bar.sqrt(), 0.0)?;
    let noise = eps.affine((1.0 - alpha_bar).sqrt(), 0.0)?;
    Ok((signal + noise)?)
}

/// Sample z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·eps from the forward marginal.
pub fn forward_marginal(
    z0: &LatentGrid,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    let ab = schedule.alpha_bar(t)?;
    let out = marginal_tensor(z0.tensor(), eps, ab)?;
    LatentGrid::new(out, z0.scale())
}

/// Sample ẑ_t = √ᾱ_t·(z0 + λ·ξ) + √(1−ᾱ_t)·ε, the error-prior training input.
///
/// With λ = 0 this takes exactly the same code path as [`forward_marginal`],
/// so the two agree bitwise for identical draws.
pub fn perturb_with_error_prior(
    z0: &LatentGrid,
    t: usize,
    eps: &Tensor,
    xi: &Tensor,
    prior: &ErrorPriorConfig,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    let ab = schedule.alpha_bar(t)?;
    if prior.lambda() == 0.0 {
        let out = marginal_tensor(z0.tensor(), eps, ab)?;
        return LatentGrid::new(out, z0.scale());
    }
    check_same_shape(z0.tensor(), xi, "prior noise")?;
    let z0_eff = (z0.tensor() + xi.affine(prior.lambda(), 0.0)?)?;
    let out = marginal_tensor(&z0_eff, eps, ab)?;
    LatentGrid::new(out, z0.scale())
}

/// Batched forward marginal with a per-sample timestep vector. `z0` and `eps`
/// are [B, C, h, w]; `ts[i]` applies to sample i.
pub fn marginal_batch(
    z0: &Tensor,
    eps: &Tensor,
    ts: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    prior_batch(z0, eps, None, ts, &ErrorPriorConfig::disabled(), schedule)
}

/// Batched error-prior perturbation with per-sample timesteps.
pub fn prior_batch(
    z0: &Tensor,
    eps: &Tensor,
    xi: Option<&Tensor>,
    ts: &[usize],
    prior: &ErrorPriorConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    check_same_shape(z0, eps, "noise")?;
    let batch = z0.dims()[0];
    if ts.len() != batch {
        return Err(Error::Shape(format!(
            "timestep vector length {} does not match batch {batch}",
            ts.len()
        )));
    }
    let mut signal_coef = Vec::with_capacity(batch);
    let mut noise_coef = Vec::with_capacity(batch);
    for &t in ts {
        let (s, n) = schedule.marginal_coeffs(t)?;
        signal_coef.push(s as f32);
        noise_coef.push(n as f32);
    }
    let dev = z0.device();
    let s = Tensor::from_vec(signal_coef, (batch, 1, 1, 1), dev)?;
    let n = Tensor::from_vec(noise_coef, (batch, 1, 1, 1), dev)?;
    let z0_eff = if prior.lambda() > 0.0 {
        let xi = xi.ok_or_else(|| Error::Input("error prior needs a xi draw".into()))?;
        check_same_shape(z0, xi, "prior noise")?;
        (z0 + xi.affine(prior.lambda(), 0.0)?)?
    } else {
        z0.clone()
    };
    Ok((z0_eff.broadcast_mul(&s)? + eps.broadcast_mul(&n)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    /// ᾱ_1000 of the default linear schedule, frozen from a direct f64
    /// running product cross-checked against an exp(Σ ln) evaluation
    /// (relative difference 4.5e-15).
    const ALPHA_BAR_1000: f64 = 4.035_829_765_375_675_4e-5;
    const ALPHA_BAR_500: f64 = 7.858_724_288_177_820_8e-2;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn paper_scale_schedule_has_length_1000() {
        let s = default_schedule();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.steps(), 1);
        assert_eq!(s.beta(1).unwrap(), 0.5);
        assert_eq!(s.alpha_bar(1).unwrap(), 0.5);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn alpha_bar_regression_constants() {
        let s = default_schedule();
        let rel = |a: f64, b: f64| (a - b).abs() / b;
        assert!(rel(s.alpha_bar(1000).unwrap(), ALPHA_BAR_1000) < 1e-12);
        assert!(rel(s.alpha_bar(500).unwrap(), ALPHA_BAR_500) < 1e-12);
        assert!((s.alpha_bar(1).unwrap() - (1.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn alpha_bars_strictly_decreasing_and_product_consistent() {
        let s = default_schedule();
        let mut prod = 1.0f64;
        for t in 1..=s.steps() {
            prod *= 1.0 - s.beta(t).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            assert!(ab > 0.0 && ab < 1.0);
            assert!(ab < s.alpha_bar(t - 1).unwrap());
            assert!((ab - prod).abs() / prod < 1e-12);
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn marginal_at_t0_is_identity() {
        let s = default_schedule();
        let mut r = rng::seeded(3);
        let z0 = LatentGrid::new(rng::randn_tensor(&mut r, &[2, 4, 4]).unwrap(), 1.0).unwrap();
        let eps = rng::randn_tensor(&mut r, &[2, 4, 4]).unwrap();
        let out = forward_marginal(&z0, 0, &eps, &s).unwrap();
        assert_eq!(out.to_vec().unwrap(), z0.to_vec().unwrap());
    }

    #[test]
    fn marginal_with_zero_signal_is_scaled_noise() {
        let s = default_schedule();
        let mut r = rng::seeded(4);
        let z0 = LatentGrid::from_vec(vec![0.0; 32], (2, 4, 4), 1.0).unwrap();
        let eps = rng::randn_tensor(&mut r, &[2, 4, 4]).unwrap();
        for t in [1usize, 17, 500, 1000] {
            let out = forward_marginal(&z0, t, &eps, &s).unwrap();
            let coef = (1.0 - s.alpha_bar(t).unwrap()).sqrt();
            let eps_v = eps.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            for (o, e) in out.to_vec().unwrap().iter().zip(eps_v.iter()) {
                assert!((o - coef as f32 * e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn marginal_rejects_bad_inputs() {
        let s = default_schedule();
        let mut r = rng::seeded(5);
        let z0 = LatentGrid::new(rng::randn_tensor(&mut r, &[2, 4, 4]).unwrap(), 1.0).unwrap();
        let eps = rng::randn_tensor(&mut r, &[2, 4, 4]).unwrap();
        assert!(matches!(forward_marginal(&z0, 1001, &eps, &s), Err(crate::Error::Index(_))));
        let small = rng::randn_tensor(&mut r, &[2, 4, 2]).unwrap();
        assert!(matches!(forward_marginal(&z0, 10, &small, &s), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn marginal_is_affine_in_inputs() {
        // Probe with basis inputs: coefficient of z0 is sqrt(alpha_bar),
        // coefficient of eps is sqrt(1 - alpha_bar).
        let s = default_schedule();
        let t = 321;
        let ones = LatentGrid::from_vec(vec![1.0; 16], (1, 4, 4), 1.0).unwrap();
        let zeros_t = candle_core::Tensor::zeros((1, 4, 4), candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
        let (cs, cn) = s.marginal_coeffs(t).unwrap();
        let sig = forward_marginal(&ones, t, &zeros_t, &s).unwrap();
        for v in sig.to_vec().unwrap() {
            assert!((v as f64 - cs).abs() < 1e-7);
        }
        let zeros = LatentGrid::from_vec(vec![0.0; 16], (1, 4, 4), 1.0).unwrap();
        let ones_t = candle_core::Tensor::ones((1, 4, 4), candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
        let noi = forward_marginal(&zeros, t, &ones_t, &s).unwrap();
        for v in noi.to_vec().unwrap() {
            assert!((v as f64 - cn).abs() < 1e-7);
        }
    }

    #[test]
    fn prior_with_zero_lambda_matches_marginal_bitwise() {
        let s = default_schedule();
        let mut r = rng::seeded(6);
        let z0 = LatentGrid::new(rng::randn_tensor(&mut r, &[2, 4, 4]).unwrap(), 1.0).unwrap();
        let eps = rng::randn_tensor(&mut r, &[2, 4, 4]).unwrap();
        let xi = rng::randn_tensor(&mut r, &[2, 4, 4]).unwrap();
        let prior = ErrorPriorConfig::new(0.0).unwrap();
        for t in [1usize, 250, 1000] {
            let a = forward_marginal(&z0, t, &eps, &s).unwrap();
            let b = perturb_with_error_prior(&z0, t, &eps, &xi, &prior, &s).unwrap();
            let av = a.to_vec().unwrap();
            let bv = b.to_vec().unwrap();
            assert!(av.iter().zip(bv.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(matches!(ErrorPriorConfig::new(-0.1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zeta_is_monotone_decreasing_in_t() {
        let s = default_schedule();
        let prior = ErrorPriorConfig::new(0.1).unwrap();
        let mut prev = prior.zeta(0, &s).unwrap();
        assert!((prev - 0.1).abs() < 1e-12);
        for t in 1..=s.steps() {
            let z = prior.zeta(t, &s).unwrap();
            assert!(z < prev, "zeta must decrease: zeta({t}) = {z} vs {prev}");
            prev = z;
        }
    }

    #[test]
    fn batched_prior_matches_single_sample_path() {
        let s = default_schedule();
        let prior = ErrorPriorConfig::new(0.1).unwrap();
        let mut r = rng::seeded(9);
        let z0 = rng::randn_tensor(&mut r, &[3, 2, 4, 4]).unwrap();
        let eps = rng::randn_tensor(&mut r, &[3, 2, 4, 4]).unwrap();
        let xi = rng::randn_tensor(&mut r, &[3, 2, 4, 4]).unwrap();
        let ts = [7usize, 512, 1000];
        let batched = prior_batch(&z0, &eps, Some(&xi), &ts, &prior, &s).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let z0_i = LatentGrid::new(z0.narrow(0, i, 1).unwrap().squeeze(0).unwrap(), 1.0).unwrap();
            let eps_i = eps.narrow(0, i, 1).unwrap().squeeze(0).unwrap();
            let xi_i = xi.narrow(0, i, 1).unwrap().squeeze(0).unwrap();
            let single = perturb_with_error_prior(&z0_i, t, &eps_i, &xi_i, &prior, &s).unwrap();
            let got = batched.narrow(0, i, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let want = single.to_vec().unwrap();
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generated_schedules_keep_invariants(
            steps in 1usize..64,
            start in 1e-5f64..0.01,
            spread in 0.0f64..0.5,
        ) {
            let end = (start + spread * 0.05).min(0.9);
            let s = NoiseSchedule::linear(steps, start, end).unwrap();
            let mut prod = 1.0f64;
            for t in 1..=steps {
                prod *= 1.0 - s.beta(t).unwrap();
                let ab = s.alpha_bar(t).unwrap();
                prop_assert!(ab > 0.0 && ab < 1.0);
                prop_assert!(ab < s.alpha_bar(t - 1).unwrap());
                prop_assert!((ab - prod).abs() / prod < 1e-12);
            }
        }
    }
}

//! Closed-form diffusion arithmetic.
//!
//! Timesteps are 1-based (`1..=T`). Index `0` is the clean sample with
//! `alpha_bar(0) == 1`, which makes the last deterministic sampling step
//! (`tau -> 0`) well defined.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f32>,
    alphas: Vec<f32>,
    alpha_bars: Vec<f32>,
}

impl NoiseSchedule {
    /// Linear beta schedule, inclusive of both endpoints.
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidSchedule("step count must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start as f32
                } else {
                    let frac = i as f64 / (steps - 1) as f64;
                    (beta_start + (beta_end - beta_start) * frac) as f32
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f32>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidSchedule("betas must be non-decreasing".into()));
        }
        let alphas: Vec<f32> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0f32;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let last = *alpha_bars.last().unwrap_or(&1.0);
        if !(last > 0.0) || alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidSchedule(
                "cumulative alpha product underflows or is not strictly decreasing".into(),
            ));
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f32] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f32] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f32] {
        &self.alpha_bars
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f32> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// Cumulative product up to `t`, with `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f32> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    fn check(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, min: 1, max: self.steps() });
        }
        Ok(())
    }
}

/// Inference-time guidance and sampler stochasticity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Guidance temperature; `0` disables the correction.
    pub eta: f32,
    /// DDIM stochasticity as a fraction of the ancestral-equivalent sigma;
    /// `0` is the deterministic sampler.
    pub sigma: f32,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { eta: 8.0, sigma: 0.0 }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn scale(x: &Tensor, s: f32) -> Result<Tensor> {
    Ok(x.affine(s as f64, 0.0)?)
}

/// `sqrt(ab_t) * x0 + omega * sqrt(1 - ab_t) * eps`.
///
/// `omega = 1` is the usual direct sample, `omega = 0` the noiseless scaling
/// (the noise tensor is not touched at all in that case).
pub fn forward_sample(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
    omega: f32,
) -> Result<Tensor> {
    same_shape(x0, eps, "forward_sample")?;
    let ab = schedule.alpha_bar(t)?;
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::InvalidConfig(format!("omega {omega} outside [0, 1]")));
    }
    let signal = scale(x0, ab.sqrt())?;
    if omega == 0.0 {
        return Ok(signal);
    }
    Ok((signal + scale(eps, omega * (1.0 - ab).sqrt())?)?)
}

/// Per-sample direct sampling for a batch `(N, ...)` with one timestep per row.
pub fn forward_sample_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(x0, eps, "forward_sample_batch")?;
    let (signal, noise) = batch_coefficients(x0, ts, schedule)?;
    Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

fn batch_coefficients(x: &Tensor, ts: &[usize], schedule: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    let n = x.dim(0)?;
    if ts.len() != n {
        return Err(Error::ShapeMismatch(format!("{} timesteps for batch of {n}", ts.len())));
    }
    let mut shape = vec![n];
    shape.extend(std::iter::repeat_n(1, x.rank() - 1));
    let mut sig = Vec::with_capacity(n);
    let mut noi = Vec::with_capacity(n);
    for &t in ts {
        let ab = schedule.alpha_bar(t)?;
        sig.push(ab.sqrt());
        noi.push((1.0 - ab).sqrt());
    }
    let dev = x.device();
    let dt = x.dtype();
    Ok((
        Tensor::from_vec(sig, shape.as_slice(), dev)?.to_dtype(dt)?,
        Tensor::from_vec(noi, shape.as_slice(), dev)?.to_dtype(dt)?,
    ))
}

/// Clean-sample estimate `(x_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)`.
pub fn x0_estimate(xt: &Tensor, eps_pred: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    same_shape(xt, eps_pred, "x0_estimate")?;
    let ab = schedule.alpha_bar(t)?;
    let num = (xt - scale(eps_pred, (1.0 - ab).sqrt())?)?;
    scale(&num, 1.0 / ab.sqrt())
}

/// Noise correction that pulls the prediction toward consistency with `z0_target`.
pub fn guided_eps(
    eps_pred: &Tensor,
    zt: &Tensor,
    z0_target: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<Tensor> {
    same_shape(eps_pred, zt, "guided_eps")?;
    same_shape(eps_pred, z0_target, "guided_eps")?;
    let ab = schedule.alpha_bar(t)?;
    if cfg.eta == 0.0 {
        return Ok(eps_pred.clone());
    }
    let noise_scale = (1.0 - ab).sqrt();
    let z_tilde = (scale(z0_target, ab.sqrt())? + scale(eps_pred, noise_scale)?)?;
    let correction = scale(&(z_tilde - zt)?, cfg.eta * noise_scale)?;
    Ok((eps_pred - correction)?)
}

/// The DDIM sigma for `sigma_frac = 1`, i.e. the ancestral-equivalent value.
pub fn ddim_sigma(tau: usize, tau_prev: usize, schedule: &NoiseSchedule, sigma_frac: f32) -> Result<f32> {
    if sigma_frac == 0.0 {
        return Ok(0.0);
    }
    let ab = schedule.alpha_bar(tau)?;
    let ab_prev = schedule.alpha_bar(tau_prev)?;
    let var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
    Ok(sigma_frac * var.max(0.0).sqrt())
}

/// One DDIM update from `tau_i` to `tau_prev` (`0` meaning the clean sample).
///
/// `sigma` is the absolute per-step noise scale; `noise` must be given when it
/// is positive.
pub fn ddim_step(
    x_tau: &Tensor,
    eps_hat: &Tensor,
    tau_i: usize,
    tau_prev: usize,
    schedule: &NoiseSchedule,
    sigma: f32,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if tau_prev >= tau_i {
        return Err(Error::InvalidConfig(format!(
            "ddim_step needs tau_prev < tau_i, got {tau_prev} >= {tau_i}"
        )));
    }
    let ab_prev = schedule.alpha_bar(tau_prev)?;
    let rest = 1.0 - ab_prev - sigma * sigma;
    if rest < -1e-7 {
        return Err(Error::InvalidConfig(format!(
            "sigma^2 = {} exceeds 1 - alpha_bar(prev) = {}",
            sigma * sigma,
            1.0 - ab_prev
        )));
    }
    let f_theta = x0_estimate(x_tau, eps_hat, tau_i, schedule)?;
    let mut out = (scale(&f_theta, ab_prev.sqrt())? + scale(eps_hat, rest.max(0.0).sqrt())?)?;
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| {
            Error::InvalidConfig("sigma > 0 requires a noise tensor".into())
        })?;
        same_shape(x_tau, noise, "ddim_step noise")?;
        out = (out + scale(noise, sigma)?)?;
    }
    Ok(out)
}

/// Increasing timestep subsequence for the sampler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsequence {
    taus: Vec<usize>,
}

impl Subsequence {
    /// `steps` evenly spaced indices on `(0, t_hat]`, rounded and deduplicated.
    pub fn new(t_hat: usize, steps: usize) -> Result<Self> {
        if t_hat < 1 || steps < 1 {
            return Err(Error::InvalidConfig(format!(
                "subsequence needs t_hat >= 1 and S >= 1, got ({t_hat}, {steps})"
            )));
        }
        let mut taus: Vec<usize> = (1..=steps)
            .map(|i| (i as f64 * t_hat as f64 / steps as f64).round() as usize)
            .filter(|&t| t >= 1)
            .collect();
        taus.dedup();
        Ok(Self { taus })
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.taus.last().expect("subsequence is never empty")
    }

    /// `(tau_i, tau_{i-1})` pairs from the top down, ending with `(tau_1, 0)`.
    pub fn reverse_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.taus.len())
            .rev()
            .map(move |i| (self.taus[i], if i == 0 { 0 } else { self.taus[i - 1] }))
    }
}

pub fn make_subsequence(t_hat: usize, steps: usize) -> Result<Subsequence> {
    Subsequence::new(t_hat, steps)
}

/// Reads a tensor back as a flat `Vec<f32>`.
pub fn to_vec_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn t1(v: &[f32]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    fn randn(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        t1(&v)
    }

    fn sched_with_ab(ab: f32) -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![1.0 - ab]).unwrap()
    }

    #[test]
    fn paper_schedule_endpoints() {
        let s = NoiseSchedule::linear(0.0015, 0.0195, 1000).unwrap();
        assert_eq!(s.steps(), 1000);
        assert!((s.beta(1).unwrap() - 0.0015).abs() < 1e-9);
        assert!((s.beta(1000).unwrap() - 0.0195).abs() < 1e-9);
    }

    #[test]
    fn small_schedule_values() {
        let s = NoiseSchedule::linear(0.1, 0.3, 3).unwrap();
        let expect_b = [0.1, 0.2, 0.3];
        let expect_ab = [0.9, 0.72, 0.504];
        for i in 0..3 {
            assert!((s.betas()[i] - expect_b[i]).abs() < 1e-6);
            assert!((s.alpha_bars()[i] - expect_ab[i]).abs() < 1e-6);
        }
        let one = NoiseSchedule::linear(0.2, 0.2, 1).unwrap();
        assert_eq!(one.betas(), &[0.2]);
        assert!((one.alpha_bars()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert!(NoiseSchedule::linear(0.3, 0.1, 10).is_err());
        assert!(NoiseSchedule::linear(0.0, 0.1, 10).is_err());
        assert!(NoiseSchedule::linear(0.1, 1.0, 10).is_err());
        assert!(NoiseSchedule::linear(0.1, 0.2, 0).is_err());
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::linear(0.0015, 0.0195, 1000).unwrap();
        assert_eq!(s.alpha_bars()[0], s.alphas()[0]);
        for t in 0..1000 {
            assert_eq!(s.alphas()[t], 1.0 - s.betas()[t]);
            if t > 0 {
                assert_eq!(s.alpha_bars()[t], s.alpha_bars()[t - 1] * s.alphas()[t]);
                assert!(s.alpha_bars()[t] < s.alpha_bars()[t - 1]);
            }
        }
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn noiseless_scaling_halves_signal() {
        let s = sched_with_ab(0.25);
        let x0 = t1(&[1.0, -2.0, 0.5]);
        let out = forward_sample(&x0, 1, &randn(3, 1), &s, 0.0).unwrap();
        assert_eq!(to_vec_f32(&out).unwrap(), vec![0.5, -1.0, 0.25]);
    }

    #[test]
    fn zero_signal_is_scaled_noise() {
        let s = sched_with_ab(0.36);
        let eps = randn(5, 2);
        let out = forward_sample(&t1(&[0.0; 5]), 1, &eps, &s, 1.0).unwrap();
        let e = to_vec_f32(&eps).unwrap();
        for (o, e) in to_vec_f32(&out).unwrap().iter().zip(e) {
            assert!((o - 0.8 * e).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_sample_errors() {
        let s = sched_with_ab(0.5);
        assert!(matches!(
            forward_sample(&t1(&[1.0]), 1, &t1(&[1.0, 2.0]), &s, 1.0),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            forward_sample(&t1(&[1.0]), 2, &t1(&[1.0]), &s, 1.0),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn x0_estimate_examples() {
        let s = sched_with_ab(0.64);
        let out = x0_estimate(&t1(&[1.0]), &t1(&[0.5]), 1, &s).unwrap();
        assert!((to_vec_f32(&out).unwrap()[0] - 0.875).abs() < 1e-6);
        let out = x0_estimate(&t1(&[1.0, 2.0]), &t1(&[0.0, 0.0]), 1, &s).unwrap();
        assert_eq!(to_vec_f32(&out).unwrap(), vec![1.25, 2.5]);
    }

    #[test]
    fn x0_estimate_inverts_forward_sample() {
        let s = NoiseSchedule::linear(0.0015, 0.0195, 1000).unwrap();
        let x0 = randn(64, 3);
        let eps = randn(64, 4);
        for t in [1, 10, 80, 500, 1000] {
            let xt = forward_sample(&x0, t, &eps, &s, 1.0).unwrap();
            let back = x0_estimate(&xt, &eps, t, &s).unwrap();
            let a = to_vec_f32(&x0).unwrap();
            let b = to_vec_f32(&back).unwrap();
            for (a, b) in a.iter().zip(&b) {
                // relative to the noise magnitude amplified by 1/sqrt(ab_t)
                let tol = 1e-5 * (1.0 + a.abs()) / s.alpha_bar(t).unwrap().sqrt();
                assert!((a - b).abs() <= tol, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn guidance_scalar_example() {
        let s = sched_with_ab(0.75);
        let cfg = GuidanceConfig { eta: 8.0, sigma: 0.0 };
        let out = guided_eps(&t1(&[1.0]), &t1(&[0.2]), &t1(&[0.4]), 1, &s, &cfg).unwrap();
        // independent f64 evaluation
        let ab = 0.75f64;
        let z_tilde = ab.sqrt() * 0.4 + (1.0 - ab).sqrt() * 1.0;
        let expect = 1.0 - 8.0 * (1.0 - ab).sqrt() * (z_tilde - 0.2);
        assert!((z_tilde - 0.846_410_161_5).abs() < 1e-9);
        assert!((expect - (-1.585_640_646)).abs() < 1e-8);
        assert!((to_vec_f32(&out).unwrap()[0] as f64 - expect).abs() < 1e-5);
    }

    #[test]
    fn guidance_neutral_cases() {
        let s = sched_with_ab(0.6);
        let eps = randn(8, 5);
        let zt = randn(8, 6);
        let z0 = randn(8, 7);
        let off = GuidanceConfig { eta: 0.0, sigma: 0.0 };
        let out = guided_eps(&eps, &zt, &z0, 1, &s, &off).unwrap();
        assert_eq!(to_vec_f32(&out).unwrap(), to_vec_f32(&eps).unwrap());

        // z_t already equal to the guidance reconstruction: no correction
        let zt = (scale(&z0, 0.6f32.sqrt()).unwrap() + scale(&eps, 0.4f32.sqrt()).unwrap()).unwrap();
        let on = GuidanceConfig { eta: 8.0, sigma: 0.0 };
        let out = guided_eps(&eps, &zt, &z0, 1, &s, &on).unwrap();
        for (a, b) in to_vec_f32(&out).unwrap().iter().zip(to_vec_f32(&eps).unwrap()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ddim_step_with_true_noise() {
        let s = NoiseSchedule::linear(0.0015, 0.0195, 1000).unwrap();
        let x0 = randn(32, 8);
        let eps = randn(32, 9);
        let xt = forward_sample(&x0, 80, &eps, &s, 1.0).unwrap();
        let out = ddim_step(&xt, &eps, 80, 72, &s, 0.0, None).unwrap();
        let expect = forward_sample(&x0, 72, &eps, &s, 1.0).unwrap();
        for (a, b) in to_vec_f32(&out).unwrap().iter().zip(to_vec_f32(&expect).unwrap()) {
            assert!((a - b).abs() < 1e-5);
        }
        let again = ddim_step(&xt, &eps, 80, 72, &s, 0.0, None).unwrap();
        assert_eq!(to_vec_f32(&out).unwrap(), to_vec_f32(&again).unwrap());
    }

    #[test]
    fn ddim_rollout_recovers_x0() {
        let s = NoiseSchedule::linear(0.0015, 0.0195, 1000).unwrap();
        let x0 = randn(32, 10);
        let eps = randn(32, 11);
        let seq = make_subsequence(80, 10).unwrap();
        let mut x = forward_sample(&x0, seq.last(), &eps, &s, 1.0).unwrap();
        for (t, prev) in seq.reverse_pairs() {
            // oracle denoiser: the exact noise that produced the current sample
            x = ddim_step(&x, &eps, t, prev, &s, 0.0, None).unwrap();
        }
        for (a, b) in to_vec_f32(&x).unwrap().iter().zip(to_vec_f32(&x0).unwrap()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn ddim_step_errors() {
        let s = sched_with_ab(0.5);
        let x = t1(&[1.0]);
        assert!(ddim_step(&x, &x, 1, 1, &s, 0.0, None).is_err());
        // final step: 1 - ab(0) = 0, so any sigma > 0 is too large
        assert!(ddim_step(&x, &x, 1, 0, &s, 0.1, Some(&x)).is_err());
        let s2 = NoiseSchedule::linear(0.1, 0.2, 2).unwrap();
        assert!(ddim_step(&x, &x, 2, 1, &s2, 0.1, None).is_err());
        assert!(ddim_step(&x, &x, 2, 1, &s2, 0.1, Some(&x)).is_ok());
    }

    #[test]
    fn ddim_sigma_fits_budget() {
        let s = NoiseSchedule::linear(0.0015, 0.0195, 1000).unwrap();
        for (t, p) in [(80, 72), (20, 0), (1000, 1)] {
            let sig = ddim_sigma(t, p, &s, 1.0).unwrap();
            assert!(sig * sig <= 1.0 - s.alpha_bar(p).unwrap() + 1e-7);
        }
        assert_eq!(ddim_sigma(20, 0, &s, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn subsequence_examples() {
        assert_eq!(make_subsequence(80, 10).unwrap().taus(), &[8, 16, 24, 32, 40, 48, 56, 64, 72, 80]);
        assert_eq!(make_subsequence(20, 10).unwrap().taus(), &[2, 4, 6, 8, 10, 12, 14, 16, 18, 20]);
        assert_eq!(make_subsequence(5, 10).unwrap().taus(), &[1, 2, 3, 4, 5]);
        assert!(make_subsequence(0, 10).is_err());
        let pairs: Vec<_> = make_subsequence(20, 2).unwrap().reverse_pairs().collect();
        assert_eq!(pairs, vec![(20, 10), (10, 0)]);
    }

    #[test]
    fn batch_sampling_matches_scalar() {
        let s = NoiseSchedule::linear(0.0015, 0.0195, 1000).unwrap();
        let x0 = randn(8, 12).reshape((2, 4)).unwrap();
        let eps = randn(8, 13).reshape((2, 4)).unwrap();
        let batch = forward_sample_batch(&x0, &[5, 700], &eps, &s).unwrap();
        for (row, t) in [(0usize, 5usize), (1, 700)] {
            let single = forward_sample(&x0.get(row).unwrap(), t, &eps.get(row).unwrap(), &s, 1.0).unwrap();
            let a = to_vec_f32(&batch.get(row).unwrap()).unwrap();
            let b = to_vec_f32(&single).unwrap();
            for (a, b) in a.iter().zip(&b) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn alpha_bar_strictly_decreasing(start in 1e-4f64..0.05, span in 0.0f64..0.05, steps in 1usize..1500) {
                let s = NoiseSchedule::linear(start, start + span, steps).unwrap();
                for t in 1..steps {
                    prop_assert!(s.alpha_bar(t).unwrap() > s.alpha_bar(t + 1).unwrap());
                }
            }

            #[test]
            fn noiseless_scaling_ignores_noise(seed in any::<u64>(), t in 1usize..1000) {
                let s = NoiseSchedule::linear(0.0015, 0.0195, 1000).unwrap();
                let x0 = randn(16, seed);
                let a = forward_sample(&x0, t, &randn(16, seed ^ 1), &s, 0.0).unwrap();
                let b = forward_sample(&x0, t, &randn(16, seed ^ 2), &s, 0.0).unwrap();
                let a: Vec<u32> = to_vec_f32(&a).unwrap().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = to_vec_f32(&b).unwrap().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}

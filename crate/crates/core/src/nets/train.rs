//! Denoiser training on the latent noise-prediction objective.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::codec::{encode_images, LatentCodec};
use super::denoiser::{Denoiser, UNet, UNetConfig};
use crate::diffusion::{forward_sample_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm limit.
    pub grad_clip: f64,
    /// Upper end of the training timestep range; `None` means the full schedule.
    #[serde(default)]
    pub max_timestep: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 16,
            seed: 0,
            grad_clip: 1.0,
            max_timestep: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!("bad training config {self:?}")));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidConfig("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn adamw(vars: Vec<Var>, cfg: &TrainConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW { lr: cfg.learning_rate, weight_decay: cfg.weight_decay, ..Default::default() },
    )?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f32> {
    Ok(t.to_dtype(DType::F32)?.to_scalar::<f32>()?)
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.remove(v) {
                grads.insert(v, g.affine(s, 0.0)?);
            }
        }
    }
    Ok(norm)
}

pub fn gaussian(shape: &[usize], rng: &mut impl Rng, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean squared error between the true and the predicted noise for a batch
/// noised directly to timesteps `ts`.
pub fn denoising_loss(
    denoiser: &dyn Denoiser,
    z0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let zt = forward_sample_batch(z0, ts, eps, schedule)?;
    let pred = denoiser.predict(&zt, ts)?;
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

/// Per-channel latent statistics recorded alongside a trained denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentStats {
    pub fn of(latents: &Tensor) -> Result<Self> {
        let mean = latents.mean((0, 2, 3))?;
        let centered = latents.broadcast_sub(&mean.reshape((1, (), 1, 1))?)?;
        let std = centered.sqr()?.mean((0, 2, 3))?.sqrt()?;
        Ok(Self { mean: mean.to_vec1()?, std: std.to_vec1()? })
    }
}

pub struct TrainedDenoiser {
    pub net: UNet,
    /// Mean loss of every epoch.
    pub history: Vec<f32>,
    pub latent_stats: LatentStats,
}

/// Optimizes the noise-prediction objective on `E(x)` of nominal images with
/// a frozen codec. Data order, timesteps and noise all come from `cfg.seed`.
pub fn train_denoiser(
    images: &[Image],
    codec: &dyn LatentCodec,
    arch: UNetConfig,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainedDenoiser> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no nominal images to train the denoiser on".into()));
    }
    cfg.validate()?;
    let t_hi = cfg.max_timestep.unwrap_or(schedule.steps());
    if t_hi < 1 || t_hi > schedule.steps() {
        return Err(Error::InvalidConfig(format!(
            "max_timestep {t_hi} outside [1, {}]",
            schedule.steps()
        )));
    }
    let latents = encode_images(codec, images)?.detach();
    let latent_stats = LatentStats::of(&latents)?;
    let net = UNet::new(arch, cfg.seed)?;
    let history = fit(&net, &latents, schedule, cfg, t_hi)?;
    Ok(TrainedDenoiser { net, history, latent_stats })
}

/// Training loop over precomputed latents; returns per-epoch mean losses.
pub fn fit(
    net: &UNet,
    latents: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    t_hi: usize,
) -> Result<Vec<f32>> {
    let vars = net.params().vars();
    let mut opt = adamw(vars.clone(), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = latents.dim(0)?;
    let dims = latents.dims()[1..].to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
            let z0 = latents.index_select(&ids, 0)?;
            let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=t_hi)).collect();
            let mut shape = vec![idx.len()];
            shape.extend_from_slice(&dims);
            let eps = gaussian(&shape, &mut rng, DType::F32)?;
            let loss = denoising_loss(net, &z0, &ts, &eps, schedule)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { loss: value, epoch, step });
            }
            let mut grads = loss.backward()?;
            clip_grad_norm(&mut grads, &vars, cfg.grad_clip)?;
            opt.step(&grads)?;
            total += value as f64;
            batches += 1;
        }
        let mean = (total / batches as f64) as f32;
        log::info!("denoiser epoch {}: loss {mean:.5}", epoch + 1);
        history.push(mean);
    }
    Ok(history)
}

//! Dynamic reconstruction: pick the step per image, scale the latent without
//! noise, run the guided deterministic sampler back to step 0, decode.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dic::{DicModel, StepChoice};
use crate::diffusion::{ddim_sigma, ddim_step, forward_sample, guided_eps, GuidanceConfig, NoiseSchedule, Subsequence};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, unbatch, Image};
use crate::nets::train::gaussian;
use crate::nets::{Denoiser, FeatureExtractor, LatentCodec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Sampler steps between `T_hat` and 0.
    pub steps: usize,
    pub guidance: GuidanceConfig,
    /// Fraction of the direct-sampling noise added at `T_hat`; `0` is the
    /// noiseless scaling.
    pub omega: f32,
    /// Seed for any stochastic component (`omega > 0` or `sigma > 0`).
    pub seed: u64,
    /// Keep every intermediate latent.
    pub keep_trace: bool,
    /// Images per denoiser call.
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            guidance: GuidanceConfig::default(),
            omega: 0.0,
            seed: 0,
            keep_trace: false,
            batch_size: 32,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.batch_size < 1 {
            return Err(Error::InvalidConfig("sampler steps and batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidConfig(format!("omega {} outside [0, 1]", self.omega)));
        }
        if !(self.guidance.eta >= 0.0) || !(self.guidance.sigma >= 0.0) {
            return Err(Error::InvalidConfig("eta and sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub x_hat: Image,
    /// `(C, h, w)`.
    pub z_hat: Tensor,
    pub z0: Tensor,
    pub t_hat: usize,
    /// Conditioning outcome when the step was chosen dynamically.
    pub choice: Option<StepChoice>,
    /// Latent after each sampler step, starting with the scaled input.
    pub trace: Vec<Tensor>,
}

/// How the noising step is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    Dynamic,
    Static(usize),
}

/// Frozen networks plus sampler settings.
pub struct Reconstructor<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub codec: &'a dyn LatentCodec,
    pub schedule: &'a NoiseSchedule,
    pub cfg: SamplerConfig,
}

fn image_rng(seed: u64, id: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// One noise tensor per image from its own stream, stacked.
fn per_image_noise(shape: &[usize], ids: &[u64], seed: u64, stream: u64) -> Result<Tensor> {
    let parts = ids
        .iter()
        .map(|&id| gaussian(&shape[1..], &mut image_rng(seed, id, stream), DType::F32))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&parts, 0)?)
}

impl<'a> Reconstructor<'a> {
    /// Runs the sampler from `t_hat` for a batch of latents that share it.
    /// `ids` key the per-image noise streams.
    pub fn denoise_latents(&self, z0: &Tensor, t_hat: usize, ids: &[u64]) -> Result<(Tensor, Vec<Tensor>)> {
        self.cfg.validate()?;
        let n = z0.dim(0)?;
        if ids.len() != n {
            return Err(Error::ShapeMismatch(format!("{} ids for {n} latents", ids.len())));
        }
        let seq = Subsequence::new(t_hat, self.cfg.steps)?;
        let eps0 = if self.cfg.omega > 0.0 {
            per_image_noise(z0.dims(), ids, self.cfg.seed, 0)?
        } else {
            z0.zeros_like()?
        };
        let mut z = forward_sample(z0, t_hat, &eps0, self.schedule, self.cfg.omega)?;
        let mut trace = Vec::new();
        if self.cfg.keep_trace {
            trace.push(z.clone());
        }
        for (k, (tau, prev)) in seq.reverse_pairs().enumerate() {
            let ts = vec![tau; n];
            // inference only: drop the autograd history so it is not retained
            let eps = self.denoiser.predict(&z, &ts)?.detach();
            let eps_hat = guided_eps(&eps, &z, z0, tau, self.schedule, &self.cfg.guidance)?;
            let sigma = ddim_sigma(tau, prev, self.schedule, self.cfg.guidance.sigma)?;
            let noise = if sigma > 0.0 {
                Some(per_image_noise(z0.dims(), ids, self.cfg.seed, 1 + k as u64)?)
            } else {
                None
            };
            z = ddim_step(&z, &eps_hat, tau, prev, self.schedule, sigma, noise.as_ref())?;
            if self.cfg.keep_trace {
                trace.push(z.clone());
            }
        }
        Ok((z, trace))
    }

    /// Reconstructs images with given steps. Images sharing a step are
    /// batched together; output order follows the input.
    pub fn reconstruct_with_steps(&self, images: &[Image], t_hats: &[usize], ids: &[u64]) -> Result<Vec<ReconstructionResult>> {
        if images.len() != t_hats.len() || images.len() != ids.len() {
            return Err(Error::ShapeMismatch("images, steps and ids differ in length".into()));
        }
        for &t in t_hats {
            if t < 1 || t > self.schedule.steps() {
                return Err(Error::TimestepOutOfRange { t, min: 1, max: self.schedule.steps() });
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &t) in t_hats.iter().enumerate() {
            groups.entry(t).or_default().push(i);
        }
        let mut out: Vec<Option<ReconstructionResult>> = (0..images.len()).map(|_| None).collect();
        for (t, members) in groups {
            for chunk in members.chunks(self.cfg.batch_size) {
                let refs: Vec<&Image> = chunk.iter().map(|&i| &images[i]).collect();
                let x = batch_tensor(&refs, &Device::Cpu)?;
                let z0 = self.codec.encode(&x)?.detach();
                let chunk_ids: Vec<u64> = chunk.iter().map(|&i| ids[i]).collect();
                let (z_hat, trace) = self.denoise_latents(&z0, t, &chunk_ids)?;
                let x_hat = unbatch(&self.codec.decode(&z_hat)?.detach())?;
                for (j, (&i, xh)) in chunk.iter().zip(x_hat).enumerate() {
                    out[i] = Some(ReconstructionResult {
                        x_hat: xh,
                        z_hat: z_hat.get(j)?,
                        z0: z0.get(j)?,
                        t_hat: t,
                        choice: None,
                        trace: trace.iter().map(|s| s.get(j)).collect::<candle_core::Result<_>>()?,
                    });
                }
            }
        }
        Ok(out.into_iter().map(|r| r.expect("every image assigned")).collect())
    }

    /// Dynamic reconstruction: steps come from the conditioning model.
    pub fn reconstruct(
        &self,
        images: &[Image],
        dic: &DicModel,
        phi: &FeatureExtractor,
        ids: &[u64],
    ) -> Result<Vec<ReconstructionResult>> {
        if dic.table.t_max() > self.schedule.steps() {
            return Err(Error::InvalidConfig(format!(
                "T_max {} exceeds the schedule length {}",
                dic.table.t_max(),
                self.schedule.steps()
            )));
        }
        let choices = dic.choose_for_images(phi, images)?;
        let steps: Vec<usize> = choices.iter().map(|c| c.t_hat).collect();
        let mut results = self.reconstruct_with_steps(images, &steps, ids)?;
        for (r, c) in results.iter_mut().zip(choices) {
            r.choice = Some(c);
        }
        Ok(results)
    }

    /// Same pipeline with one fixed step for every image.
    pub fn reconstruct_static(&self, images: &[Image], fixed_t: usize, t_max: usize, ids: &[u64]) -> Result<Vec<ReconstructionResult>> {
        if fixed_t > t_max || fixed_t < 1 {
            return Err(Error::InvalidConfig(format!("static step {fixed_t} outside [1, {t_max}]")));
        }
        self.reconstruct_with_steps(images, &vec![fixed_t; images.len()], ids)
    }

    pub fn run(
        &self,
        images: &[Image],
        mode: StepMode,
        dic: Option<&DicModel>,
        phi: &FeatureExtractor,
        ids: &[u64],
    ) -> Result<Vec<ReconstructionResult>> {
        match mode {
            StepMode::Dynamic => {
                let dic = dic.ok_or_else(|| {
                    Error::InvalidConfig("dynamic conditioning needs a built feature index".into())
                })?;
                self.reconstruct(images, dic, phi, ids)
            }
            StepMode::Static(t) => {
                let t_max = dic.map(|d| d.table.t_max()).unwrap_or(self.schedule.steps());
                self.reconstruct_static(images, t, t_max, ids)
            }
        }
    }
}

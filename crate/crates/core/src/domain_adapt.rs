//! Fine-tuning the feature extractor so nominal inputs and their
//! reconstructions map to nearby features.

use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anomaly_map::cosine_distance;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nets::train::{adamw, clip_grad_norm, scalar};
use crate::nets::{FeatureExtractor, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainAdaptConfig {
    /// Fine-tuning epochs; `0` leaves the extractor unchanged.
    pub gamma: usize,
    pub blocks: Vec<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Rebuild the conditioning index with the adapted extractor.
    pub rebuild_index: bool,
}

impl Default for DomainAdaptConfig {
    fn default() -> Self {
        Self {
            gamma: 1,
            blocks: vec![2, 3],
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 16,
            seed: 0,
            rebuild_index: true,
        }
    }
}

impl DomainAdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("domain adaptation needs at least one block".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("bad domain adaptation config {self:?}")));
        }
        Ok(())
    }
}

/// Sum over blocks of the spatially averaged cosine distance, averaged over
/// the batch. Each input is `(N, C, h, w)`; the result is a scalar tensor.
pub fn lda_loss_features(fa: &[candle_core::Tensor], fb: &[candle_core::Tensor]) -> Result<candle_core::Tensor> {
    if fa.is_empty() || fa.len() != fb.len() {
        return Err(Error::InvalidConfig("loss needs matching, non-empty block lists".into()));
    }
    let mut total: Option<candle_core::Tensor> = None;
    for (a, b) in fa.iter().zip(fb) {
        let d = cosine_distance(a, b)?.mean_all()?;
        total = Some(match total {
            None => d,
            Some(t) => (t + d)?,
        });
    }
    Ok(total.expect("non-empty"))
}

pub fn lda_loss(x0: &Image, x_hat: &Image, phi: &FeatureExtractor, blocks: &[usize]) -> Result<f32> {
    if x0.dims() != x_hat.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x0.dims(), x_hat.dims())));
    }
    let fa = phi.extract_images(&[x0], blocks)?;
    let fb = phi.extract_images(&[x_hat], blocks)?;
    scalar(&lda_loss_features(&fa, &fb)?)
}

/// Mean loss over all pairs.
pub fn mean_lda_loss(inputs: &[Image], recons: &[Image], phi: &FeatureExtractor, blocks: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (a, b) in inputs.chunks(32).zip(recons.chunks(32)) {
        let ra: Vec<&Image> = a.iter().collect();
        let rb: Vec<&Image> = b.iter().collect();
        let l = lda_loss_features(&phi.extract_images(&ra, blocks)?, &phi.extract_images(&rb, blocks)?)?;
        total += scalar(&l)? as f64 * a.len() as f64;
    }
    Ok(total / inputs.len().max(1) as f64)
}

/// Returns an adapted copy of `phi` plus the mean loss of every epoch. The
/// reconstructions are fixed targets produced by the frozen pipeline.
pub fn finetune_extractor(
    phi: &FeatureExtractor,
    inputs: &[Image],
    recons: &[Image],
    cfg: &DomainAdaptConfig,
) -> Result<(FeatureExtractor, Vec<f32>)> {
    cfg.validate()?;
    phi.check_blocks(&cfg.blocks)?;
    if inputs.len() != recons.len() {
        return Err(Error::ShapeMismatch("inputs and reconstructions differ in count".into()));
    }
    let adapted = phi.fork()?;
    if cfg.gamma == 0 {
        return Ok((adapted, Vec::new()));
    }
    if inputs.is_empty() {
        return Err(Error::EmptyDataset("no nominal pairs for domain adaptation".into()));
    }
    let train = TrainConfig {
        epochs: cfg.gamma,
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        grad_clip: 1.0,
        max_timestep: None,
    };
    let vars = adapted.vars();
    let mut opt = adamw(vars.clone(), &train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDA);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(cfg.gamma);
    for epoch in 0..cfg.gamma {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let a: Vec<&Image> = idx.iter().map(|&i| &inputs[i]).collect();
            let b: Vec<&Image> = idx.iter().map(|&i| &recons[i]).collect();
            let loss = lda_loss_features(
                &adapted.extract_images(&a, &cfg.blocks)?,
                &adapted.extract_images(&b, &cfg.blocks)?,
            )?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { loss: value, epoch, step });
            }
            let mut grads = loss.backward()?;
            clip_grad_norm(&mut grads, &vars, train.grad_clip)?;
            opt.step(&grads)?;
            total += value as f64;
            batches += 1;
        }
        let mean = (total / batches as f64) as f32;
        log::info!("adaptation epoch {}: loss {mean:.5}", epoch + 1);
        history.push(mean);
    }
    Ok((adapted, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};
    use proptest::prelude::*;

    fn t(v: Vec<f64>, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (1, c, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn loss_examples() {
        let a = t(vec![1.0, 1.0, 0.0, 0.0], 2, 1, 2);
        let b = t(vec![0.0, 0.0, 1.0, 1.0], 2, 1, 2);
        let l = lda_loss_features(&[a.clone()], &[b]).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 1.0).abs() < 1e-6);
        let neg = a.neg().unwrap();
        let l = lda_loss_features(&[a.clone(), a.clone()], &[neg.clone(), neg]).unwrap();
        assert!((l.to_scalar::<f64>().unwrap() - 4.0).abs() < 1e-6);
        let l = lda_loss_features(&[a.clone()], &[a]).unwrap().to_scalar::<f64>().unwrap();
        assert!(l.abs() < 1e-6);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let phi = FeatureExtractor::init(Default::default(), 1).unwrap();
        let img = Image::filled(3, 16, 16, 0.5);
        let cfg = DomainAdaptConfig { gamma: 0, ..Default::default() };
        let (out, hist) = finetune_extractor(&phi, &[img.clone()], &[img], &cfg).unwrap();
        assert!(hist.is_empty());
        assert_eq!(out.fingerprint().unwrap(), phi.fingerprint().unwrap());
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(
            a in prop::collection::vec(-2.0f64..2.0, 12),
            b in prop::collection::vec(-2.0f64..2.0, 12),
        ) {
            let (ta, tb) = (t(a, 3, 2, 2), t(b, 3, 2, 2));
            let ab = lda_loss_features(&[ta.clone()], &[tb.clone()]).unwrap().to_scalar::<f64>().unwrap();
            let ba = lda_loss_features(&[tb], &[ta]).unwrap().to_scalar::<f64>().unwrap();
            prop_assert!((ab - ba).abs() < 1e-6);
            prop_assert!((-1e-9..=2.0 + 1e-9).contains(&ab));
        }
    }
}

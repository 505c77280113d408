//! Image <-> latent codecs.

use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::params::{Conv, ParamStore};
use super::train::{adamw, clip_grad_norm, scalar, TrainConfig};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};

/// Encoder `E` and decoder `D` with spatial downsampling factor `d`.
pub trait LatentCodec: Send + Sync {
    fn factor(&self) -> usize;
    fn latent_channels(&self) -> usize;
    /// `(N, 3, H, W)` -> `(N, c, H/d, W/d)`.
    fn encode(&self, x: &Tensor) -> Result<Tensor>;
    /// `(N, c, h, w)` -> `(N, 3, h*d, w*d)`.
    fn decode(&self, z: &Tensor) -> Result<Tensor>;
}

pub const IMAGE_CHANNELS: usize = 3;

fn check_image(x: &Tensor, d: usize) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if c != IMAGE_CHANNELS {
        return Err(Error::ShapeMismatch(format!("codec expects {IMAGE_CHANNELS} channels, got {c}")));
    }
    if h % d != 0 || w % d != 0 {
        return Err(Error::ShapeMismatch(format!("{h}x{w} is not divisible by the codec factor {d}")));
    }
    Ok((n, h, w))
}

fn check_latent(z: &Tensor, channels: usize) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = z.dims4()?;
    if c != channels {
        return Err(Error::ShapeMismatch(format!("latent has {c} channels, codec uses {channels}")));
    }
    Ok((n, h, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CodecConfig {
    /// Pixel space.
    Identity,
    /// Average pooling down, bilinear up. No parameters.
    Pool { factor: usize },
    /// Small convolutional autoencoder trained on nominal images.
    Autoencoder { factor: usize, latent_channels: usize, hidden: usize },
}

impl CodecConfig {
    pub fn factor(&self) -> usize {
        match self {
            CodecConfig::Identity => 1,
            CodecConfig::Pool { factor } | CodecConfig::Autoencoder { factor, .. } => *factor,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            CodecConfig::Autoencoder { latent_channels, .. } => *latent_channels,
            _ => IMAGE_CHANNELS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CodecConfig::Identity => Ok(()),
            CodecConfig::Pool { factor } if *factor >= 1 => Ok(()),
            CodecConfig::Autoencoder { factor, latent_channels, hidden }
                if factor.is_power_of_two() && *latent_channels > 0 && *hidden > 0 =>
            {
                Ok(())
            }
            other => Err(Error::InvalidConfig(format!("bad codec {other:?}"))),
        }
    }
}

pub struct Autoencoder {
    factor: usize,
    latent_channels: usize,
    hidden: usize,
    store: ParamStore,
    enc: Vec<Conv>,
    dec: Vec<Conv>,
}

impl Autoencoder {
    pub fn new(factor: usize, latent_channels: usize, hidden: usize, seed: u64) -> Result<Self> {
        Self::build(factor, latent_channels, hidden, ParamStore::seeded(seed, DType::F32))
    }

    fn build(factor: usize, latent_channels: usize, hidden: usize, mut ps: ParamStore) -> Result<Self> {
        CodecConfig::Autoencoder { factor, latent_channels, hidden }.validate()?;
        let downs = factor.trailing_zeros() as usize;
        let h = hidden;
        let mut enc = vec![Conv::new(&mut ps, "enc.0", IMAGE_CHANNELS, h, 3, 1, Conv::he_init(IMAGE_CHANNELS, 3))?];
        for i in 0..downs {
            enc.push(Conv::new(&mut ps, &format!("enc.{}", i + 1), h, h, 3, 2, Conv::he_init(h, 3))?);
        }
        enc.push(Conv::new(&mut ps, &format!("enc.{}", downs + 1), h, latent_channels, 1, 1, Conv::default_init(h, 1))?);
        let mut dec = vec![Conv::new(&mut ps, "dec.0", latent_channels, h, 3, 1, Conv::he_init(latent_channels, 3))?];
        for i in 0..downs {
            dec.push(Conv::new(&mut ps, &format!("dec.{}", i + 1), h, h, 3, 1, Conv::he_init(h, 3))?);
        }
        dec.push(Conv::new(&mut ps, &format!("dec.{}", downs + 1), h, IMAGE_CHANNELS, 3, 1, Conv::default_init(h, 3))?);
        ps.finish();
        Ok(Self { factor, latent_channels, hidden, store: ps, enc, dec })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn config(&self) -> CodecConfig {
        CodecConfig::Autoencoder { factor: self.factor, latent_channels: self.latent_channels, hidden: self.hidden }
    }
}

impl LatentCodec for Autoencoder {
    fn factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x, self.factor)?;
        let mut h = ((x - 0.5)? * 4.0)?;
        let last = self.enc.len() - 1;
        for (i, conv) in self.enc.iter().enumerate() {
            h = conv.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        check_latent(z, self.latent_channels)?;
        let mut h = self.dec[0].forward(z)?.relu()?;
        for conv in &self.dec[1..self.dec.len() - 1] {
            let (_, _, hh, ww) = h.dims4()?;
            h = conv.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?.relu()?;
        }
        let out = self.dec[self.dec.len() - 1].forward(&h)?;
        // logistic squash into [0, 1]
        Ok((out.neg()?.exp()? + 1.0)?.recip()?)
    }
}

pub enum Codec {
    Identity,
    Pool { factor: usize },
    Autoencoder(Autoencoder),
}

impl Codec {
    /// Parameter-free codecs; autoencoders come from [`train_codec`] or a checkpoint.
    pub fn fixed(cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg {
            CodecConfig::Identity => Ok(Codec::Identity),
            CodecConfig::Pool { factor } => Ok(Codec::Pool { factor: *factor }),
            CodecConfig::Autoencoder { .. } => {
                Err(Error::InvalidConfig("an autoencoder codec has to be trained first (train-codec)".into()))
            }
        }
    }

    pub fn config(&self) -> CodecConfig {
        match self {
            Codec::Identity => CodecConfig::Identity,
            Codec::Pool { factor } => CodecConfig::Pool { factor: *factor },
            Codec::Autoencoder(ae) => ae.config(),
        }
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        let arrays = match self {
            Codec::Autoencoder(ae) => ae.store.to_arrays()?,
            _ => Vec::new(),
        };
        let mut meta = meta;
        if !meta.is_object() {
            meta = serde_json::json!({});
        }
        meta["codec"] = serde_json::to_value(self.config()).expect("serializable");
        Ok(Checkpoint { kind: "codec".into(), meta, arrays })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.meta_as::<CodecConfig>("codec")? {
            CodecConfig::Autoencoder { factor, latent_channels, hidden } => Ok(Codec::Autoencoder(
                Autoencoder::build(factor, latent_channels, hidden, ParamStore::from_checkpoint(ckpt, DType::F32))?,
            )),
            other => Codec::fixed(&other),
        }
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_checkpoint(meta)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load_kind(path, "codec")?)
    }

    pub fn fingerprint(&self) -> Result<String> {
        match self {
            Codec::Autoencoder(ae) => ae.store.fingerprint(),
            other => Ok(format!("{:?}", other.config())),
        }
    }
}

impl LatentCodec for Codec {
    fn factor(&self) -> usize {
        match self {
            Codec::Identity => 1,
            Codec::Pool { factor } => *factor,
            Codec::Autoencoder(ae) => ae.factor,
        }
    }

    fn latent_channels(&self) -> usize {
        match self {
            Codec::Autoencoder(ae) => ae.latent_channels,
            _ => IMAGE_CHANNELS,
        }
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Identity => {
                check_image(x, 1)?;
                Ok(x.clone())
            }
            Codec::Pool { factor } => {
                check_image(x, *factor)?;
                Ok(x.avg_pool2d(*factor)?)
            }
            Codec::Autoencoder(ae) => ae.encode(x),
        }
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Identity => {
                check_latent(z, IMAGE_CHANNELS)?;
                Ok(z.clone())
            }
            Codec::Pool { factor } => {
                let (_, h, w) = check_latent(z, IMAGE_CHANNELS)?;
                if *factor == 1 {
                    return Ok(z.clone());
                }
                Ok(z.upsample_bilinear2d(h * factor, w * factor, false)?)
            }
            Codec::Autoencoder(ae) => ae.decode(z),
        }
    }
}

/// Encodes images in chunks; returns `(N, c, h, w)`.
pub fn encode_images(codec: &dyn LatentCodec, images: &[Image]) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in images.chunks(32) {
        let refs: Vec<&Image> = chunk.iter().collect();
        parts.push(codec.encode(&batch_tensor(&refs, &candle_core::Device::Cpu)?)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Trains an autoencoder on nominal images with a per-pixel squared error.
/// Returns the codec and the mean loss per epoch.
pub fn train_codec(
    images: &[Image],
    factor: usize,
    latent_channels: usize,
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<(Codec, Vec<f32>)> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no images to train the codec on".into()));
    }
    cfg.validate()?;
    let ae = Autoencoder::new(factor, latent_channels, hidden, cfg.seed)?;
    let vars = ae.store.vars();
    let mut opt = adamw(vars.clone(), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0DE);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
            let x = batch_tensor(&batch, &candle_core::Device::Cpu)?;
            let loss = (ae.decode(&ae.encode(&x)?)? - &x)?.sqr()?.mean_all()?;
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
        log::info!("codec epoch {}: loss {mean:.5}", epoch + 1);
        history.push(mean);
    }
    Ok((Codec::Autoencoder(ae), history))
}

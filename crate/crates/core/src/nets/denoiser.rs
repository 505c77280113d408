//! Noise-prediction networks.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::params::{Conv, Dense, Init, Norm, ParamStore};
use crate::error::{Error, Result};

/// Predicts the noise in a batch of noised latents `(N, C, H, W)`, one
/// timestep per row.
pub trait Denoiser: Send + Sync {
    fn predict(&self, zt: &Tensor, ts: &[usize]) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channels per resolution level, top level first.
    pub channels: Vec<usize>,
    pub time_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { in_channels: 3, channels: vec![32, 64], time_dim: 64, groups: 8 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.in_channels == 0 || self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!("bad denoiser architecture {self:?}")));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c % self.groups != 0) {
            return Err(Error::InvalidConfig(format!("{c} channels not divisible into {} groups", self.groups)));
        }
        Ok(())
    }

    /// Latent sides must halve cleanly at every level.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

/// Sinusoidal timestep features `(N, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp() * t as f64);
        let f: Vec<f64> = freqs.collect();
        data.extend(f.iter().map(|a| a.sin() as f32));
        data.extend(f.iter().map(|a| a.cos() as f32));
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, tdim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(ps, &format!("{name}.norm1"), cin, groups)?,
            conv1: Conv::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, Conv::default_init(cin, 3))?,
            time: Dense::new(ps, &format!("{name}.time"), tdim, cout)?,
            norm2: Norm::new(ps, &format!("{name}.norm2"), cout, groups)?,
            conv2: Conv::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, Conv::default_init(cout, 3))?,
            skip: if cin != cout {
                Some(Conv::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, Conv::default_init(cin, 1))?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(temb)?;
        let h = h.broadcast_add(&t.unsqueeze(2)?.unsqueeze(3)?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Small U-shaped convolutional denoiser with a timestep embedding.
pub struct UNet {
    cfg: UNetConfig,
    store: ParamStore,
    time1: Dense,
    time2: Dense,
    conv_in: Conv,
    down: Vec<(ResBlock, Option<Conv>)>,
    mid: ResBlock,
    up: Vec<(ResBlock, Option<Conv>)>,
    norm_out: Norm,
    conv_out: Conv,
}

impl UNet {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, ParamStore::seeded(seed, DType::F32))
    }

    fn build(cfg: UNetConfig, mut ps: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let ps = &mut ps;
        let (tdim, g) = (cfg.time_dim, cfg.groups);
        let temb_dim = tdim * 2;
        let time1 = Dense::new(ps, "time.0", tdim, temb_dim)?;
        let time2 = Dense::new(ps, "time.1", temb_dim, temb_dim)?;
        let c0 = cfg.channels[0];
        let conv_in = Conv::new(ps, "conv_in", cfg.in_channels, c0, 3, 1, Conv::default_init(cfg.in_channels, 3))?;
        let levels = cfg.channels.len();
        let mut down = Vec::new();
        let mut prev = c0;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let block = ResBlock::new(ps, &format!("down.{i}.res"), prev, c, temb_dim, g)?;
            let sample = if i + 1 < levels {
                Some(Conv::new(ps, &format!("down.{i}.sample"), c, c, 3, 2, Conv::default_init(c, 3))?)
            } else {
                None
            };
            down.push((block, sample));
            prev = c;
        }
        let mid = ResBlock::new(ps, "mid", prev, prev, temb_dim, g)?;
        let mut up = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate().rev() {
            let block = ResBlock::new(ps, &format!("up.{i}.res"), prev + c, c, temb_dim, g)?;
            let sample = if i > 0 {
                Some(Conv::new(ps, &format!("up.{i}.sample"), c, c, 3, 1, Conv::default_init(c, 3))?)
            } else {
                None
            };
            up.push((block, sample));
            prev = c;
        }
        let norm_out = Norm::new(ps, "norm_out", c0, g)?;
        // zero output layer: the untrained net predicts zero noise
        let conv_out = Conv::new(ps, "conv_out", c0, cfg.in_channels, 3, 1, Init::Const(0.0))?;
        let store = std::mem::replace(ps, ParamStore::seeded(0, DType::F32));
        store.finish();
        Ok(Self { cfg, store, time1, time2, conv_in, down, mid, up, norm_out, conv_out })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        let mut meta = meta;
        if let serde_json::Value::Object(m) = &mut meta {
            m.insert("arch".into(), serde_json::to_value(&self.cfg).expect("serializable"));
        } else {
            meta = serde_json::json!({ "arch": self.cfg });
        }
        Ok(Checkpoint { kind: "denoiser".into(), meta, arrays: self.store.to_arrays()? })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: UNetConfig = ckpt.meta_as("arch")?;
        Self::build(cfg, ParamStore::from_checkpoint(ckpt, DType::F32))
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::load_kind(path, "denoiser")?;
        Ok((Self::from_checkpoint(&ckpt)?, ckpt))
    }
}

impl Denoiser for UNet {
    fn predict(&self, zt: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let (n, c, h, w) = zt.dims4()?;
        let m = self.cfg.spatial_multiple();
        if c != self.cfg.in_channels || h % m != 0 || w % m != 0 || ts.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "denoiser expects ({n}, {}, k*{m}, k*{m}) with {n} timesteps, got {:?} and {} timesteps",
                self.cfg.in_channels,
                zt.dims(),
                ts.len()
            )));
        }
        let temb = timestep_embedding(ts, self.cfg.time_dim, zt.device(), zt.dtype())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;
        let mut x = self.conv_in.forward(zt)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (block, sample) in &self.down {
            x = block.forward(&x, &temb)?;
            skips.push(x.clone());
            if let Some(s) = sample {
                x = s.forward(&x)?;
            }
        }
        x = self.mid.forward(&x, &temb)?;
        for (block, sample) in &self.up {
            let skip = skips.pop().expect("one skip per level");
            x = block.forward(&Tensor::cat(&[&x, &skip], 1)?, &temb)?;
            if let Some(s) = sample {
                let (_, _, hh, ww) = x.dims4()?;
                x = s.forward(&x.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)
    }
}

/// `eps = scale * z + shift`, two scalars; small enough for exact gradient checks.
pub struct LinearDenoiser {
    store: ParamStore,
    scale: Tensor,
    shift: Tensor,
}

impl LinearDenoiser {
    pub fn new(scale: f64, shift: f64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::seeded(0, dtype);
        let scale = store.get("scale", &[1], Init::Const(scale))?;
        let shift = store.get("shift", &[1], Init::Const(shift))?;
        Ok(Self { store, scale, shift })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }
}

impl Denoiser for LinearDenoiser {
    fn predict(&self, zt: &Tensor, _ts: &[usize]) -> Result<Tensor> {
        Ok(zt.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?)
    }
}

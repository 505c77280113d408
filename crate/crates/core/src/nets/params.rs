//! Named trainable parameters with seeded initialization, and the small set
//! of layers the networks are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::checkpoint::{Checkpoint, NamedArray};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Uniform(f64),
    Normal(f64),
    Const(f64),
}

enum Source {
    Seeded(ChaCha8Rng),
    Arrays(BTreeMap<String, NamedArray>),
}

/// Creates parameters either from a seeded generator or from checkpoint
/// arrays. Networks are built with the same code path in both cases, so a
/// missing or misshapen array is reported by name.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    source: Source,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn seeded(seed: u64, dtype: DType) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            source: Source::Seeded(ChaCha8Rng::seed_from_u64(seed)),
            vars: BTreeMap::new(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Self {
        let arrays = ckpt.arrays.iter().map(|a| (a.name.clone(), a.clone())).collect();
        Self { device: Device::Cpu, dtype, source: Source::Arrays(arrays), vars: BTreeMap::new() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Layer { layer: name.into(), msg: "parameter defined twice".into() });
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match &mut self.source {
            Source::Seeded(rng) => match init {
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b) as f32).collect(),
                Init::Normal(s) => (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        (z * s) as f32
                    })
                    .collect(),
                Init::Const(c) => vec![c as f32; n],
            },
            Source::Arrays(arrays) => {
                let a = arrays
                    .remove(name)
                    .ok_or_else(|| Error::MissingArray { name: name.into() })?;
                if a.shape != shape {
                    return Err(Error::Layer {
                        layer: name.into(),
                        msg: format!("expected shape {shape:?}, checkpoint has {:?}", a.shape),
                    });
                }
                a.data
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    /// Warns about checkpoint arrays no layer asked for.
    pub fn finish(&self) {
        if let Source::Arrays(rest) = &self.source {
            for name in rest.keys() {
                log::warn!("checkpoint array `{name}` is not used by the network");
            }
        }
    }

    pub fn to_arrays(&self) -> Result<Vec<NamedArray>> {
        self.vars
            .iter()
            .map(|(name, v)| {
                Ok(NamedArray {
                    name: name.clone(),
                    shape: v.dims().to_vec(),
                    data: crate::diffusion::to_vec_f32(v.as_tensor())?,
                })
            })
            .collect()
    }

    /// Order-sensitive digest of all parameter values.
    pub fn fingerprint(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for a in self.to_arrays()? {
            h.update(a.name.as_bytes());
            for v in a.data {
                h.update(v.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    /// Square `k x k` convolution with "same" padding for stride 1.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        weight_init: Init,
    ) -> Result<Self> {
        let weight = ps.get(&format!("{name}.weight"), &[cout, cin, k, k], weight_init)?;
        let bias = ps.get(&format!("{name}.bias"), &[cout], Init::Const(0.0))?;
        Ok(Self { weight, bias, stride, padding: k / 2 })
    }

    /// Fan-in scaled uniform init (the common framework default).
    pub fn default_init(cin: usize, k: usize) -> Init {
        Init::Uniform(1.0 / ((cin * k * k) as f64).sqrt())
    }

    /// He-normal init for layers followed by a ReLU.
    pub fn he_init(cin: usize, k: usize) -> Init {
        Init::Normal((2.0 / (cin * k * k) as f64).sqrt())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Dense(candle_nn::Linear);

impl Dense {
    pub fn new(ps: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        let b = 1.0 / (din as f64).sqrt();
        let w = ps.get(&format!("{name}.weight"), &[dout, din], Init::Uniform(b))?;
        let bias = ps.get(&format!("{name}.bias"), &[dout], Init::Const(0.0))?;
        Ok(Self(candle_nn::Linear::new(w, Some(bias))))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Norm(candle_nn::GroupNorm);

impl Norm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let w = ps.get(&format!("{name}.weight"), &[channels], Init::Const(1.0))?;
        let b = ps.get(&format!("{name}.bias"), &[channels], Init::Const(0.0))?;
        Ok(Self(candle_nn::GroupNorm::new(w, b, channels, groups.min(channels), 1e-5)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(x)?)
    }
}

//! Convolutional feature extractor with numbered blocks (1-based).

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::params::{Conv, ParamStore};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Output channels of each block; every block halves the resolution.
    pub channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { channels: vec![16, 32, 64, 128] }
    }
}

const INPUT_MEAN: f64 = 0.5;
const INPUT_STD: f64 = 0.25;

#[derive(Debug, Clone)]
struct Block {
    down: Conv,
    conv: Conv,
}

pub struct FeatureExtractor {
    cfg: BackboneConfig,
    store: ParamStore,
    blocks: Vec<Block>,
}

impl FeatureExtractor {
    /// Seeded He-initialized weights.
    pub fn init(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, ParamStore::seeded(seed, DType::F32))
    }

    fn build(cfg: BackboneConfig, mut ps: ParamStore) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.channels.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad backbone {cfg:?}")));
        }
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut prev = 3;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let j = i + 1;
            blocks.push(Block {
                down: Conv::new(&mut ps, &format!("block{j}.down"), prev, c, 3, 2, Conv::he_init(prev, 3))?,
                conv: Conv::new(&mut ps, &format!("block{j}.conv"), c, c, 3, 1, Conv::he_init(c, 3))?,
            });
            prev = c;
        }
        ps.finish();
        Ok(Self { cfg, store: ps, blocks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_channels(&self, block: usize) -> usize {
        self.cfg.channels[block - 1]
    }

    pub fn vars(&self) -> Vec<Var> {
        self.store.vars()
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.store.fingerprint()
    }

    pub fn check_blocks(&self, blocks: &[usize]) -> Result<()> {
        if blocks.is_empty() {
            return Err(Error::InvalidConfig("empty feature block set".into()));
        }
        if let Some(b) = blocks.iter().find(|&&b| b < 1 || b > self.num_blocks()) {
            return Err(Error::InvalidConfig(format!(
                "feature block {b} outside [1, {}]",
                self.num_blocks()
            )));
        }
        Ok(())
    }

    /// Feature maps `(N, C_j, H / 2^j, W / 2^j)` for each requested block, in
    /// request order.
    pub fn extract(&self, x: &Tensor, blocks: &[usize]) -> Result<Vec<Tensor>> {
        self.check_blocks(blocks)?;
        let deepest = *blocks.iter().max().expect("non-empty");
        let mut h = ((x - INPUT_MEAN)? / INPUT_STD)?;
        let mut outs = Vec::with_capacity(deepest);
        for block in &self.blocks[..deepest] {
            h = block.down.forward(&h)?.relu()?;
            h = block.conv.forward(&h)?.relu()?;
            outs.push(h.clone());
        }
        Ok(blocks.iter().map(|&b| outs[b - 1].clone()).collect())
    }

    pub fn extract_images(&self, images: &[&Image], blocks: &[usize]) -> Result<Vec<Tensor>> {
        self.extract(&batch_tensor(images, &Device::Cpu)?, blocks)
    }

    /// Globally average-pooled block output, one vector per image.
    pub fn pooled_features(&self, images: &[Image], block: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let f = self.extract_images(&refs, &[block])?.remove(0);
            let pooled = f.mean((2, 3))?;
            out.extend(pooled.to_vec2::<f32>()?);
        }
        Ok(out)
    }

    /// Independent copy with freshly allocated parameters.
    pub fn fork(&self) -> Result<Self> {
        Self::from_checkpoint(&self.to_checkpoint(serde_json::json!({}))?)
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        let mut meta = meta;
        if !meta.is_object() {
            meta = serde_json::json!({});
        }
        meta["arch"] = serde_json::to_value(&self.cfg).expect("serializable");
        Ok(Checkpoint { kind: "backbone".into(), meta, arrays: self.store.to_arrays()? })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: BackboneConfig = ckpt.meta_as("arch")?;
        Self::build(cfg, ParamStore::from_checkpoint(ckpt, DType::F32))
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_checkpoint(meta)?.save(path)
    }
}

/// Loads an extractor from a weights file, validating every array.
pub fn load_backbone(path: &Path) -> Result<FeatureExtractor> {
    FeatureExtractor::from_checkpoint(&Checkpoint::load_kind(path, "backbone")?)
}

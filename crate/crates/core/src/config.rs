//! Run configuration: one TOML document covering every stage, with
//! cross-field validation and dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anomaly_map::AnomalyMapConfig;
use crate::data::SyntheticSpec;
use crate::dic::StepRounding;
use crate::diffusion::NoiseSchedule;
use crate::domain_adapt::DomainAdaptConfig;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_PRO_FPR_LIMIT;
use crate::nets::{BackboneConfig, CodecConfig, TrainConfig, UNetConfig};
use crate::reconstruction::{SamplerConfig, StepMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset root in the MVTec-style layout. Without it the synthetic
    /// generator supplies a single category.
    pub root: Option<PathBuf>,
    /// Categories to use; empty means every category under `root`.
    pub categories: Vec<String>,
    /// Working resolution (square).
    pub resolution: usize,
    /// Tail fraction of train/good held out as nominal calibration data.
    pub validation_fraction: f64,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            categories: Vec::new(),
            resolution: 256,
            validation_fraction: 0.1,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { beta_start: 0.0015, beta_end: 0.0195, steps: 1000 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.beta_start, self.beta_end, self.steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecSection {
    pub model: CodecConfig,
    /// Used only by the trainable autoencoder.
    pub train: TrainConfig,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self {
            model: CodecConfig::Pool { factor: 8 },
            train: TrainConfig { epochs: 50, learning_rate: 1e-3, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserSection {
    pub arch: UNetConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSection {
    pub arch: BackboneConfig,
    /// Pretrained weights; without them the extractor is initialized from
    /// `seed`.
    pub weights: Option<PathBuf>,
    pub seed: u64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self { arch: BackboneConfig::default(), weights: None, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DicConfig {
    /// Extractor block whose pooled output feeds the neighbour search.
    pub block: usize,
    pub k: usize,
    pub num_bins: usize,
    pub t_max: usize,
    pub min_bin: usize,
    pub rounding: StepRounding,
    /// Bypass the conditioning and use this step for every image.
    pub static_step: Option<usize>,
}

impl Default for DicConfig {
    fn default() -> Self {
        Self { block: 2, k: 20, num_bins: 10, t_max: 80, min_bin: 2, rounding: StepRounding::default(), static_step: None }
    }
}

impl DicConfig {
    pub fn mode(&self) -> StepMode {
        match self.static_step {
            Some(t) => StepMode::Static(t),
            None => StepMode::Dynamic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pro_fpr_limit: f64,
    /// False-positive rate on nominal calibration data used for thresholds.
    pub target_fpr: f64,
    pub write_heatmaps: bool,
    pub write_overlays: bool,
    /// Keep per-step latents (debug only).
    pub keep_trace: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pro_fpr_limit: DEFAULT_PRO_FPR_LIMIT,
            target_fpr: 0.05,
            write_heatmaps: true,
            write_overlays: false,
            keep_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub batch_size: usize,
    /// Timed repetitions after one warm-up pass.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batch_size: 30, repeats: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub codec: CodecSection,
    pub denoiser: DenoiserSection,
    pub backbone: BackboneSection,
    pub dic: DicConfig,
    pub sampler: SamplerConfig,
    pub anomaly_map: AnomalyMapConfig,
    pub adapt: DomainAdaptConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            codec: CodecSection::default(),
            denoiser: DenoiserSection::default(),
            backbone: BackboneSection::default(),
            dic: DicConfig::default(),
            sampler: SamplerConfig::default(),
            anomaly_map: AnomalyMapConfig::default(),
            adapt: DomainAdaptConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidConfig(msg.into()))
}

impl RunConfig {
    /// Small CPU-sized setup on 64x64 synthetic textures.
    pub fn toy() -> Self {
        let mut cfg = RunConfig::default();
        cfg.data.resolution = 64;
        cfg.data.validation_fraction = 0.1;
        cfg.codec.model = CodecConfig::Pool { factor: 4 };
        cfg.denoiser.train = TrainConfig { epochs: 50, learning_rate: 1e-3, batch_size: 16, ..Default::default() };
        cfg.anomaly_map.smoothing_sigma = 1.0;
        cfg.adapt.learning_rate = 1e-4;
        cfg.adapt.gamma = 3;
        cfg.sampler.guidance.eta = 0.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        let d = &self.dic;
        if d.t_max < 1 || d.t_max > self.schedule.steps {
            return invalid(format!("dic.t_max {} must lie in [1, schedule.steps = {}]", d.t_max, self.schedule.steps));
        }
        if d.num_bins < 1 {
            return invalid("dic.num_bins must be >= 1");
        }
        if d.min_bin < 1 || d.min_bin > d.num_bins {
            return invalid(format!("dic.min_bin {} must lie in [1, dic.num_bins = {}]", d.min_bin, d.num_bins));
        }
        if d.k < 1 {
            return invalid("dic.k must be >= 1");
        }
        if d.rounding.multiple < 1 {
            return invalid("dic.rounding.multiple must be >= 1");
        }
        if let Some(t) = d.static_step {
            if t < 1 || t > d.t_max {
                return invalid(format!("dic.static_step {t} must lie in [1, dic.t_max = {}]", d.t_max));
            }
        }
        let n_blocks = self.backbone.arch.channels.len();
        let check_block = |what: &str, b: usize| {
            if b < 1 || b > n_blocks {
                invalid(format!("{what} block {b} outside the extractor's 1..={n_blocks}"))
            } else {
                Ok(())
            }
        };
        check_block("dic", d.block)?;
        for &b in &self.anomaly_map.blocks {
            check_block("anomaly_map", b)?;
        }
        for &b in &self.adapt.blocks {
            check_block("adapt", b)?;
        }
        self.sampler.validate()?;
        self.anomaly_map.validate()?;
        self.adapt.validate()?;
        self.codec.model.validate()?;
        self.denoiser.arch.validate()?;
        self.denoiser.train.validate()?;
        if matches!(self.codec.model, CodecConfig::Autoencoder { .. }) {
            self.codec.train.validate()?;
        }
        if let Some(t) = self.denoiser.train.max_timestep {
            if t < d.t_max || t > self.schedule.steps {
                return invalid(format!(
                    "denoiser.train.max_timestep {t} must lie in [dic.t_max = {}, schedule.steps = {}]",
                    d.t_max, self.schedule.steps
                ));
            }
        }
        if self.denoiser.arch.in_channels != self.codec.model.latent_channels() {
            return invalid(format!(
                "denoiser.arch.in_channels {} differs from the codec's {} latent channels",
                self.denoiser.arch.in_channels,
                self.codec.model.latent_channels()
            ));
        }
        let multiple = self.codec.model.factor() * self.denoiser.arch.spatial_multiple();
        if self.data.resolution == 0 || self.data.resolution % multiple != 0 {
            return invalid(format!("data.resolution {} must be a multiple of {multiple}", self.data.resolution));
        }
        if !(0.0..1.0).contains(&self.data.validation_fraction) {
            return invalid("data.validation_fraction must lie in [0, 1)");
        }
        if self.data.root.is_none() {
            self.data.synthetic.validate()?;
        }
        if !(self.eval.pro_fpr_limit > 0.0 && self.eval.pro_fpr_limit <= 1.0) {
            return invalid("eval.pro_fpr_limit must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.eval.target_fpr) {
            return invalid("eval.target_fpr must lie in [0, 1]");
        }
        if self.bench.batch_size < 1 || self.bench.repeats < 1 {
            return invalid("bench.batch_size and bench.repeats must be >= 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a config file and applies `key.path=value` overrides in order.
    /// Values parse as TOML where possible and as plain strings otherwise.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => String::from_utf8(crate::io::read(p)?)
                .map_err(|_| Error::InvalidConfig(format!("{} is not UTF-8", p.display())))?,
            None => String::new(),
        };
        let mut doc: toml::Table = if text.trim().is_empty() {
            toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Format(e.to_string()))?
        } else {
            text.parse().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_toml()?.as_bytes())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside a table, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return invalid(format!("override key `{key}` has an empty segment"));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return invalid(format!("override `{key}`: `{p}` is not a section")),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

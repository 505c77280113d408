//! Latent-diffusion anomaly detection with dynamic implicit conditioning.

pub mod anomaly_map;
pub mod config;
pub mod data;
pub mod dic;
pub mod diffusion;
pub mod domain_adapt;
pub mod error;
pub mod grid;
pub mod image;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod reconstruction;

pub use anomaly_map::{AnomalyMapConfig, AnomalyResult, Calibration, Normalization};
pub use config::RunConfig;
pub use data::{DatasetLayout, Sample, SyntheticSpec};
pub use dic::{BinTable, DicModel, FeatureIndex, StepChoice};
pub use diffusion::{GuidanceConfig, NoiseSchedule, Subsequence};
pub use domain_adapt::DomainAdaptConfig;
pub use error::{Error, Result};
pub use grid::{Grid, Map, Mask};
pub use image::Image;
pub use metrics::{CategoryReport, EvalReport};
pub use nets::{Codec, CodecConfig, Denoiser, FeatureExtractor, LatentCodec, TrainConfig, UNet, UNetConfig};
pub use pipeline::{AblationMode, AblationTable, BenchReport, Pipeline, RunDir};
pub use reconstruction::{ReconstructionResult, Reconstructor, SamplerConfig, StepMode};

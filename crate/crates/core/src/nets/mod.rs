//! Networks: noise predictor, latent codec, feature extractor, and training.

pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod denoiser;
pub mod params;
pub mod train;

pub use backbone::{load_backbone, BackboneConfig, FeatureExtractor};
pub use checkpoint::{Checkpoint, NamedArray};
pub use codec::{encode_images, train_codec, Autoencoder, Codec, CodecConfig, LatentCodec};
pub use denoiser::{Denoiser, LinearDenoiser, UNet, UNetConfig};
pub use params::ParamStore;
pub use train::{denoising_loss, train_denoiser, LatentStats, TrainConfig, TrainedDenoiser};

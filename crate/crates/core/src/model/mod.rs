//! The segmentation network.

pub mod cmmb;
pub mod config;
pub mod network;

pub use cmmb::Cmmb;
pub use config::{MambaConfig, ModelConfig, BOTTLENECK_CHANNELS, SPATIAL_DIVISOR};
pub use network::{
    ConvNormAct, Decoder, DecoderStage, Encoder, EncoderOutputs, EncoderStage, SegResMamba,
};

//! Image and caption encoders projecting into a shared unit-sphere space.

mod config;
mod encoder;

pub use config::{ModelConfig, VqConfig};
pub use encoder::{
    attention_pool, encode_image, CaptionNodes, Embedding, GroundingModel, LayerHook, Modality, NoHook,
};

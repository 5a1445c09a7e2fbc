//! Vector quantisation layers for the caption encoder.

mod codebook;
mod hooks;

pub use codebook::{vq_loss, Codebook, UsageStats, COLLAPSE_FRACTION};
pub use hooks::{
    activations_by_code, warm_start_insert, ActivationRecorder, InferenceVq, LayerRecord, LinearizedVq, TrainingVq,
    VqHook,
    VQ_LAYERS,
};

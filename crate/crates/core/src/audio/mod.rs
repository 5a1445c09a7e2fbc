//! 16 kHz waveforms to 39-dimensional MFCC feature sequences.

mod features;
mod mfcc;
mod wave;

pub use features::{frames_for_interval, FeatureSequence, FrameRange, FEATURE_DIM, FRAME_SHIFT_S, FRAME_WINDOW_S};
pub use mfcc::{
    base_features, cmvn, compute_mfcc, deltas, hz_to_mel, log_mel_energies, mel_to_hz, MelFilterbank, MfccConfig,
    CMVN_VAR_FLOOR,
};
pub use wave::{Waveform, SAMPLE_RATE};

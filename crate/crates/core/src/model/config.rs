use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder dimensions. Defaults are the desk-scale configuration;
/// [`ModelConfig::full_scale`] gives the full-size network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub image_feat_dim: usize,
    pub embed_dim: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub attn_dim: usize,
    pub vq: VqConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    pub enabled: bool,
    /// Codes in the layers inserted after LSTM layers 1 and 2.
    pub codebook_sizes: Vec<usize>,
    pub gamma: f64,
    /// Expected code width; checked against the LSTM output when set.
    pub code_dim: Option<usize>,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            enabled: false,
            codebook_sizes: vec![32, 64],
            gamma: 0.99,
            code_dim: None,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 39,
            image_feat_dim: 64,
            embed_dim: 64,
            conv_channels: 16,
            conv_kernel: 6,
            conv_stride: 2,
            lstm_layers: 2,
            lstm_hidden: 32,
            attn_dim: 16,
            vq: VqConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        ModelConfig {
            feature_dim: 39,
            image_feat_dim: 2048,
            embed_dim: 2048,
            conv_channels: 64,
            conv_kernel: 6,
            conv_stride: 2,
            lstm_layers: 4,
            lstm_hidden: 1024,
            attn_dim: 128,
            vq: VqConfig {
                enabled: false,
                codebook_sizes: vec![128, 2048],
                gamma: 0.99,
                code_dim: None,
            },
            seed: 0,
        }
    }

    /// The small configuration used for full gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            feature_dim: 39,
            image_feat_dim: 10,
            embed_dim: 16,
            conv_channels: 6,
            conv_kernel: 6,
            conv_stride: 2,
            lstm_layers: 2,
            lstm_hidden: 8,
            attn_dim: 4,
            vq: VqConfig {
                enabled: false,
                codebook_sizes: vec![4, 6],
                gamma: 0.99,
                code_dim: None,
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("image_feat_dim", self.image_feat_dim),
            ("conv_channels", self.conv_channels),
            ("conv_kernel", self.conv_kernel),
            ("conv_stride", self.conv_stride),
            ("lstm_layers", self.lstm_layers),
            ("lstm_hidden", self.lstm_hidden),
            ("attn_dim", self.attn_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.embed_dim != 2 * self.lstm_hidden {
            return Err(Error::Config(format!(
                "embed_dim {} must equal 2 x lstm_hidden {}",
                self.embed_dim, self.lstm_hidden
            )));
        }
        if self.vq.enabled {
            if self.lstm_layers < 2 {
                return Err(Error::Config("VQ layers need at least 2 LSTM layers".into()));
            }
            if self.vq.codebook_sizes.len() != 2 || self.vq.codebook_sizes.iter().any(|&n| n < 2) {
                return Err(Error::Config("need two codebooks with at least 2 codes each".into()));
            }
            if !(self.vq.gamma > 0.0 && self.vq.gamma < 1.0) {
                return Err(Error::Config(format!("gamma {} outside (0, 1)", self.vq.gamma)));
            }
        }
        Ok(())
    }
}

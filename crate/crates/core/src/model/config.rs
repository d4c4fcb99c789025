use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Architecture hyperparameters of the spatio-temporal attention classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_networks: usize,
    pub n_windows: usize,
    /// Output channels of each convolutional stem layer.
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// 2 means binary with a single logit.
    pub n_classes: usize,
    pub dropout: f64,
    /// Name of the attention row normalizer (see [`crate::norm::NormalizerRegistry`]).
    pub attention: String,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: two 8-channel 3x3 conv layers, d = 32, two blocks,
    /// one head, dropout 0.1, sparsemax attention.
    pub fn new(n_networks: usize, n_windows: usize) -> Self {
        ModelConfig {
            n_networks,
            n_windows,
            conv_channels: vec![8, 8],
            kernel_size: 3,
            embed_dim: 32,
            n_blocks: 2,
            n_heads: 1,
            ffn_dim: 64,
            n_classes: 2,
            dropout: 0.1,
            attention: "sparsemax".to_string(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_networks >= 1 && self.n_windows >= 1, "model extents must be positive");
        ensure!(!self.conv_channels.is_empty() && self.conv_channels.iter().all(|&c| c > 0), "conv stem needs at least one layer of positive width");
        ensure!(self.kernel_size % 2 == 1, "kernel size must be odd, got {}", self.kernel_size);
        ensure!(self.embed_dim > 0 && self.ffn_dim > 0 && self.n_blocks > 0, "embedding, feed-forward and block counts must be positive");
        ensure!(self.n_heads > 0 && self.embed_dim % self.n_heads == 0, "embedding dim {} not divisible by {} heads", self.embed_dim, self.n_heads);
        ensure!(self.n_classes >= 2, "need at least two classes");
        ensure!((0.0..1.0).contains(&self.dropout), "dropout {} outside [0, 1)", self.dropout);
        Ok(())
    }

    /// Width of the classification head: one logit for binary tasks.
    pub fn head_outputs(&self) -> usize {
        if self.n_classes == 2 {
            1
        } else {
            self.n_classes
        }
    }

    pub fn stem_channels(&self) -> usize {
        *self.conv_channels.last().unwrap()
    }
}

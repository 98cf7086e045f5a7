use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_max_seq_len() -> usize {
    4096
}

/// Architecture dimensions of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub embed_dim: usize,
    pub head_dim_q: usize,
    pub head_dim_k: usize,
    pub head_dim_v: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Config with equal q/k/v head widths.
    pub fn new(
        num_layers: usize,
        heads_per_layer: usize,
        embed_dim: usize,
        head_dim: usize,
        ffn_dim: usize,
        vocab_size: usize,
    ) -> Self {
        Self {
            num_layers,
            heads_per_layer,
            embed_dim,
            head_dim_q: head_dim,
            head_dim_k: head_dim,
            head_dim_v: head_dim,
            ffn_dim,
            vocab_size,
            max_seq_len: default_max_seq_len(),
        }
    }

    pub fn llama2_7b() -> Self {
        Self::new(32, 32, 4096, 128, 11008, 32000)
    }

    pub fn llama2_13b() -> Self {
        Self::new(40, 40, 5120, 128, 13824, 32000)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("heads_per_layer", self.heads_per_layer),
            ("embed_dim", self.embed_dim),
            ("head_dim_q", self.head_dim_q),
            ("head_dim_k", self.head_dim_k),
            ("head_dim_v", self.head_dim_v),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.head_dim_k != self.head_dim_q {
            return Err(Error::InvalidConfig(format!(
                "head_dim_k ({}) must equal head_dim_q ({})",
                self.head_dim_k, self.head_dim_q
            )));
        }
        if self.heads_per_layer * self.head_dim_q > self.embed_dim {
            return Err(Error::InvalidConfig(format!(
                "heads_per_layer x head_dim_q = {} exceeds embed_dim {}",
                self.heads_per_layer * self.head_dim_q,
                self.embed_dim
            )));
        }
        Ok(())
    }

    /// Total number of attention heads across all layers.
    pub fn total_heads(&self) -> usize {
        self.num_layers * self.heads_per_layer
    }

    /// Parameters owned by one head: its q, k, v projections plus its output-projection slice.
    pub fn params_per_head(&self) -> u64 {
        let d = self.embed_dim as u64;
        d * (self.head_dim_q + self.head_dim_k + self.head_dim_v) as u64
            + self.head_dim_v as u64 * d
    }

    /// Parameters of one gated FFN block (gate, up and down projections).
    pub fn params_per_ffn(&self) -> u64 {
        3 * self.embed_dim as u64 * self.ffn_dim as u64
    }

    /// Attention plus FFN parameters over all layers, excluding embeddings.
    pub fn block_params(&self) -> u64 {
        self.num_layers as u64
            * (self.heads_per_layer as u64 * self.params_per_head() + self.params_per_ffn())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::llama2_7b().validate().unwrap();
        ModelConfig::llama2_13b().validate().unwrap();
    }

    #[test]
    fn rejects_mismatched_key_width() {
        let mut cfg = ModelConfig::new(2, 2, 8, 4, 16, 10);
        cfg.head_dim_k = 3;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rejects_too_many_heads() {
        let cfg = ModelConfig::new(2, 3, 8, 4, 16, 10);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_zero_count() {
        let cfg = ModelConfig::new(0, 2, 8, 4, 16, 10);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn llama_block_params() {
        assert_eq!(ModelConfig::llama2_7b().block_params(), 6_476_005_376);
    }
}

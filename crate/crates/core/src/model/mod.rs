//! Transformer encoder over channel patches.
//!
//! Input rows are `[p_cls; p_1 … p_P]`. Each row is embedded as
//! `W_emb·p + b_emb` plus a learned positional term `W_pos·(i·1_L) + b_pos`
//! (zero position vector for the CLS row), then passed through `E`
//! post-norm encoder blocks. Masked rows are decoded by a shared bias-free
//! `W_dec`.

mod check;
mod forward;
mod params;

pub use check::check_model_gradients;
pub use forward::{
    capture_attention, embed_inputs, encode, encoder_block, forward_embed, pretrain_batch_grads, pretrain_loss,
    AttentionCapture, BatchGradients, EmbeddingOutput, MaskedSample,
};
pub use params::{LayerSlots, Layout, LwmParameters};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel patches per sequence (CLS excluded).
    pub num_patches: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// 128 patches of 16, D=64, 12 heads of 5, 12 layers, FFN 256.
    pub fn full() -> Self {
        Self {
            num_patches: 128,
            patch_len: 16,
            d_model: 64,
            heads: 12,
            layers: 12,
            d_ff: 256,
            dropout: 0.1,
        }
    }

    /// Smallest configuration exercised by gradient checks.
    pub fn micro() -> Self {
        Self {
            num_patches: 8,
            patch_len: 4,
            d_model: 8,
            heads: 2,
            layers: 2,
            d_ff: 16,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches + 1
    }

    pub fn validate(&self) -> Result<()> {
        let problem = if self.num_patches == 0 || !self.num_patches.is_multiple_of(2) {
            Some("patch count must be even and positive")
        } else if self.patch_len == 0 {
            Some("patch length must be positive")
        } else if self.d_model < 2 {
            Some("embedding size must be at least 2")
        } else if self.heads == 0 || self.head_dim() == 0 {
            Some("head count must be in 1..=d_model")
        } else if self.d_ff == 0 || !self.d_ff.is_multiple_of(self.d_model) {
            Some("FFN width must be a positive multiple of d_model")
        } else if !(0.0..1.0).contains(&self.dropout) {
            Some("dropout must be in [0,1)")
        } else {
            None
        };
        match problem {
            Some(p) => Err(Error::Contract(format!("{p}: {self:?}"))),
            None => Ok(()),
        }
    }

    /// Scalars in one encoder block.
    pub fn params_per_layer(&self) -> usize {
        let (d, h, dh, ff) = (self.d_model, self.heads, self.head_dim(), self.d_ff);
        3 * h * d * dh + h * dh * d + d * ff + ff + ff * d + d
    }

    /// Total trainable scalars: CLS, patch and positional embeddings,
    /// encoder blocks, decoder.
    pub fn param_count(&self) -> usize {
        let (l, d) = (self.patch_len, self.d_model);
        l + 2 * (d * l + d) + self.layers * self.params_per_layer() + l * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_parameter_count() {
        let cfg = ModelConfig::full();
        assert_eq!(cfg.head_dim(), 5);
        assert_eq!(cfg.params_per_layer(), 11_520 + 3_840 + 16_640 + 16_448);
        assert_eq!(cfg.param_count(), 584_592);
        let rel = (cfg.param_count() as f64 - 600_000.0).abs() / 600_000.0;
        assert!(rel < 0.03);
    }

    #[test]
    fn encoder_free_count() {
        let cfg = ModelConfig {
            layers: 0,
            ..ModelConfig::full()
        };
        assert_eq!(cfg.param_count(), 3_216);
    }

    #[test]
    fn depth_is_linear() {
        let base = ModelConfig::full();
        let deeper = ModelConfig { layers: 24, ..base };
        assert_eq!(deeper.param_count() - base.param_count(), 12 * 48_448);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::full().validate().is_ok());
        assert!(ModelConfig::micro().validate().is_ok());
        let bad = ModelConfig {
            d_ff: 100,
            ..ModelConfig::full()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            heads: 65,
            ..ModelConfig::full()
        };
        assert!(bad.validate().is_err());
    }
}

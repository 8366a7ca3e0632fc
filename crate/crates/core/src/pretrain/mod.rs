//! Masked channel modeling pre-training.

mod checkpoint;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
    CheckpointError,
};
pub use train::{
    baseline_nmse, epoch_loss, make_masked, pretrain, pretrain_baseline, split_indices, train_epoch, validate,
    validation_masks, EpochRecord, EpochStats, Validation,
};

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::patch::default_num_masked;
use crate::tensor::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Real patches selected per sample (their imaginary pairs follow).
    pub num_masked: usize,
    pub mask_value: f64,
    pub random_sigma: f64,
    pub val_fraction: f64,
    pub master_seed: u64,
    /// Reuse each sample's first-epoch mask every epoch (overfitting checks).
    pub fixed_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            lr_decay: 0.9,
            decay_every: 10,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            epochs: 50,
            num_masked: default_num_masked(ModelConfig::full().num_patches),
            mask_value: 1.0,
            random_sigma: 1.0,
            val_fraction: 0.2,
            master_seed: 42,
            fixed_masks: false,
        }
    }
}

impl TrainConfig {
    /// Defaults with the masked count scaled to the model's patch count.
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            num_masked: default_num_masked(model.num_patches),
            ..Self::default()
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> crate::Result<()> {
        let ok = self.lr0 >= 0.0
            && self.lr_decay > 0.0
            && self.decay_every >= 1
            && self.batch_size >= 1
            && self.num_masked >= 1
            && self.num_masked <= model.num_patches / 2
            && self.random_sigma > 0.0
            && (0.0..1.0).contains(&self.val_fraction);
        if ok {
            self.adam(self.lr0).validate()?;
            Ok(())
        } else {
            Err(crate::Error::Contract(format!("invalid training config {self:?}")))
        }
    }
}

/// `lr0 · decay^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = (epoch / cfg.decay_every.max(1)) as i32;
    cfg.lr0 * cfg.lr_decay.powi(steps)
}

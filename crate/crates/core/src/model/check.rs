use rand_distr::{Distribution, StandardNormal};

use super::{pretrain_loss, LwmParameters, MaskedSample, ModelConfig};
use crate::patch::{apply_mask, default_num_masked, draw_mask, PatchSequence};
use crate::seed::{self, Stream};
use crate::tensor::{grad_check, GradCheckConfig, GradCheckReport};
use crate::Result;

/// Finite-difference check of the full masked-reconstruction loss (two
/// masked samples, dropout active with fixed seeds) over every parameter.
pub fn check_model_gradients(cfg: &ModelConfig, seed: u64, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let params = LwmParameters::init(cfg, &mut seed::stream_rng(seed, Stream::Init, 0, 0))?;
    let mut batch = Vec::new();
    for i in 0..2u64 {
        let mut rng = seed::stream_rng(seed, Stream::Data, i, 0);
        let n = cfg.num_patches * cfg.patch_len;
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let seq = PatchSequence::new(cfg.num_patches, cfg.patch_len, data)?;
        let spec = draw_mask(cfg.num_patches, default_num_masked(cfg.num_patches), &mut rng)?;
        let (input, targets) = apply_mask(&seq, &spec, &mut rng)?;
        batch.push(MaskedSample { input, targets });
    }
    let dropout_seeds = [
        seed::derive(seed, Stream::Dropout, 0, 0),
        seed::derive(seed, Stream::Dropout, 0, 1),
    ];
    Ok(grad_check(
        &params,
        |g, ps| {
            pretrain_loss(g, ps, &batch, Some(&dropout_seeds))
                .map_err(|e| crate::tensor::TensorError::Contract(e.to_string()))
        },
        gc,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_model_gradients_match() {
        let r = check_model_gradients(&ModelConfig::micro(), 1, &GradCheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, ModelConfig::micro().param_count());
    }
}

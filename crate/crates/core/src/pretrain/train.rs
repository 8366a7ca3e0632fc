use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{lr_at, Checkpoint, TrainConfig};
use crate::channel::{apply_scale, normalization_scale, ChannelMatrix};
use crate::model::{pretrain_batch_grads, LwmParameters, MaskedSample, ModelConfig};
use crate::patch::{apply_mask, draw_mask, patchify, PatchSequence};
use crate::seed::{self, Stream};
use crate::tensor::{adam_step, AdamState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_nmse: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub mcm_loss: f64,
    pub nmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_nmse: f64,
    pub val_loss: f64,
    pub val_nmse: f64,
}

/// Seeded shuffle, then the last `round(n·val_fraction)` indices become the
/// validation split.
pub fn split_indices(n: usize, val_fraction: f64, master_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream_rng(master_seed, Stream::Split, 0, 0));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Draws and applies a mask with a dedicated stream.
pub fn make_masked(seq: &PatchSequence, cfg: &TrainConfig, stream: Stream, a: u64, b: u64) -> Result<MaskedSample> {
    let mut rng = seed::stream_rng(cfg.master_seed, stream, a, b);
    let mut spec = draw_mask(seq.num_patches(), cfg.num_masked, &mut rng)?;
    spec.mask_value = cfg.mask_value;
    spec.random_sigma = cfg.random_sigma;
    let (input, targets) = apply_mask(seq, &spec, &mut rng)?;
    Ok(MaskedSample { input, targets })
}

fn epoch_samples(
    data: &[PatchSequence],
    cfg: &TrainConfig,
    epoch: usize,
    batch: &[usize],
) -> Result<Vec<MaskedSample>> {
    let mask_epoch = if cfg.fixed_masks { 0 } else { epoch as u64 };
    batch
        .iter()
        .map(|&i| make_masked(&data[i], cfg, Stream::Mask, mask_epoch, i as u64))
        .collect()
}

fn epoch_order(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream_rng(cfg.master_seed, Stream::Shuffle, epoch as u64, 0));
    order
}

/// One pass over `data` with fresh masks, dropout, and an Adam step per
/// batch at `lr_at(epoch)`. The last partial batch is kept.
pub fn train_epoch(
    data: &[PatchSequence],
    params: &mut LwmParameters,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let lr = lr_at(epoch, cfg);
    opt.config.lr = lr;
    let order = epoch_order(data.len(), cfg, epoch);
    let (mut sse, mut energy, mut targets, mut steps) = (0.0, 0.0, 0usize, 0usize);
    for batch in order.chunks(cfg.batch_size) {
        let samples = epoch_samples(data, cfg, epoch, batch)?;
        let seeds: Vec<u64> = batch
            .iter()
            .map(|&i| seed::derive(cfg.master_seed, Stream::Dropout, epoch as u64, i as u64))
            .collect();
        let out = pretrain_batch_grads(params, &samples, Some(&seeds), true)?;
        if !out.loss.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite loss at epoch {epoch}, step {steps}"
            )));
        }
        out.grads.accumulate_into(params.tensors_mut())?;
        adam_step(params.tensors_mut(), opt)?;
        sse += out.sse;
        energy += target_energy(&samples);
        targets += out.targets;
        steps += 1;
    }
    Ok(EpochStats {
        epoch,
        lr,
        train_loss: sse / targets as f64,
        train_nmse: sse / energy,
        steps,
    })
}

/// Evaluation-mode loss of `data` under the masks `train_epoch` would draw
/// for `epoch`.
pub fn epoch_loss(data: &[PatchSequence], params: &LwmParameters, cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let samples = epoch_samples(data, cfg, epoch, &idx)?;
    Ok(pretrain_batch_grads(params, &samples, None, false)?.loss)
}

/// Validation masks are drawn once per sample from a fixed stream so the
/// curve is comparable across epochs.
pub fn validation_masks(data: &[PatchSequence], cfg: &TrainConfig) -> Result<Vec<MaskedSample>> {
    data.iter()
        .enumerate()
        .map(|(i, s)| make_masked(s, cfg, Stream::ValidationMask, i as u64, 0))
        .collect()
}

/// Reconstruction loss and `NMSE = Σ‖rec − target‖² / Σ‖target‖²` in
/// evaluation mode.
pub fn validate(samples: &[MaskedSample], params: &LwmParameters) -> Result<Validation> {
    if samples.is_empty() {
        return Ok(Validation {
            mcm_loss: f64::NAN,
            nmse: f64::NAN,
        });
    }
    let out = pretrain_batch_grads(params, samples, None, false)?;
    let energy = target_energy(samples);
    Ok(Validation {
        mcm_loss: out.loss,
        nmse: out.sse / energy,
    })
}

fn target_energy(samples: &[MaskedSample]) -> f64 {
    samples
        .iter()
        .flat_map(|s| s.targets.values())
        .flat_map(|t| t.iter())
        .map(|v| v * v)
        .sum()
}

/// NMSE of predicting each masked patch by the elementwise mean of the
/// unmasked patches in the same (real or imaginary) half.
pub fn baseline_nmse(samples: &[MaskedSample]) -> f64 {
    let mut err = 0.0;
    for s in samples {
        let p = s.input.num_patches();
        let half = p / 2;
        let l = s.input.patch_len();
        for (&idx, target) in &s.targets {
            let range = if idx < half { 0..half } else { half..p };
            let mut mean = vec![0.0; l];
            let mut count = 0usize;
            for j in range.filter(|j| !s.targets.contains_key(j)) {
                for (m, v) in mean.iter_mut().zip(s.input.patch(j)) {
                    *m += v;
                }
                count += 1;
            }
            if count > 0 {
                mean.iter_mut().for_each(|m| *m /= count as f64);
            }
            err += mean.iter().zip(target).map(|(m, t)| (m - t) * (m - t)).sum::<f64>();
        }
    }
    err / target_energy(samples)
}

struct Prepared {
    train: Vec<PatchSequence>,
    val: Vec<MaskedSample>,
    norm_scale: f64,
}

/// Split, normalize on the training split and fix the validation masks.
fn prepare(channels: &[ChannelMatrix], model: &ModelConfig, cfg: &TrainConfig) -> Result<Prepared> {
    model.validate()?;
    cfg.validate(model)?;
    if channels.is_empty() {
        return Err(Error::Contract("no channels to pre-train on".into()));
    }
    let (train_idx, val_idx) = split_indices(channels.len(), cfg.val_fraction, cfg.master_seed);
    let train_raw: Vec<ChannelMatrix> = train_idx.iter().map(|&i| channels[i].clone()).collect();
    let norm_scale = normalization_scale(&train_raw)?;
    let to_patches = |chs: &[ChannelMatrix]| -> Result<Vec<PatchSequence>> {
        apply_scale(chs, norm_scale)
            .iter()
            .map(|c| patchify(c, model.num_patches))
            .collect()
    };
    let train = to_patches(&train_raw)?;
    if train[0].patch_len() != model.patch_len {
        return Err(Error::Shape(format!(
            "channels give patches of length {}, model expects {}",
            train[0].patch_len(),
            model.patch_len
        )));
    }
    let val_raw: Vec<ChannelMatrix> = val_idx.iter().map(|&i| channels[i].clone()).collect();
    let val = validation_masks(&to_patches(&val_raw)?, cfg)?;
    Ok(Prepared { train, val, norm_scale })
}

/// Mean-of-unmasked-patches NMSE on the validation split `pretrain` would
/// use for the same inputs (NaN without a validation split).
pub fn pretrain_baseline(channels: &[ChannelMatrix], model: &ModelConfig, cfg: &TrainConfig) -> Result<f64> {
    let p = prepare(channels, model, cfg)?;
    Ok(if p.val.is_empty() {
        f64::NAN
    } else {
        baseline_nmse(&p.val)
    })
}

/// Full pre-training run: split, normalize on the training split, train for
/// `cfg.epochs` epochs and validate after each one.
pub fn pretrain(
    channels: &[ChannelMatrix],
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    let Prepared { train, val, norm_scale } = prepare(channels, model, cfg)?;
    let mut params = LwmParameters::init(model, &mut seed::stream_rng(cfg.master_seed, Stream::Init, 0, 0))?;
    let mut opt = AdamState::new(params.tensors(), cfg.adam(cfg.lr0))?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(&train, &mut params, &mut opt, cfg, epoch)?;
        let v = validate(&val, &params)?;
        let rec = EpochRecord {
            epoch,
            lr: stats.lr,
            train_loss: stats.train_loss,
            train_nmse: stats.train_nmse,
            val_loss: v.mcm_loss,
            val_nmse: v.nmse,
        };
        info!(
            "epoch {epoch}: lr {:.3e} train {:.5} val {:.5} nmse {:.5}",
            rec.lr, rec.train_loss, rec.val_loss, rec.val_nmse
        );
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(Checkpoint {
        model: *model,
        train: cfg.clone(),
        norm_scale,
        epoch: cfg.epochs,
        params,
        optimizer: Some(opt),
        history,
    })
}

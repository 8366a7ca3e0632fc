//! Channel ⇄ patch sequence conversion and masked channel modeling.
//!
//! A channel's real plane is flattened antenna-major and cut into `P/2`
//! consecutive patches of length `L = 2·A·S/P`; the imaginary plane fills
//! patches `P/2..P` the same way. Masking always hits a real patch `i` and
//! its imaginary counterpart `i + P/2` together, with the same action.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelMatrix;
use crate::{Error, Result};

/// `P` patches of length `L`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    num_patches: usize,
    patch_len: usize,
    data: Vec<f64>,
}

impl PatchSequence {
    pub fn new(num_patches: usize, patch_len: usize, data: Vec<f64>) -> Result<Self> {
        if num_patches == 0 || !num_patches.is_multiple_of(2) || patch_len == 0 || data.len() != num_patches * patch_len
        {
            return Err(Error::Shape(format!(
                "{} values cannot form {num_patches} patches of length {patch_len}",
                data.len()
            )));
        }
        Ok(Self {
            num_patches,
            patch_len,
            data,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.patch_len..(i + 1) * self.patch_len]
    }

    pub fn patch_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.patch_len..(i + 1) * self.patch_len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn swap_patches(&mut self, i: usize, j: usize) {
        for k in 0..self.patch_len {
            self.data.swap(i * self.patch_len + k, j * self.patch_len + k);
        }
    }
}

pub fn patchify(ch: &ChannelMatrix, num_patches: usize) -> Result<PatchSequence> {
    let n = ch.antennas() * ch.subcarriers();
    if num_patches == 0 || !num_patches.is_multiple_of(2) || !(2 * n).is_multiple_of(num_patches) {
        return Err(Error::Shape(format!(
            "{}x{} channel cannot be cut into {num_patches} patches",
            ch.antennas(),
            ch.subcarriers()
        )));
    }
    let mut data = Vec::with_capacity(2 * n);
    data.extend_from_slice(ch.real());
    data.extend_from_slice(ch.imag());
    PatchSequence::new(num_patches, 2 * n / num_patches, data)
}

pub fn unpatchify(seq: &PatchSequence, antennas: usize, subcarriers: usize) -> Result<ChannelMatrix> {
    let n = antennas * subcarriers;
    if 2 * n != seq.data.len() {
        return Err(Error::Shape(format!(
            "{} patches of length {} do not fit a {antennas}x{subcarriers} channel",
            seq.num_patches, seq.patch_len
        )));
    }
    ChannelMatrix::new(antennas, subcarriers, seq.data[..n].to_vec(), seq.data[n..].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskAction {
    /// Replace with the uniform mask patch `m·1_L`.
    Mask,
    /// Replace with fresh `N(0, σ²)` noise.
    Random,
    /// Leave unchanged (still a reconstruction target).
    Keep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// Selected real-part indices, ascending.
    pub selected: Vec<usize>,
    /// One action per entry of `selected`.
    pub actions: Vec<MaskAction>,
    pub mask_value: f64,
    pub random_sigma: f64,
    num_patches: usize,
}

impl MaskSpec {
    pub fn new(num_patches: usize, selected: Vec<usize>, actions: Vec<MaskAction>) -> Result<Self> {
        let half = num_patches / 2;
        let mut sorted = selected.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if selected.is_empty()
            || selected.len() != actions.len()
            || sorted.len() != selected.len()
            || selected.iter().any(|&i| i >= half)
        {
            return Err(Error::Contract(format!(
                "mask {selected:?} with {} actions is invalid for {num_patches} patches",
                actions.len()
            )));
        }
        Ok(Self {
            selected,
            actions,
            mask_value: 1.0,
            random_sigma: 1.0,
            num_patches,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    /// Every affected index: each selected real index and its imaginary pair.
    pub fn all_indices(&self) -> Vec<usize> {
        let half = self.num_patches / 2;
        let mut v: Vec<usize> = self.selected.iter().flat_map(|&i| [i, i + half]).collect();
        v.sort_unstable();
        v
    }
}

/// Selected-patch count for a masking percentage of the real half.
pub fn masked_count_for_percent(num_patches: usize, percent: f64) -> Result<usize> {
    if !(percent > 0.0 && percent < 100.0) {
        return Err(Error::Contract(format!("masking percentage {percent} outside (0,100)")));
    }
    let count = (percent / 100.0 * (num_patches / 2) as f64).round() as usize;
    if count == 0 {
        return Err(Error::Contract(format!(
            "{percent}% of {} real patches selects nothing",
            num_patches / 2
        )));
    }
    Ok(count)
}

/// Default selected count: 9 of 64 real patches, scaled to other sizes.
pub fn default_num_masked(num_patches: usize) -> usize {
    (((num_patches / 2) as f64 * 9.0 / 64.0).round() as usize).max(1)
}

/// Picks `num_masked` distinct real patches uniformly and an action for
/// each: MASK 0.8, RANDOM 0.1, KEEP 0.1.
pub fn draw_mask<R: Rng + ?Sized>(num_patches: usize, num_masked: usize, rng: &mut R) -> Result<MaskSpec> {
    let half = num_patches / 2;
    if !num_patches.is_multiple_of(2) || num_masked == 0 || num_masked > half {
        return Err(Error::Contract(format!(
            "cannot select {num_masked} of {half} real patches"
        )));
    }
    let mut selected = index::sample(rng, half, num_masked).into_vec();
    selected.sort_unstable();
    let actions = selected
        .iter()
        .map(|_| {
            let u: f64 = rng.random();
            if u < 0.8 {
                MaskAction::Mask
            } else if u < 0.9 {
                MaskAction::Random
            } else {
                MaskAction::Keep
            }
        })
        .collect();
    MaskSpec::new(num_patches, selected, actions)
}

/// Original patches of every masked index, keyed by patch index.
pub type Targets = BTreeMap<usize, Vec<f64>>;

/// Applies `spec` to both halves and records the originals of every
/// affected index (all three actions) as reconstruction targets.
pub fn apply_mask<R: Rng + ?Sized>(
    seq: &PatchSequence,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<(PatchSequence, Targets)> {
    if spec.num_patches != seq.num_patches {
        return Err(Error::Contract(format!(
            "mask drawn for {} patches applied to {}",
            spec.num_patches, seq.num_patches
        )));
    }
    let half = seq.num_patches / 2;
    let normal = Normal::new(0.0, spec.random_sigma)
        .map_err(|e| Error::Contract(format!("random sigma {}: {e}", spec.random_sigma)))?;
    let mut out = seq.clone();
    let mut targets = Targets::new();
    for (&i, &action) in spec.selected.iter().zip(&spec.actions) {
        for idx in [i, i + half] {
            targets.insert(idx, seq.patch(idx).to_vec());
            match action {
                MaskAction::Mask => out.patch_mut(idx).fill(spec.mask_value),
                MaskAction::Random => out.patch_mut(idx).iter_mut().for_each(|v| *v = normal.sample(rng)),
                MaskAction::Keep => {}
            }
        }
    }
    Ok((out, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn full_scale_patch_geometry() {
        let ch = ChannelMatrix::zeros(32, 32);
        let seq = patchify(&ch, 128).unwrap();
        assert_eq!(seq.num_patches(), 128);
        assert_eq!(seq.patch_len(), 16);
        assert!(seq.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_enumerated_small_case() {
        let real: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let imag: Vec<f64> = (0..8).map(|v| 100.0 + v as f64).collect();
        let ch = ChannelMatrix::new(2, 4, real, imag).unwrap();
        let seq = patchify(&ch, 4).unwrap();
        assert_eq!(seq.patch_len(), 4);
        // zero-based patch 0 is the "first" patch: antenna 0's real row
        assert_eq!(seq.patch(0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(seq.patch(1), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(seq.patch(2), &[100.0, 101.0, 102.0, 103.0]);
        assert_eq!(seq.patch(3), &[104.0, 105.0, 106.0, 107.0]);
    }

    #[test]
    fn indivisible_shapes_are_rejected() {
        let ch = ChannelMatrix::zeros(3, 3);
        assert!(patchify(&ch, 4).is_err());
        assert!(patchify(&ch, 3).is_err());
        assert!(patchify(&ch, 0).is_err());
        let seq = patchify(&ChannelMatrix::zeros(2, 4), 4).unwrap();
        assert!(unpatchify(&seq, 2, 3).is_err());
    }

    #[test]
    fn swapped_patches_do_not_round_trip() {
        let mut rng = seed::rng(1);
        let ch = crate::channel::generate_channel(&Default::default(), 4, 4, &mut rng);
        let mut seq = patchify(&ch, 8).unwrap();
        seq.swap_patches(0, 1);
        let back = unpatchify(&seq, 4, 4).unwrap();
        assert_ne!(back.real(), ch.real());
    }

    #[test]
    fn full_masking_count() {
        assert_eq!(default_num_masked(128), 9);
        let spec = draw_mask(128, 9, &mut seed::rng(0)).unwrap();
        assert_eq!(spec.selected.len(), 9);
        assert_eq!(spec.all_indices().len(), 18);
        assert_eq!(masked_count_for_percent(128, 15.0).unwrap(), 10);
        assert!(masked_count_for_percent(8, 5.0).is_err());
        assert!(masked_count_for_percent(8, 0.0).is_err());
        assert!(draw_mask(8, 0, &mut seed::rng(0)).is_err());
        assert!(draw_mask(8, 5, &mut seed::rng(0)).is_err());
    }

    #[test]
    fn single_mask_action_hits_both_halves() {
        let ch = crate::channel::generate_channel(&Default::default(), 4, 8, &mut seed::rng(4));
        let seq = patchify(&ch, 8).unwrap();
        let spec = MaskSpec::new(8, vec![0], vec![MaskAction::Mask]).unwrap();
        let (masked, targets) = apply_mask(&seq, &spec, &mut seed::rng(0)).unwrap();
        assert_eq!(masked.patch(0), &[1.0; 8]);
        assert_eq!(masked.patch(4), &[1.0; 8]);
        for i in [1, 2, 3, 5, 6, 7] {
            assert_eq!(masked.patch(i), seq.patch(i));
        }
        assert_eq!(targets.keys().copied().collect::<Vec<_>>(), vec![0, 4]);
        assert_eq!(targets[&0], seq.patch(0));
    }

    #[test]
    fn keep_only_mask_still_has_targets() {
        let ch = crate::channel::generate_channel(&Default::default(), 4, 8, &mut seed::rng(4));
        let seq = patchify(&ch, 8).unwrap();
        let spec = MaskSpec::new(8, vec![1, 3], vec![MaskAction::Keep; 2]).unwrap();
        let (masked, targets) = apply_mask(&seq, &spec, &mut seed::rng(0)).unwrap();
        assert_eq!(masked, seq);
        assert_eq!(targets.len(), 4);
    }
}

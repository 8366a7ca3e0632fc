//! Synthetic MIMO-OFDM channels, DFT beam labels, noise, and the `LWMC`
//! dataset file.

mod codebook;
mod io;
mod noise;
mod synth;

pub use codebook::{beam_labels, beam_powers, best_beam, label_beams, DftCodebook};
pub(crate) use io::write_atomic;
pub use io::{decode_dataset, encode_dataset, read_dataset, write_dataset, FormatError};
pub use noise::add_noise;
pub use synth::{draw_paths, generate_channel, generate_dataset, synthesize, Path, ScenarioConfig};

use crate::{Error, Result};

/// Complex `antennas × subcarriers` channel stored as two row-major planes
/// (antenna-major: antenna 0's subcarriers first).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    antennas: usize,
    subcarriers: usize,
    real: Vec<f64>,
    imag: Vec<f64>,
    pub los: Option<bool>,
    pub beam: Option<usize>,
}

impl ChannelMatrix {
    pub fn new(antennas: usize, subcarriers: usize, real: Vec<f64>, imag: Vec<f64>) -> Result<Self> {
        let n = antennas * subcarriers;
        if antennas == 0 || subcarriers == 0 || real.len() != n || imag.len() != n {
            return Err(Error::Shape(format!(
                "channel {antennas}x{subcarriers} with planes of {} and {} values",
                real.len(),
                imag.len()
            )));
        }
        Ok(Self {
            antennas,
            subcarriers,
            real,
            imag,
            los: None,
            beam: None,
        })
    }

    pub fn zeros(antennas: usize, subcarriers: usize) -> Self {
        let n = antennas * subcarriers;
        Self::new(antennas, subcarriers, vec![0.0; n], vec![0.0; n]).expect("empty channel")
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn subcarriers(&self) -> usize {
        self.subcarriers
    }

    pub fn real(&self) -> &[f64] {
        &self.real
    }

    pub fn imag(&self) -> &[f64] {
        &self.imag
    }

    pub fn real_mut(&mut self) -> &mut [f64] {
        &mut self.real
    }

    pub fn imag_mut(&mut self) -> &mut [f64] {
        &mut self.imag
    }

    pub fn get(&self, antenna: usize, subcarrier: usize) -> (f64, f64) {
        let i = antenna * self.subcarriers + subcarrier;
        (self.real[i], self.imag[i])
    }

    /// Mean `|h|²` over all entries.
    pub fn mean_power(&self) -> f64 {
        let s: f64 = self.real.iter().zip(&self.imag).map(|(r, i)| r * r + i * i).sum();
        s / self.real.len() as f64
    }

    /// Copy with every entry multiplied by the real scalar `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.real.iter_mut().for_each(|v| *v *= s);
        out.imag.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Copy multiplied by the complex scalar `re + j·im`.
    pub fn rotated(&self, re: f64, im: f64) -> Self {
        let mut out = self.clone();
        for k in 0..self.real.len() {
            let (a, b) = (self.real[k], self.imag[k]);
            out.real[k] = a * re - b * im;
            out.imag[k] = a * im + b * re;
        }
        out
    }

    /// Real plane followed by imaginary plane.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.real.len());
        v.extend_from_slice(&self.real);
        v.extend_from_slice(&self.imag);
        v
    }
}

/// Mean per-element power over a whole dataset.
pub fn dataset_power(channels: &[ChannelMatrix]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for ch in channels {
        sum += ch.mean_power() * ch.real.len() as f64;
        count += ch.real.len();
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Scale that brings the dataset's mean per-element power to one.
pub fn normalization_scale(channels: &[ChannelMatrix]) -> Result<f64> {
    let p = dataset_power(channels);
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::Contract(format!("cannot normalize dataset with power {p}")));
    }
    Ok(1.0 / p.sqrt())
}

pub fn apply_scale(channels: &[ChannelMatrix], scale: f64) -> Vec<ChannelMatrix> {
    channels.iter().map(|c| c.scaled(scale)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_brings_power_to_one() {
        let mut rng = crate::seed::rng(3);
        let cfg = ScenarioConfig::default();
        let chans: Vec<_> = (0..50)
            .map(|_| generate_channel(&cfg, 8, 8, &mut rng).scaled(3.7))
            .collect();
        let s = normalization_scale(&chans).unwrap();
        let normed = apply_scale(&chans, s);
        assert!((dataset_power(&normed) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_dataset_cannot_be_normalized() {
        assert!(normalization_scale(&[ChannelMatrix::zeros(2, 2)]).is_err());
        assert!(normalization_scale(&[]).is_err());
    }

    #[test]
    fn shape_is_checked() {
        assert!(ChannelMatrix::new(2, 2, vec![0.0; 4], vec![0.0; 3]).is_err());
        assert!(ChannelMatrix::new(0, 2, vec![], vec![]).is_err());
    }
}

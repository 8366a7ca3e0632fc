use std::f64::consts::PI;

use num_complex::Complex64;

use super::ChannelMatrix;
use crate::{Error, Result};

/// `K` DFT beams over `A` antennas; beam `k` has entries
/// `(1/√A)·exp(−j2π·a·k/K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DftCodebook {
    size: usize,
    antennas: usize,
    vectors: Vec<Vec<Complex64>>,
}

impl DftCodebook {
    pub fn new(size: usize, antennas: usize) -> Result<Self> {
        if !(2..=4096).contains(&size) || antennas == 0 {
            return Err(Error::Contract(format!(
                "codebook size {size} over {antennas} antennas is not supported"
            )));
        }
        let norm = 1.0 / (antennas as f64).sqrt();
        let vectors = (0..size)
            .map(|k| {
                (0..antennas)
                    .map(|a| Complex64::from_polar(norm, -2.0 * PI * (a * k) as f64 / size as f64))
                    .collect()
            })
            .collect();
        Ok(Self {
            size,
            antennas,
            vectors,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn vector(&self, k: usize) -> &[Complex64] {
        &self.vectors[k]
    }
}

/// Received power of every beam summed over subcarriers:
/// `Σ_s |f_kᵀ h_s|²`, i.e. the combiner for beam `k` is `conj(f_k)`, which
/// is steered towards `sin θ = 2k/K` for the channel's ULA response.
pub fn beam_powers(ch: &ChannelMatrix, cb: &DftCodebook) -> Result<Vec<f64>> {
    if cb.antennas != ch.antennas() {
        return Err(Error::Shape(format!(
            "codebook for {} antennas applied to a {}-antenna channel",
            cb.antennas,
            ch.antennas()
        )));
    }
    let (a_n, s_n) = (ch.antennas(), ch.subcarriers());
    let mut powers = vec![0.0; cb.size];
    for (k, f) in cb.vectors.iter().enumerate() {
        let mut total = 0.0;
        for s in 0..s_n {
            let mut acc = Complex64::new(0.0, 0.0);
            for (a, fa) in f.iter().enumerate().take(a_n) {
                let (re, im) = ch.get(a, s);
                acc += fa * Complex64::new(re, im);
            }
            total += acc.norm_sqr();
        }
        powers[k] = total;
    }
    Ok(powers)
}

/// Index of the strongest beam; ties go to the lowest index.
pub fn best_beam(ch: &ChannelMatrix, cb: &DftCodebook) -> Result<usize> {
    let powers = beam_powers(ch, cb)?;
    let mut best = 0;
    for (k, &p) in powers.iter().enumerate() {
        if p > powers[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Best beam of every channel for a `size`-beam codebook.
pub fn beam_labels(channels: &[ChannelMatrix], size: usize) -> Result<Vec<usize>> {
    let Some(first) = channels.first() else {
        return Ok(Vec::new());
    };
    let cb = DftCodebook::new(size, first.antennas())?;
    crate::exec::map_slice(channels, |c| best_beam(c, &cb))
        .into_iter()
        .collect()
}

/// Sets the beam label of every channel for a `size`-beam codebook.
pub fn label_beams(channels: &mut [ChannelMatrix], size: usize) -> Result<()> {
    let labels = beam_labels(channels, size)?;
    for (c, l) in channels.iter_mut().zip(labels) {
        c.beam = Some(l);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vectors_have_unit_norm() {
        for &k in &[2, 16, 64, 256] {
            let cb = DftCodebook::new(k, 32).unwrap();
            for i in 0..k {
                let n: f64 = cb.vector(i).iter().map(|c| c.norm_sqr()).sum();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
        assert!(DftCodebook::new(1, 4).is_err());
        assert!(DftCodebook::new(4097, 4).is_err());
    }

    #[test]
    fn flat_channel_picks_beam_zero() {
        let mut ch = ChannelMatrix::zeros(8, 4);
        ch.real_mut().iter_mut().for_each(|v| *v = 1.0);
        let cb = DftCodebook::new(8, 8).unwrap();
        assert_eq!(best_beam(&ch, &cb).unwrap(), 0);
    }

    #[test]
    fn conjugate_beam_is_matched() {
        let cb = DftCodebook::new(16, 16).unwrap();
        let f3 = cb.vector(3);
        let mut ch = ChannelMatrix::zeros(16, 5);
        for (a, f) in f3.iter().enumerate() {
            for s in 0..5 {
                ch.real_mut()[a * 5 + s] = f.re;
                ch.imag_mut()[a * 5 + s] = -f.im;
            }
        }
        assert_eq!(best_beam(&ch, &cb).unwrap(), 3);
    }

    #[test]
    fn ties_break_low() {
        let ch = ChannelMatrix::zeros(4, 4);
        let cb = DftCodebook::new(8, 4).unwrap();
        assert_eq!(best_beam(&ch, &cb).unwrap(), 0);
    }

    #[test]
    fn antenna_mismatch_is_rejected() {
        let ch = ChannelMatrix::zeros(4, 4);
        let cb = DftCodebook::new(8, 8).unwrap();
        assert!(best_beam(&ch, &cb).is_err());
    }
}

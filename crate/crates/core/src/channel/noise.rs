use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ChannelMatrix;
use crate::{Error, Result};

/// Adds i.i.d. circular complex Gaussian noise with per-element variance
/// `P_ch / 10^(snr_db/10)`. `snr_db = +∞` returns the channel unchanged.
pub fn add_noise<R: Rng + ?Sized>(ch: &ChannelMatrix, snr_db: f64, rng: &mut R) -> Result<ChannelMatrix> {
    let power = ch.mean_power();
    if power.is_nan() || power <= 0.0 {
        return Err(Error::Contract(
            "cannot add noise relative to a zero-power channel".into(),
        ));
    }
    if snr_db == f64::INFINITY {
        return Ok(ch.clone());
    }
    if snr_db.is_nan() {
        return Err(Error::Contract("SNR is NaN".into()));
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
    let mut out = ch.clone();
    for k in 0..out.real.len() {
        let nr: f64 = StandardNormal.sample(rng);
        let ni: f64 = StandardNormal.sample(rng);
        out.real[k] += sigma * nr;
        out.imag[k] += sigma * ni;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn unit_channel(a: usize, s: usize) -> ChannelMatrix {
        let mut ch = ChannelMatrix::zeros(a, s);
        ch.real_mut().iter_mut().for_each(|v| *v = 1.0);
        ch.los = Some(true);
        ch.beam = Some(2);
        ch
    }

    fn noise_power(clean: &ChannelMatrix, noisy: &ChannelMatrix) -> f64 {
        let n = clean.real().len() as f64;
        clean
            .real()
            .iter()
            .zip(noisy.real())
            .zip(clean.imag().iter().zip(noisy.imag()))
            .map(|((a, b), (c, d))| (a - b).powi(2) + (c - d).powi(2))
            .sum::<f64>()
            / n
    }

    #[test]
    fn infinite_snr_is_identity() {
        let ch = unit_channel(4, 4);
        let out = add_noise(&ch, f64::INFINITY, &mut seed::rng(0)).unwrap();
        assert_eq!(out, ch);
    }

    #[test]
    fn zero_db_noise_matches_signal_power() {
        let ch = unit_channel(1000, 1000);
        let out = add_noise(&ch, 0.0, &mut seed::rng(1)).unwrap();
        let p = noise_power(&ch, &out);
        assert!((p - 1.0).abs() < 0.01, "noise power {p}");
        assert_eq!(out.los, Some(true));
        assert_eq!(out.beam, Some(2));
    }

    #[test]
    fn five_db_operating_point() {
        let ch = unit_channel(500, 400).scaled(2.0);
        let out = add_noise(&ch, 5.0, &mut seed::rng(2)).unwrap();
        let ratio = noise_power(&ch, &out) / ch.mean_power();
        assert!((ratio - 10f64.powf(-0.5)).abs() < 0.01 * 0.316, "ratio {ratio}");
    }

    #[test]
    fn zero_power_is_rejected() {
        let ch = ChannelMatrix::zeros(2, 2);
        assert!(add_noise(&ch, 10.0, &mut seed::rng(0)).is_err());
    }
}

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ChannelMatrix;
use crate::seed::{self, Stream};

/// Clustered geometric multipath scenario for a half-wavelength ULA at the
/// base station and a single-antenna user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub num_paths: usize,
    pub los_probability: f64,
    /// Mean of the exponential delay distribution, seconds.
    pub delay_spread: f64,
    /// Width of the angular window around the cluster centre, radians.
    pub angle_spread: f64,
    /// Subcarrier spacing, hertz.
    pub carrier_spacing: f64,
    /// LoS amplitude as a multiple of the RMS amplitude of the other paths.
    pub los_dominance: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_paths: 6,
            los_probability: 0.5,
            delay_spread: 300e-9,
            angle_spread: PI / 6.0,
            carrier_spacing: 120e3,
            los_dominance: 4.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.num_paths >= 1
            && (0.0..=1.0).contains(&self.los_probability)
            && self.delay_spread >= 0.0
            && self.angle_spread >= 0.0
            && self.carrier_spacing > 0.0
            && self.los_dominance >= 3.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Contract(format!("invalid scenario {self:?}")))
        }
    }
}

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub gain: Complex64,
    /// Seconds.
    pub delay: f64,
    /// Angle of departure from broadside, radians.
    pub angle: f64,
}

/// `H[a,s] = Σ α·exp(−j2π·s·Δf·τ)·exp(jπ·a·sin θ)`.
pub fn synthesize(paths: &[Path], antennas: usize, subcarriers: usize, carrier_spacing: f64) -> ChannelMatrix {
    let mut ch = ChannelMatrix::zeros(antennas, subcarriers);
    for p in paths {
        let spatial: Vec<Complex64> = (0..antennas)
            .map(|a| Complex64::from_polar(1.0, PI * a as f64 * p.angle.sin()))
            .collect();
        let spectral: Vec<Complex64> = (0..subcarriers)
            .map(|s| p.gain * Complex64::from_polar(1.0, -2.0 * PI * s as f64 * carrier_spacing * p.delay))
            .collect();
        for (a, sp) in spatial.iter().enumerate() {
            for (s, fr) in spectral.iter().enumerate() {
                let h = sp * fr;
                let i = a * subcarriers + s;
                ch.real[i] += h.re;
                ch.imag[i] += h.im;
            }
        }
    }
    ch
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Draws the path set of one user. Returns the paths (LoS first, when
/// present) and the LoS flag. Gains are normalized to unit total power.
pub fn draw_paths<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> (Vec<Path>, bool) {
    let centre = rng.random_range(-PI / 2.0..PI / 2.0);
    let los = rng.random::<f64>() < cfg.los_probability;
    let exp = (cfg.delay_spread > 0.0).then(|| Exp::new(1.0 / cfg.delay_spread).unwrap());
    let mut paths: Vec<Path> = (0..cfg.num_paths)
        .map(|_| {
            let offset = if cfg.angle_spread > 0.0 {
                rng.random_range(-0.5..0.5) * cfg.angle_spread
            } else {
                0.0
            };
            Path {
                gain: complex_gaussian(rng),
                delay: exp.as_ref().map_or(0.0, |e| e.sample(rng)),
                angle: centre + offset,
            }
        })
        .collect();

    if los {
        let min_delay = paths.iter().map(|p| p.delay).fold(f64::INFINITY, f64::min);
        let rest = &paths[1..];
        let rms = if rest.is_empty() {
            1.0
        } else {
            (rest.iter().map(|p| p.gain.norm_sqr()).sum::<f64>() / rest.len() as f64).sqrt()
        };
        let phase = rng.random_range(0.0..2.0 * PI);
        paths[0] = Path {
            gain: Complex64::from_polar(cfg.los_dominance * rms, phase),
            delay: min_delay,
            angle: centre,
        };
    }

    let total: f64 = paths.iter().map(|p| p.gain.norm_sqr()).sum();
    if total > 0.0 {
        let s = 1.0 / total.sqrt();
        paths.iter_mut().for_each(|p| p.gain *= s);
    }
    (paths, los)
}

/// One labeled channel. The LoS label is set; the beam label is not.
pub fn generate_channel<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    antennas: usize,
    subcarriers: usize,
    rng: &mut R,
) -> ChannelMatrix {
    let (paths, los) = draw_paths(cfg, rng);
    let mut ch = synthesize(&paths, antennas, subcarriers, cfg.carrier_spacing);
    ch.los = Some(los);
    ch
}

/// `count` channels, channel `i` drawn from its own stream derived from
/// `cfg.seed`, so the result does not depend on evaluation order.
pub fn generate_dataset(cfg: &ScenarioConfig, antennas: usize, subcarriers: usize, count: usize) -> Vec<ChannelMatrix> {
    crate::exec::map_indexed(count, |i| {
        let mut rng = seed::stream_rng(cfg.seed, Stream::Data, i as u64, 0);
        generate_channel(cfg, antennas, subcarriers, &mut rng)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_boresight_path_is_flat() {
        let p = Path {
            gain: Complex64::new(1.0, 0.0),
            delay: 0.0,
            angle: 0.0,
        };
        let ch = synthesize(&[p], 4, 6, 30e3);
        assert!(ch.real().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(ch.imag().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn single_path_has_flat_magnitude() {
        let p = Path {
            gain: Complex64::new(0.3, -0.4),
            delay: 120e-9,
            angle: PI / 6.0,
        };
        let ch = synthesize(&[p], 8, 8, 120e3);
        for (r, i) in ch.real().iter().zip(ch.imag()) {
            assert!(((r * r + i * i).sqrt() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn los_path_dominates_and_leads() {
        let cfg = ScenarioConfig {
            los_probability: 1.0,
            ..Default::default()
        };
        let mut rng = seed::rng(11);
        for _ in 0..100 {
            let (paths, los) = draw_paths(&cfg, &mut rng);
            assert!(los);
            let rest = &paths[1..];
            let rms = (rest.iter().map(|p| p.gain.norm_sqr()).sum::<f64>() / rest.len() as f64).sqrt();
            assert!(paths[0].gain.norm() >= 3.0 * rms - 1e-12);
            assert!(rest.iter().all(|p| p.delay >= paths[0].delay));
            let total: f64 = paths.iter().map(|p| p.gain.norm_sqr()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_is_order_independent() {
        let cfg = ScenarioConfig {
            seed: 5,
            ..Default::default()
        };
        let a = generate_dataset(&cfg, 4, 4, 10);
        let b = crate::exec::with_jobs(1, || generate_dataset(&cfg, 4, 4, 10));
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let bad = ScenarioConfig {
            num_paths: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ScenarioConfig {
            los_probability: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(ScenarioConfig::default().validate().is_ok());
    }
}

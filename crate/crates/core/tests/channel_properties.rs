use lwm_core::channel::{
    add_noise, apply_scale, beam_powers, best_beam, decode_dataset, draw_paths, encode_dataset, generate_dataset,
    normalization_scale, ChannelMatrix, DftCodebook, ScenarioConfig,
};
use lwm_core::seed;
use proptest::prelude::*;

fn scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        ..Default::default()
    }
}

proptest! {
    #[test]
    fn best_beam_ignores_global_complex_scaling(
        s in 0u64..500,
        mag in 1e-3f64..1e3,
        phase in -3.2f64..3.2,
        k in prop::sample::select(vec![4usize, 16, 64]),
    ) {
        let ch = &generate_dataset(&scenario(s), 16, 4, 1)[0];
        let cb = DftCodebook::new(k, 16).unwrap();
        let scaled = ch.rotated(mag * phase.cos(), mag * phase.sin());
        let powers = beam_powers(ch, &cb).unwrap();
        let mut sorted = powers.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        // Near-ties can legitimately flip under rounding.
        prop_assume!(sorted[0] - sorted[1] > 1e-9 * sorted[0]);
        prop_assert_eq!(best_beam(&scaled, &cb).unwrap(), best_beam(ch, &cb).unwrap());
    }

    #[test]
    fn dataset_bytes_round_trip(s in 0u64..1000, n in 0usize..6, a in 1usize..6, sc in 1usize..6) {
        let chs = generate_dataset(&scenario(s), a, sc, n);
        let bytes = encode_dataset(&chs).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
        for (x, y) in chs.iter().zip(&back) {
            for (u, v) in x.real().iter().chain(x.imag()).zip(y.real().iter().chain(y.imag())) {
                prop_assert_eq!(*u as f32 as f64, *v);
            }
            prop_assert_eq!(x.los, y.los);
        }
    }
}

#[test]
fn high_snr_noise_rarely_moves_the_best_beam() {
    let chs = generate_dataset(&scenario(30), 32, 32, 1000);
    let cb = DftCodebook::new(64, 32).unwrap();
    let mut rng = seed::rng(30);
    let changed = chs
        .iter()
        .filter(|c| {
            let noisy = add_noise(c, 30.0, &mut rng).unwrap();
            best_beam(&noisy, &cb).unwrap() != best_beam(c, &cb).unwrap()
        })
        .count();
    assert!(changed < 50, "{changed} of 1000 labels moved");
}

#[test]
fn noise_power_follows_snr() {
    let ch = ChannelMatrix::new(100, 5000, vec![1.0; 500_000], vec![0.0; 500_000]).unwrap();
    let mut rng = seed::rng(31);
    for snr in [0.0, 5.0] {
        let noisy = add_noise(&ch, snr, &mut rng).unwrap();
        let p: f64 = noisy
            .real()
            .iter()
            .zip(noisy.imag())
            .map(|(r, i)| (r - 1.0).powi(2) + i * i)
            .sum::<f64>()
            / 500_000.0;
        let expected = 10f64.powf(-snr / 10.0);
        assert!((p / expected - 1.0).abs() < 0.01, "snr {snr}: {p} vs {expected}");
    }
}

/// Power of the strongest path over the total.
fn dominance(paths: &[lwm_core::channel::Path]) -> f64 {
    let p: Vec<f64> = paths.iter().map(|p| p.gain.norm_sqr()).collect();
    p.iter().cloned().fold(0.0, f64::max) / p.iter().sum::<f64>()
}

#[test]
fn los_channels_are_dominated_by_one_path() {
    let cfg = scenario(32);
    let mut rng = seed::rng(32);
    let (mut los, mut nlos) = (vec![], vec![]);
    for _ in 0..1000 {
        let (paths, is_los) = draw_paths(&cfg, &mut rng);
        if is_los {
            los.push(dominance(&paths))
        } else {
            nlos.push(dominance(&paths))
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(los.len() > 300 && nlos.len() > 300);
    assert!(mean(&los) > mean(&nlos) + 0.2, "{} vs {}", mean(&los), mean(&nlos));
}

#[test]
fn normalized_power_is_unit_over_10k_channels() {
    let chs = generate_dataset(&scenario(33), 32, 32, 10_000);
    let scale = normalization_scale(&chs).unwrap();
    let normed = apply_scale(&chs, scale);
    let p = normed.iter().map(ChannelMatrix::mean_power).sum::<f64>() / normed.len() as f64;
    assert!((p - 1.0).abs() < 1e-6, "{p}");
    // The generator itself is unit-power in expectation.
    let raw = chs.iter().map(ChannelMatrix::mean_power).sum::<f64>() / chs.len() as f64;
    assert!((raw - 1.0).abs() < 0.01, "{raw}");
}

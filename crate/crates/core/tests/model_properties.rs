use lwm_core::channel::{generate_dataset, ChannelMatrix, ScenarioConfig};
use lwm_core::model::{
    check_model_gradients, forward_embed, pretrain_batch_grads, LwmParameters, MaskedSample, ModelConfig,
};
use lwm_core::patch::{patchify, PatchSequence};
use lwm_core::seed;
use lwm_core::tensor::GradCheckConfig;
use proptest::prelude::*;

fn config() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, 1usize..4, 1usize..3, 1usize..3).prop_map(|(half, hd, heads, layers)| ModelConfig {
        num_patches: 2 * half,
        patch_len: 3,
        d_model: heads * hd + 1,
        heads,
        layers,
        d_ff: 2 * (heads * hd + 1),
        dropout: 0.1,
    })
}

fn channel_for(cfg: &ModelConfig, s: u64) -> ChannelMatrix {
    // 2·A·S = P·L with S = L = 3.
    let a = cfg.num_patches / 2;
    generate_dataset(
        &ScenarioConfig {
            seed: s,
            ..Default::default()
        },
        a,
        3,
        1,
    )
    .remove(0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn embeddings_have_one_row_per_token(cfg in config(), s in 0u64..100) {
        let params = LwmParameters::init(&cfg, &mut seed::rng(s)).unwrap();
        let ch = channel_for(&cfg, s);
        let out = forward_embed(&ch, &params).unwrap();
        prop_assert_eq!((out.rows(), out.d_model()), (cfg.num_patches + 1, cfg.d_model));
        prop_assert_eq!(out.full().len(), (cfg.num_patches + 1) * cfg.d_model);
        prop_assert_eq!(&out, &forward_embed(&ch, &params).unwrap());
    }
}

#[test]
fn swapping_patches_changes_the_output() {
    let cfg = ModelConfig::micro();
    let params = LwmParameters::init(&cfg, &mut seed::rng(1)).unwrap();
    for s in 0..10 {
        let ch = generate_dataset(
            &ScenarioConfig {
                seed: s,
                ..Default::default()
            },
            4,
            4,
            1,
        )
        .remove(0);
        let base = forward_embed(&ch, &params).unwrap();
        // Swap antennas 0 and 1, i.e. patches 0 and 1 in each half.
        let mut sw = ch.clone();
        for k in 0..4 {
            sw.real_mut().swap(k, 4 + k);
            sw.imag_mut().swap(k, 4 + k);
        }
        assert_ne!(patchify(&sw, 8).unwrap(), patchify(&ch, 8).unwrap());
        assert_ne!(forward_embed(&sw, &params).unwrap().cls(), base.cls());
    }
}

#[test]
fn loss_is_zero_only_for_perfect_reconstruction() {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::micro()
    };
    let mut params = LwmParameters::init(&cfg, &mut seed::rng(2)).unwrap();
    let seq = PatchSequence::new(8, 4, (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let masked = |targets: Vec<(usize, Vec<f64>)>| MaskedSample {
        input: seq.clone(),
        targets: targets.into_iter().collect(),
    };
    let loss = |params: &LwmParameters, sample: &MaskedSample| {
        pretrain_batch_grads(params, std::slice::from_ref(sample), None, false)
            .unwrap()
            .loss
    };
    let sample = masked(vec![(1, seq.patch(1).to_vec()), (5, seq.patch(5).to_vec())]);
    assert!(loss(&params, &sample) > 0.0);
    // A zero decoder reconstructs zeros exactly.
    let dec = params.layout().dec;
    params.tensors_mut()[dec].data_mut().fill(0.0);
    assert_eq!(loss(&params, &masked(vec![(1, vec![0.0; 4]), (5, vec![0.0; 4])])), 0.0);
    assert!(loss(&params, &sample) > 0.0);
}

#[test]
fn micro_model_gradients_over_several_seeds() {
    for s in [3, 17, 42] {
        let r = check_model_gradients(&ModelConfig::micro(), s, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {s}: {r:?}");
    }
}

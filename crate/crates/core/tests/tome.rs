mod common;

use common::tome_plan_oracle;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgflash::backbone::{encoder_mac_estimate, EncoderConfig, FrozenEncoder};
use sgflash::counters;
use sgflash::numerics::{randn, Tensor};
use sgflash::synth::{synth_scene, SceneConfig};
use sgflash::tome::{build_plan, merge, merge_weighted, merged_len, unmerge, wrapped_attention};

const RATIOS: [f64; 5] = [0.0, 0.3, 0.4, 0.5, 0.6];

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// A stand-in attention that mixes rows so unmerging is observable.
fn mix(t: &Tensor) -> sgflash::Result<Tensor> {
    let (l, d) = (t.shape()[0], t.shape()[1]);
    let x = t.data();
    let mean: Vec<f64> = (0..d).map(|c| (0..l).map(|r| x[r * d + c]).sum::<f64>() / l as f64).collect();
    let out = (0..l * d).map(|i| (x[i] + mean[i % d]).tanh()).collect();
    Tensor::new(vec![l, d], out)
}

#[test]
fn length_is_preserved_for_every_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&mut rng, &[65, 8], 1.0);
    for r in RATIOS {
        let y = wrapped_attention(&x, r, &[0], mix).unwrap();
        assert_eq!(y.shape(), x.shape(), "ratio {r}");
        let plan = build_plan(&x, r, &[0]).unwrap();
        assert_eq!(plan.merged_len(), merged_len(65, 1, r));
    }
    let enc = FrozenEncoder::new(EncoderConfig::desk()).unwrap();
    let scene = synth_scene(0, &SceneConfig::new(4, 4, 8)).unwrap();
    for r in RATIOS {
        let f = enc.extract_features(&scene.image, r).unwrap();
        assert_eq!(f.shape(), EncoderConfig::desk().feature_shape());
    }
}

#[test]
fn ratio_zero_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn(&mut rng, &[17, 6], 1.0);
    let plan = build_plan(&x, 0.0, &[0]).unwrap();
    assert!(plan.is_identity());
    assert_eq!(bits(&unmerge(&merge(&x, &plan).unwrap(), &plan).unwrap()), bits(&x));
    assert_eq!(bits(&wrapped_attention(&x, 0.0, &[0], mix).unwrap()), bits(&mix(&x).unwrap()));
}

#[test]
fn duplicate_rows_round_trip_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Free order 1..=16: A = odd indices, B = even; each A copies its B.
    let mut rows = vec![vec![9.0, 9.0, 9.0]];
    for _ in 0..8 {
        let r: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        rows.push(r.clone());
        rows.push(r);
    }
    let x = Tensor::new(vec![17, 3], rows.concat()).unwrap();
    let plan = build_plan(&x, 0.5, &[0]).unwrap();
    assert_eq!(plan.merged_count(), 4);
    for (s, d) in plan.merged_src.iter().zip(&plan.merged_dst) {
        assert_eq!(rows[*s], rows[*d]);
    }
    assert_eq!(bits(&unmerge(&merge(&x, &plan).unwrap(), &plan).unwrap()), bits(&x));
}

#[test]
fn weighted_merge_sums_sizes() {
    let x = Tensor::new(vec![4, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
    let plan = build_plan(&Tensor::new(vec![4, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap(), 0.5, &[]).unwrap();
    let (m, sizes) = merge_weighted(&x, &[1.0, 3.0, 1.0, 1.0], &plan).unwrap();
    // Token 0 (A) joins token 1 (B): (1·1 + 3·3) / 4.
    assert_eq!(plan.groups[0], vec![1, 0]);
    assert!((m.data()[0] - 2.5).abs() <= 1e-15);
    assert_eq!(sizes, vec![4.0, 1.0, 1.0]);
}

#[test]
fn merged_attention_flops_shrink() {
    for cfg in [EncoderConfig::desk(), EncoderConfig::full()] {
        let macs: Vec<u64> = RATIOS.iter().map(|&r| encoder_mac_estimate(&cfg, r)).collect();
        assert!(macs.windows(2).all(|w| w[1] < w[0]), "{macs:?}");
        let l = (cfg.grid() * cfg.grid() + 1) as f64;
        let lm = merged_len(cfg.grid() * cfg.grid() + 1, 1, 0.5) as f64;
        let d = cfg.dim as u64;
        let scores = |n: f64| 2.0 * n * n * d as f64;
        assert!((scores(lm) / scores(l) - (lm / l).powi(2)).abs() <= 1e-12);
    }
}

#[test]
fn measured_encoder_macs_track_estimate() {
    let cfg = EncoderConfig::desk();
    let enc = FrozenEncoder::new(cfg.clone()).unwrap();
    let scene = synth_scene(1, &SceneConfig::new(4, 4, 8)).unwrap();
    for r in RATIOS {
        let before = counters::snapshot();
        enc.extract_features(&scene.image, r).unwrap();
        let got = (counters::snapshot() - before).macs as f64;
        let est = encoder_mac_estimate(&cfg, r) as f64;
        assert!((got / est - 1.0).abs() <= 0.05, "ratio {r}: {got} vs {est}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn plan_matches_brute_force(
        seed in any::<u64>(),
        l in 1usize..=32,
        ri in 0usize..5,
        n_protected in 0usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[l, 4], 1.0);
        let protected: Vec<usize> = (0..n_protected.min(l)).map(|_| rng.random_range(0..l)).collect();
        let free = (0..l).filter(|i| !protected.contains(i)).count();
        let r = RATIOS[ri];
        if free == 0 && r > 0.0 {
            prop_assert!(build_plan(&x, r, &protected).is_err());
            return Ok(());
        }
        let plan = build_plan(&x, r, &protected).unwrap();
        let (src, dst) = tome_plan_oracle(&rows_of(&x), r, &protected);
        prop_assert_eq!(&plan.merged_src, &src);
        prop_assert_eq!(&plan.merged_dst, &dst);
        prop_assert_eq!(plan.merged_len(), l - src.len());
        for &p in &protected {
            prop_assert_eq!(&plan.groups[plan.row_of[p]], &vec![p]);
        }
        // Every original index lands in exactly one group.
        let mut seen: Vec<usize> = plan.groups.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..l).collect::<Vec<_>>());
        let y = wrapped_attention(&x, r, &protected, mix).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
    }
}

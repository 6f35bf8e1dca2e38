mod common;

use common::{max_abs_diff, partition_masks, pool_oracle, random_rect};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgflash::counters;
use sgflash::mask_embed::{
    embed_pair, ratios_from_logits, ratios_from_logits_upsampled, ratios_from_logits_with, ratios_per_pair,
    ratios_pooled, BinaryMask, LogitPooling, MaskEmbedTokens, OverlapRatios,
};
use sgflash::numerics::{randn, Tape, Tensor};
use sgflash::Error;

#[test]
fn pooled_matches_window_popcount() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let masks = partition_masks(&mut rng, 64, 64, 3);
        let r = ratios_pooled(&masks, (8, 8)).unwrap();
        for (m, r) in masks.iter().zip(&r) {
            assert_eq!(r.values, pool_oracle(m, (8, 8)));
        }
    }
}

#[test]
fn truncating_grid_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let masks = partition_masks(&mut rng, 40, 40, 2);
    let r = ratios_pooled(&masks, (13, 13)).unwrap();
    assert_eq!(r[0].len(), 169);
    assert_eq!(r[0].values, pool_oracle(&masks[0], (13, 13)));
}

#[test]
fn all_pairs_of_five_masks_are_bit_exact_and_counted() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let masks = partition_masks(&mut rng, 32, 32, 5);
    let pairs: Vec<(usize, usize)> = (0..5).flat_map(|s| (s + 1..5).map(move |o| (s, o))).collect();
    let before = counters::snapshot();
    let pooled = ratios_pooled(&masks, (8, 8)).unwrap();
    let mid = counters::snapshot();
    let per_pair = ratios_per_pair(&masks, &pairs, (8, 8)).unwrap();
    let after = counters::snapshot();
    assert_eq!((mid - before).pool_calls, 5);
    assert_eq!((after - mid).pool_calls, 2 * pairs.len() as u64);
    for (&(s, o), (rs, ro)) in pairs.iter().zip(&per_pair) {
        assert_eq!(&pooled[s], rs);
        assert_eq!(&pooled[o], ro);
    }
}

#[test]
fn per_pair_rejects_bad_index() {
    let masks = vec![BinaryMask::from_fn(8, 8, |_, _| true)];
    assert!(matches!(
        ratios_per_pair(&masks, &[(0, 1)], (2, 2)),
        Err(Error::OutOfRange { index: 1, len: 1 })
    ));
}

/// Sum of a few random Gaussian bumps on an `h×w` grid.
fn smooth_field<R: Rng>(rng: &mut R, h: usize, w: usize) -> Vec<f64> {
    let bumps: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(1.5..5.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = bumps
                .iter()
                .map(|&(cy, cx, s, a)| a * (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            out.push(v - 0.1);
        }
    }
    out
}

#[test]
fn lowres_logits_track_the_upsampled_reference() {
    // Logits at 1/4 resolution of a 64×64 image, pooled to 8×8.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, lh, lw) = (6, 16, 16);
    let mut data = Vec::new();
    for _ in 0..n {
        data.extend(smooth_field(&mut rng, lh, lw));
    }
    let logits = Tensor::new(vec![n, lh, lw], data).unwrap();
    let before = counters::snapshot();
    let low = ratios_from_logits(&logits, (8, 8), 0.0).unwrap();
    assert_eq!((counters::snapshot() - before).upsample_calls, 0);
    let up = ratios_from_logits_upsampled(&logits, (64, 64), (8, 8), 0.0).unwrap();
    assert!((counters::snapshot() - before).upsample_calls > 0);
    let (mut sum, mut count) = (0.0, 0);
    for (a, b) in low.iter().zip(&up) {
        assert_eq!((a.grid_h, a.grid_w), (8, 8));
        for (x, y) in a.values.iter().zip(&b.values) {
            sum += (x - y).abs();
            count += 1;
        }
    }
    let mad = sum / count as f64;
    println!("low-res vs upsampled mean |Δratio| = {mad:.4}");
    assert!(mad <= 0.05, "mean abs diff {mad}");
}

#[test]
fn logit_paths_edge_cases() {
    let logits = Tensor::filled(&[2, 16, 16], f64::INFINITY);
    for r in ratios_from_logits(&logits, (8, 8), 0.0).unwrap() {
        assert!(r.values.iter().all(|&v| v == 1.0));
    }
    let soft = ratios_from_logits_with(&Tensor::zeros(&[1, 4, 4]), (2, 2), 0.0, LogitPooling::Soft).unwrap();
    assert!(soft[0].values.iter().all(|&v| v == 0.5));
    assert!(ratios_from_logits(&Tensor::zeros(&[1, 4, 4]), (8, 8), 0.0).is_err());
}

fn bind<'t>(tape: &'t Tape, ts: &Tensor, to: &Tensor, tb: &Tensor) -> MaskEmbedTokens<'t> {
    MaskEmbedTokens {
        subject: tape.leaf(ts),
        object: tape.leaf(to),
        background: tape.leaf(tb),
    }
}

#[test]
fn embedding_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (p, d) = (4, 3);
    let patches = randn(&mut rng, &[p, d], 1.0);
    let (ts, to, tb) = (randn(&mut rng, &[d], 1.0), randn(&mut rng, &[d], 1.0), randn(&mut rng, &[d], 1.0));
    let tape = Tape::new();
    let zero = OverlapRatios::zeros(2, 2);
    let mut one = OverlapRatios::zeros(2, 2);
    one.values[2] = 1.0;
    let pv = tape.leaf(&patches);
    let out = embed_pair(&tape, pv, &zero, &zero, bind(&tape, &ts, &to, &tb)).unwrap().data();
    for r in 0..p {
        for c in 0..d {
            assert!((out[r * d + c] - patches.data()[r * d + c] - tb.data()[c]).abs() <= 1e-12);
        }
    }
    let out = embed_pair(&tape, pv, &one, &zero, bind(&tape, &ts, &to, &tb)).unwrap().data();
    for c in 0..d {
        assert_eq!(out[2 * d + c], patches.data()[2 * d + c] + ts.data()[c]);
    }
}

#[test]
fn embedding_is_asymmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let masks = partition_masks(&mut rng, 16, 16, 2);
        let r = ratios_pooled(&masks, (4, 4)).unwrap();
        if r[0] == r[1] {
            continue;
        }
        let d = 5;
        let patches = randn(&mut rng, &[16, d], 1.0);
        let (ts, to, tb) = (randn(&mut rng, &[d], 1.0), randn(&mut rng, &[d], 1.0), randn(&mut rng, &[d], 1.0));
        let tape = Tape::new();
        let pv = tape.leaf(&patches);
        let a = embed_pair(&tape, pv, &r[0], &r[1], bind(&tape, &ts, &to, &tb)).unwrap().data();
        let b = embed_pair(&tape, pv, &r[1], &r[0], bind(&tape, &ts, &to, &tb)).unwrap().data();
        assert_ne!(a, b);
    }
}

#[test]
fn embedding_rejects_mismatched_dims() {
    let tape = Tape::new();
    let pv = tape.leaf(&Tensor::zeros(&[4, 3]));
    let t = Tensor::zeros(&[3]);
    let r = OverlapRatios::zeros(3, 3);
    assert!(embed_pair(&tape, pv, &r, &r, bind(&tape, &t, &t, &t)).is_err());
    let r = OverlapRatios::zeros(2, 2);
    let short = Tensor::zeros(&[2]);
    assert!(embed_pair(&tape, pv, &r, &r, bind(&tape, &short, &t, &t)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooled_equals_per_pair(seed in any::<u64>(), n in 2usize..7, g in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = partition_masks(&mut rng, 2 * g, 2 * g + 1, n);
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|s| (0..n).filter(move |&o| o != s).map(move |o| (s, o))).collect();
        let pooled = ratios_pooled(&masks, (g, g)).unwrap();
        let per_pair = ratios_per_pair(&masks, &pairs, (g, g)).unwrap();
        for (&(s, o), (rs, ro)) in pairs.iter().zip(&per_pair) {
            prop_assert_eq!(&pooled[s], rs);
            prop_assert_eq!(&pooled[o], ro);
        }
    }

    #[test]
    fn disjoint_ratios_partition_unity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = partition_masks(&mut rng, 24, 24, 2);
        let r = ratios_pooled(&masks, (6, 6)).unwrap();
        for (s, o) in r[0].values.iter().zip(&r[1].values) {
            prop_assert!((0.0..=1.0).contains(s) && (0.0..=1.0).contains(o));
            prop_assert!(s + o <= 1.0 + 1e-15);
            prop_assert!(1.0 - s - o >= -1e-15);
        }
    }

    #[test]
    fn complement_ratio_is_one_minus_ratio(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_rect(&mut rng, 24, 24);
        let r = ratios_pooled(&[m.clone(), m.complement()], (6, 6)).unwrap();
        let flipped: Vec<f64> = r[0].values.iter().map(|v| 1.0 - v).collect();
        prop_assert!(max_abs_diff(&flipped, &r[1].values) <= 1e-12);
    }
}

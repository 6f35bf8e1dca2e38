mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgflash::backbone::{
    mask_logits, simulate_inferred_masks, window_flatten, EncoderConfig, FeatureStack, FrozenEncoder, PanopticOutput,
};
use sgflash::harness::train::{train, TrainConfig};
use sgflash::model::{ModelConfig, RelationModel};
use sgflash::sgeval::mask_iou;
use sgflash::synth::{synth_scene, SceneConfig};

fn stack<R: Rng>(rng: &mut R, c: usize, g: usize) -> FeatureStack {
    FeatureStack {
        channels: c,
        grid_h: g,
        grid_w: g,
        data: (0..c * g * g).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

#[test]
fn feature_shapes() {
    assert_eq!(EncoderConfig::desk().feature_shape(), (192, 8, 8));
    assert_eq!(EncoderConfig::full().feature_shape(), (768, 40, 40));
    let enc = FrozenEncoder::new(EncoderConfig::desk()).unwrap();
    let scene = synth_scene(0, &SceneConfig::new(4, 4, 8)).unwrap();
    let f = enc.extract_features(&scene.image, 0.0).unwrap();
    assert_eq!(f.shape(), (192, 8, 8));
    assert!(f.data.iter().all(|v| v.is_finite()));
}

#[test]
fn encoder_is_deterministic() {
    let a = FrozenEncoder::new(EncoderConfig::desk()).unwrap();
    let b = FrozenEncoder::new(EncoderConfig::desk()).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    let scene = synth_scene(2, &SceneConfig::new(4, 4, 8)).unwrap();
    assert_eq!(a.extract_features(&scene.image, 0.0).unwrap(), b.extract_features(&scene.image, 0.0).unwrap());
}

#[test]
fn repatch_identity_at_native_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = stack(&mut rng, 5, 8);
    let flat = window_flatten(&s, (8, 8)).unwrap();
    assert_eq!(flat.shape(), &[64, 5]);
    for p in 0..64 {
        for c in 0..5 {
            assert_eq!(flat.data()[p * 5 + c], s.at(c, p / 8, p % 8));
        }
    }
}

#[test]
fn repatch_40_to_13_uses_3x3_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = stack(&mut rng, 2, 40);
    let flat = window_flatten(&s, (13, 13)).unwrap();
    assert_eq!(flat.shape(), &[169, 18]);
    // Row (gy, gx), channel c, window offset (dy, dx).
    for (gy, gx) in [(0, 0), (5, 7), (12, 12)] {
        let row = &flat.data()[(gy * 13 + gx) * 18..(gy * 13 + gx + 1) * 18];
        for c in 0..2 {
            for dy in 0..3 {
                for dx in 0..3 {
                    assert_eq!(row[c * 9 + dy * 3 + dx], s.at(c, gy * 3 + dy, gx * 3 + dx));
                }
            }
        }
    }
    assert!(window_flatten(&s, (41, 41)).is_err());
}

#[test]
fn zero_jitter_returns_ground_truth() {
    let scene = synth_scene(3, &SceneConfig::new(5, 4, 8)).unwrap();
    assert_eq!(simulate_inferred_masks(&scene.panoptic, 0.0, 9).unwrap(), scene.panoptic);
    assert!(simulate_inferred_masks(&scene.panoptic, 1.5, 9).is_err());
}

#[test]
fn jitter_hits_target_iou() {
    for jitter in [0.1, 0.2, 0.3] {
        let mut ious = Vec::new();
        for seed in 0..50 {
            let scene = synth_scene(seed, &SceneConfig::new(5, 4, 8)).unwrap();
            let sim = simulate_inferred_masks(&scene.panoptic, jitter, seed).unwrap();
            assert!(sim.is_disjoint());
            assert_eq!(sim, simulate_inferred_masks(&scene.panoptic, jitter, seed).unwrap());
            for (a, b) in sim.masks.iter().zip(&scene.panoptic.masks) {
                assert!(!a.is_empty());
                assert_eq!((a.instance_id, a.class_label), (b.instance_id, b.class_label));
                ious.push(mask_iou(a, b).unwrap());
            }
        }
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!((mean - (1.0 - jitter)).abs() <= 0.1, "jitter {jitter}: mean IoU {mean}");
    }
}

#[test]
fn logits_mark_covered_cells() {
    let scene = synth_scene(4, &SceneConfig::new(3, 3, 8)).unwrap();
    let l = mask_logits(&scene.panoptic.masks, 4).unwrap();
    assert_eq!(l.shape(), &[3, 16, 16]);
    let p = PanopticOutput::from_masks(scene.panoptic.masks.clone()).unwrap();
    assert_eq!(p.logits.as_ref().unwrap(), &l);
    assert!(l.data().iter().all(|v| (-5.0..=5.0).contains(v)));
}

#[test]
fn training_leaves_encoder_untouched() {
    let scenes: Vec<_> = (0..2).map(|s| synth_scene(s, &SceneConfig::new(3, 3, 8)).unwrap()).collect();
    let mut model = RelationModel::new(ModelConfig::desk(8)).unwrap();
    let before = model.encoder.checksum();
    let params_before = model.params.clone();
    let cfg = TrainConfig {
        epochs: 1,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    train(&mut model, &scenes, &cfg, |_| {}).unwrap();
    assert_eq!(model.encoder.checksum(), before);
    let moved = params_before
        .iter()
        .zip(model.params.iter())
        .any(|((_, a), (_, b))| a.data() != b.data());
    assert!(moved);
}

#![allow(dead_code)]

use rand::Rng;
use sgflash::mask_embed::BinaryMask;

/// `n` pairwise-disjoint masks: every pixel goes to one random instance or
/// to the background.
pub fn partition_masks<R: Rng>(rng: &mut R, h: usize, w: usize, n: usize) -> Vec<BinaryMask> {
    let owner: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..=n)).collect();
    (0..n)
        .map(|i| BinaryMask::new(h, w, owner.iter().map(|&o| o == i).collect(), i, i % 3).unwrap())
        .collect()
}

/// Axis-aligned rectangle `[y0, y1) × [x0, x1)`.
pub fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x))
}

/// Random non-empty rectangle.
pub fn random_rect<R: Rng>(rng: &mut R, h: usize, w: usize) -> BinaryMask {
    let y0 = rng.random_range(0..h);
    let x0 = rng.random_range(0..w);
    let y1 = rng.random_range(y0 + 1..=h);
    let x1 = rng.random_range(x0 + 1..=w);
    rect(h, w, y0, y1, x0, x1)
}

/// Window popcount over window area, trailing rows/cols dropped.
pub fn pool_oracle(m: &BinaryMask, grid: (usize, usize)) -> Vec<f64> {
    let (kh, kw) = (m.height / grid.0, m.width / grid.1);
    let mut out = Vec::new();
    for gy in 0..grid.0 {
        for gx in 0..grid.1 {
            let mut count = 0;
            for y in gy * kh..(gy + 1) * kh {
                for x in gx * kw..(gx + 1) * kw {
                    count += m.get(y, x) as usize;
                }
            }
            out.push(count as f64 / (kh * kw) as f64);
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub mod grad {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sgflash::bidir_head::{consistency_loss, gate_split, relation_logits, GateParams, RelHeadParams};
    use sgflash::layers::Bound;
    use sgflash::mask_embed::{embed_pair, MaskEmbedTokens, OverlapRatios};
    use sgflash::neck::{neck_forward, NeckConfig, NeckParams, TokenSequence};
    use sgflash::numerics::gradcheck::{check_inputs, check_params, DEFAULT_STEP};
    use sgflash::numerics::{bce_with_logits, randn, ParamSet, Tensor};

    pub const COMPONENTS: [&str; 5] = ["gate_mlp", "relhead_mlp", "neck_blocks", "embed_tokens", "consistency"];

    fn ratios<R: Rng>(rng: &mut R, p: usize) -> (OverlapRatios, OverlapRatios) {
        let mut s = OverlapRatios::zeros(1, p);
        let mut o = OverlapRatios::zeros(1, p);
        for i in 0..p {
            let a: f64 = rng.random();
            let b: f64 = rng.random::<f64>() * (1.0 - a);
            s.values[i] = a;
            o.values[i] = b;
        }
        (s, o)
    }

    /// Largest per-tensor relative gradient error of each component.
    pub fn component_errors(seed: u64) -> Vec<(&'static str, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 6;
        let c = 4;
        let x = randn(&mut rng, &[d], 1.0);
        let weights = randn(&mut rng, &[d], 1.0);
        let targets: Vec<f64> = (0..c).map(|_| rng.random_range(0..2) as f64).collect();
        let mut out = Vec::new();

        let mut ps = ParamSet::new();
        let gate = GateParams::init(&mut ps, d, &mut rng);
        let r = check_params(
            &ps,
            |tape, ps| {
                let b = Bound::new(tape, ps);
                let s = gate_split(&b, tape.leaf(&x), &gate)?;
                let w = tape.leaf(&weights);
                s.t_fwd.mul(w)?.add(s.t_bwd.square())?.sum().add(s.gate.square().sum())
            },
            DEFAULT_STEP,
        )
        .unwrap();
        out.push(("gate_mlp", r.max_rel_error()));

        let mut ps = ParamSet::new();
        let head = RelHeadParams::init(&mut ps, d, c, &mut rng);
        let r = check_params(
            &ps,
            |tape, ps| {
                let b = Bound::new(tape, ps);
                bce_with_logits(relation_logits(&b, tape.leaf(&x), &head)?, &targets)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        out.push(("relhead_mlp", r.max_rel_error()));

        let cfg = NeckConfig {
            depth: 2,
            heads: 2,
            dim: d,
            mlp_ratio: 2,
        };
        let mut ps = ParamSet::new();
        let neck = NeckParams::init(&mut ps, &cfg, &mut rng).unwrap();
        let patches = randn(&mut rng, &[3, d], 1.0);
        let r = check_params(
            &ps,
            |tape, ps| {
                let b = Bound::new(tape, ps);
                let seq = TokenSequence::new(b.get(neck.class_token), b.get(neck.location_token), tape.leaf(&patches))?;
                Ok(neck_forward(&b, &neck, &seq, &cfg)?.mul(tape.leaf(&weights))?.sum())
            },
            DEFAULT_STEP,
        )
        .unwrap();
        // Softmax is shift-invariant per row, so the key bias has an exactly
        // zero gradient; a relative error there compares rounding noise.
        let mut worst = 0.0f64;
        for (name, e) in r.names.iter().zip(&r.rel_errors) {
            if name.ends_with("attn.k.bias") {
                let id = ps.find(name).unwrap();
                let mut work = ps.clone();
                work.zero_grad();
                let tape = sgflash::numerics::Tape::new();
                let b = Bound::new(&tape, &work);
                let seq = TokenSequence::new(b.get(neck.class_token), b.get(neck.location_token), tape.leaf(&patches)).unwrap();
                let loss = neck_forward(&b, &neck, &seq, &cfg).unwrap().mul(tape.leaf(&weights)).unwrap().sum();
                tape.backward(loss).unwrap().accumulate_into(&mut work).unwrap();
                let g = work.get(id).grad().unwrap();
                assert!(g.iter().all(|v| v.abs() <= 1e-12), "{name}: {g:?}");
            } else {
                worst = worst.max(*e);
            }
        }
        out.push(("neck_blocks", worst));

        let p = 5;
        let (rs, ro) = ratios(&mut rng, p);
        let inputs = [
            randn(&mut rng, &[p, d], 1.0),
            randn(&mut rng, &[d], 1.0),
            randn(&mut rng, &[d], 1.0),
            randn(&mut rng, &[d], 1.0),
        ];
        let r = check_inputs(
            &inputs,
            |tape, v| {
                let tokens = MaskEmbedTokens {
                    subject: v[1],
                    object: v[2],
                    background: v[3],
                };
                Ok(embed_pair(tape, v[0], &rs, &ro, tokens)?.gelu().square().sum())
            },
            DEFAULT_STEP,
        )
        .unwrap();
        out.push(("embed_tokens", r.max_rel_error()));

        let inputs: Vec<Tensor> = (0..4).map(|_| randn(&mut rng, &[d], 1.0)).collect();
        let r = check_inputs(&inputs, |_, v| consistency_loss(v[0], v[1], v[2], v[3]), DEFAULT_STEP).unwrap();
        out.push(("consistency", r.max_rel_error()));
        out
    }
}

/// Brute-force bipartite matching: `(merged_src, merged_dst)` in merge
/// order, computed with plain loops.
pub fn tome_plan_oracle(rows: &[Vec<f64>], ratio: f64, protected: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let free: Vec<usize> = (0..rows.len()).filter(|i| !protected.contains(i)).collect();
    let a: Vec<usize> = free.iter().enumerate().filter(|(k, _)| k % 2 == 0).map(|(_, &i)| i).collect();
    let b: Vec<usize> = free.iter().enumerate().filter(|(k, _)| k % 2 == 1).map(|(_, &i)| i).collect();
    let count = (ratio * a.len() as f64).floor() as usize;
    if b.is_empty() || count == 0 {
        return (Vec::new(), Vec::new());
    }
    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            0.0
        } else {
            dot / (nx * ny)
        }
    };
    let mut best = Vec::new();
    for &i in &a {
        let mut bj = b[0];
        let mut bs = cos(&rows[i], &rows[b[0]]);
        for &j in &b[1..] {
            let s = cos(&rows[i], &rows[j]);
            if s > bs {
                bs = s;
                bj = j;
            }
        }
        best.push((i, bj, bs));
    }
    // Stable sort keeps lower A positions first on equal similarity.
    best.sort_by(|x, y| y.2.partial_cmp(&x.2).unwrap());
    best.truncate(count);
    (best.iter().map(|t| t.0).collect(), best.iter().map(|t| t.1).collect())
}

pub mod sg {
    use rand::seq::SliceRandom;
    use rand::Rng;
    use sgflash::mask_embed::BinaryMask;
    use sgflash::sgeval::{GTSceneGraph, MatchResult, PredSceneGraph, PredTriplet, Relation};
    use std::collections::BTreeMap;

    pub const NUM_PREDICATES: usize = 4;

    fn ahead(a: &PredTriplet, b: &PredTriplet) -> bool {
        (a.score, std::cmp::Reverse(a.predicate), std::cmp::Reverse(a.subject), std::cmp::Reverse(a.object))
            > (b.score, std::cmp::Reverse(b.predicate), std::cmp::Reverse(b.subject), std::cmp::Reverse(b.object))
    }

    /// GT relations hit within the top `k` of one image, by enumeration.
    fn hits(gt: &GTSceneGraph, pred: &PredSceneGraph, m: &MatchResult, k: usize, dedup: bool) -> Vec<bool> {
        let t = &pred.triplets;
        let best_of_pair = |i: usize| {
            !t.iter().any(|u| (u.subject, u.object) == (t[i].subject, t[i].object) && ahead(u, &t[i]))
        };
        let live: Vec<bool> = (0..t.len()).map(best_of_pair).collect();
        let gt_pair = |u: &PredTriplet| match (m.pred_to_gt[u.subject], m.pred_to_gt[u.object]) {
            (Some(s), Some(o)) => Some((s, o)),
            _ => None,
        };
        gt.relations
            .iter()
            .map(|r| {
                (0..t.len()).any(|i| {
                    if !live[i] || gt_pair(&t[i]) != Some((r.subject, r.object)) || t[i].predicate != r.predicate {
                        return false;
                    }
                    if dedup && (0..t.len()).any(|j| live[j] && gt_pair(&t[j]) == gt_pair(&t[i]) && ahead(&t[j], &t[i])) {
                        return false;
                    }
                    let rank = (0..t.len()).filter(|&j| live[j] && ahead(&t[j], &t[i])).count();
                    rank < k
                })
            })
            .collect()
    }

    /// `(R@k, mR@k)` in percent.
    pub fn recall_oracle(
        gt: &[GTSceneGraph],
        pred: &[PredSceneGraph],
        matches: &[MatchResult],
        k: usize,
        dedup: bool,
    ) -> (f64, f64) {
        let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for ((g, p), m) in gt.iter().zip(pred).zip(matches) {
            for (r, h) in g.relations.iter().zip(hits(g, p, m, k, dedup)) {
                let e = per_class.entry(r.predicate).or_default();
                e.0 += h as usize;
                e.1 += 1;
            }
        }
        let (h, n) = per_class.values().fold((0, 0), |a, &(h, n)| (a.0 + h, a.1 + n));
        let r = if n == 0 { 0.0 } else { 100.0 * h as f64 / n as f64 };
        let classes: Vec<f64> = per_class.values().map(|&(h, n)| 100.0 * h as f64 / n as f64).collect();
        let mr = if classes.is_empty() { 0.0 } else { classes.iter().sum::<f64>() / classes.len() as f64 };
        (r, mr)
    }

    /// A small random GT graph over non-empty disjoint masks.
    pub fn random_gt<R: Rng>(rng: &mut R, n: usize) -> GTSceneGraph {
        let masks = loop {
            let m = super::partition_masks(rng, 12, 12, n);
            if m.iter().all(|m| !m.is_empty()) {
                break m;
            }
        };
        let mut relations = Vec::new();
        for s in 0..n {
            for o in 0..n {
                if s != o && rng.random_bool(0.5) {
                    for p in 0..NUM_PREDICATES {
                        if rng.random_bool(0.3) {
                            relations.push(Relation { subject: s, object: o, predicate: p });
                        }
                    }
                }
            }
        }
        GTSceneGraph { instances: masks, relations }
    }

    /// Predictions over GT masks in shuffled order plus exact duplicates
    /// and one unmatched mask, with random scored triplets.
    pub fn random_pred<R: Rng>(rng: &mut R, gt: &GTSceneGraph, duplicates: usize) -> PredSceneGraph {
        let mut instances: Vec<BinaryMask> = gt.instances.clone();
        for _ in 0..duplicates {
            let i = rng.random_range(0..gt.instances.len());
            instances.push(gt.instances[i].clone());
        }
        if rng.random_bool(0.5) {
            let (h, w) = (gt.instances[0].height, gt.instances[0].width);
            instances.push(BinaryMask::from_fn(h, w, |y, x| y == 0 && x == 0).with_identity(99, 7));
        }
        instances.shuffle(rng);
        let n = instances.len();
        let count = rng.random_range(0..3 * n * n);
        let triplets = (0..count)
            .filter_map(|_| {
                let s = rng.random_range(0..n);
                let o = rng.random_range(0..n);
                (s != o).then(|| PredTriplet::new(s, o, rng.random_range(0..NUM_PREDICATES), rng.random::<f64>()))
            })
            .collect();
        PredSceneGraph { instances, triplets }
    }

    pub fn rel(subject: usize, object: usize, predicate: usize) -> Relation {
        Relation { subject, object, predicate }
    }

    pub fn t(s: usize, o: usize, p: usize, score: f64) -> PredTriplet {
        PredTriplet::new(s, o, p, score)
    }

    pub fn blank(n: usize) -> Vec<BinaryMask> {
        (0..n)
            .map(|i| BinaryMask::from_fn(4, 4, |y, x| y * 4 + x == i).with_identity(i, 0))
            .collect()
    }

    /// Three PredCls images with hand-computed recalls.
    pub fn fixture() -> (Vec<GTSceneGraph>, Vec<PredSceneGraph>) {
        let gt = vec![
            GTSceneGraph {
                instances: blank(3),
                relations: vec![rel(0, 1, 0), rel(1, 2, 1), rel(2, 0, 0)],
            },
            GTSceneGraph {
                instances: blank(2),
                relations: vec![rel(0, 1, 1), rel(1, 0, 2)],
            },
            GTSceneGraph {
                instances: blank(2),
                relations: vec![rel(0, 1, 1)],
            },
        ];
        let pred = vec![
            PredSceneGraph {
                instances: blank(3),
                triplets: vec![
                    t(0, 1, 0, 0.9),
                    t(0, 1, 1, 0.8),
                    t(1, 2, 2, 0.7),
                    t(1, 2, 1, 0.6),
                    t(2, 0, 0, 0.5),
                    t(0, 2, 1, 0.4),
                ],
            },
            PredSceneGraph {
                instances: blank(2),
                triplets: vec![t(1, 0, 2, 0.95), t(0, 1, 0, 0.9), t(0, 1, 1, 0.3)],
            },
            PredSceneGraph {
                instances: blank(2),
                triplets: vec![t(0, 1, 1, 0.2), t(1, 0, 0, 0.6)],
            },
        ];
        (gt, pred)
    }
}

//! Synthetic scenes with geometric predicates.
//!
//! Shapes are placed one at a time, each attached to an earlier shape by a
//! sampled predicate, so every scene's relation set is a spanning tree.
//! Ground truth is then recomputed from the masks with [`relation_between`]
//! over every ordered pair; a placement that creates any relation other
//! than the intended edge is rejected.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{PanopticOutput, SyntheticImage};
use crate::error::{Error, Result};
use crate::mask_embed::BinaryMask;
use crate::sgeval::{GTSceneGraph, Relation};

pub const PREDICATE_NAMES: [&str; 8] = [
    "left of",
    "right of",
    "above",
    "below",
    "far left of",
    "far right of",
    "far above",
    "far below",
];

/// Default predicate frequencies, most frequent first.
pub const DEFAULT_SKEW: [f64; 8] = [0.25, 0.2, 0.15, 0.12, 0.1, 0.08, 0.06, 0.04];

pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

const BACKGROUND: [u8; 3] = [24, 24, 24];
const NEAR_GAP: (usize, usize) = (1, 4);
const FAR_GAP: (usize, usize) = (9, 16);
/// Subject area must be at least this multiple of the object area.
pub const AREA_RATIO: f64 = 1.5;
const MIN_SIDE: usize = 4;
const MAX_SIDE: usize = 16;
const PLACEMENT_TRIES: usize = 400;
const SCENE_RESTARTS: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub n_instances: usize,
    pub n_classes: usize,
    pub n_predicates: usize,
    /// Relative predicate weights; `None` uses the first `n_predicates`
    /// entries of [`DEFAULT_SKEW`].
    pub skew: Option<Vec<f64>>,
}

impl SceneConfig {
    pub fn new(n_instances: usize, n_classes: usize, n_predicates: usize) -> Self {
        Self {
            size: 64,
            n_instances,
            n_classes,
            n_predicates,
            skew: None,
        }
    }

    /// Normalized predicate distribution.
    pub fn predicate_weights(&self) -> Vec<f64> {
        let raw = self
            .skew
            .clone()
            .unwrap_or_else(|| DEFAULT_SKEW[..self.n_predicates.min(8)].to_vec());
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| w / total).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_instances < 2 {
            return Err(Error::InvalidArgument("a scene needs at least 2 instances".into()));
        }
        if !(1..=PREDICATE_NAMES.len()).contains(&self.n_predicates) {
            return Err(Error::InvalidArgument(format!(
                "{} predicates requested, 1..=8 available",
                self.n_predicates
            )));
        }
        if !(1..=PALETTE.len()).contains(&self.n_classes) {
            return Err(Error::InvalidArgument(format!(
                "{} classes requested, 1..={} available",
                self.n_classes,
                PALETTE.len()
            )));
        }
        if let Some(s) = &self.skew {
            if s.len() != self.n_predicates || s.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || s.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidArgument("skew must be n_predicates non-negative weights".into()));
            }
        }
        if self.size < 32 {
            return Err(Error::InvalidArgument(format!("canvas {} too small", self.size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: SyntheticImage,
    pub panoptic: PanopticOutput,
    pub graph: GTSceneGraph,
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn of(mask: &BinaryMask) -> Option<Self> {
        let mut b: Option<Self> = None;
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(y, x) {
                    b = Some(match b {
                        None => Self { y0: y, x0: x, y1: y, x1: x },
                        Some(b) => Self {
                            y0: b.y0.min(y),
                            x0: b.x0.min(x),
                            y1: b.y1.max(y),
                            x1: b.x1.max(x),
                        },
                    });
                }
            }
        }
        b
    }
}

fn overlap(a0: usize, a1: usize, b0: usize, b1: usize) -> bool {
    a0 <= b1 && b0 <= a1
}

/// Empty pixel columns/rows strictly between `a` (first) and `b` (second).
fn gap(a_end: usize, b_start: usize) -> Option<usize> {
    (b_start > a_end).then(|| b_start - a_end - 1)
}

/// The predicate that holds for the ordered pair `(s, o)`, if any.
///
/// Requires `area(s) ≥ 1.5·area(o)`. "left of" means `s`'s box ends 1–4
/// empty columns before `o`'s starts and the boxes share a row; the far
/// variants use 9–16. The other directions are analogous.
pub fn relation_between(s: &BinaryMask, o: &BinaryMask, n_predicates: usize) -> Option<usize> {
    if (s.area() as f64) < AREA_RATIO * o.area() as f64 {
        return None;
    }
    let (a, b) = (BBox::of(s)?, BBox::of(o)?);
    let rows = overlap(a.y0, a.y1, b.y0, b.y1);
    let cols = overlap(a.x0, a.x1, b.x0, b.x1);
    let candidates = [
        (rows, gap(a.x1, b.x0)),
        (rows, gap(b.x1, a.x0)),
        (cols, gap(a.y1, b.y0)),
        (cols, gap(b.y1, a.y0)),
    ];
    for (dir, &(shared, g)) in candidates.iter().enumerate() {
        let Some(g) = g.filter(|_| shared) else {
            continue;
        };
        let p = if (NEAR_GAP.0..=NEAR_GAP.1).contains(&g) {
            dir
        } else if (FAR_GAP.0..=FAR_GAP.1).contains(&g) {
            dir + 4
        } else {
            continue;
        };
        return (p < n_predicates).then_some(p);
    }
    None
}

/// All relations implied by the masks, sorted.
pub fn geometric_relations(masks: &[BinaryMask], n_predicates: usize) -> Vec<Relation> {
    let mut out = Vec::new();
    for (i, s) in masks.iter().enumerate() {
        for (j, o) in masks.iter().enumerate() {
            if i != j {
                if let Some(p) = relation_between(s, o, n_predicates) {
                    out.push(Relation {
                        subject: i,
                        object: j,
                        predicate: p,
                    });
                }
            }
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    Diamond,
}

fn draw(shape: Shape, size: usize, top: usize, left: usize, h: usize, w: usize) -> BinaryMask {
    let cy = top as f64 + (h as f64 - 1.0) / 2.0;
    let cx = left as f64 + (w as f64 - 1.0) / 2.0;
    let ry = h as f64 / 2.0;
    let rx = w as f64 / 2.0;
    BinaryMask::from_fn(size, size, |y, x| {
        if y < top || y >= top + h || x < left || x >= left + w {
            return false;
        }
        let dy = (y as f64 - cy) / ry;
        let dx = (x as f64 - cx) / rx;
        match shape {
            Shape::Rect => true,
            Shape::Ellipse => dy * dy + dx * dx <= 1.0,
            Shape::Diamond => dy.abs() + dx.abs() <= 1.0,
        }
    })
}

fn random_shape<R: Rng>(rng: &mut R, size: usize, top: usize, left: usize, h: usize, w: usize) -> BinaryMask {
    let shape = match rng.random_range(0..3) {
        0 => Shape::Rect,
        1 => Shape::Ellipse,
        _ => Shape::Diamond,
    };
    draw(shape, size, top, left, h, w)
}

/// Candidate placement of a new `h×w` box related to `anchor` by
/// `predicate`, with the new box as subject when `new_is_subject`.
fn place_box<R: Rng>(
    rng: &mut R,
    size: usize,
    anchor: BBox,
    predicate: usize,
    new_is_subject: bool,
    h: usize,
    w: usize,
) -> Option<(usize, usize)> {
    let (lo, hi) = if predicate < 4 { NEAR_GAP } else { FAR_GAP };
    let g = rng.random_range(lo..=hi) as i64;
    // Direction of the subject relative to the object.
    let dir = predicate % 4;
    // Where the new box sits relative to the anchor.
    let new_dir = if new_is_subject { dir } else { [1, 0, 3, 2][dir] };
    let (h, w) = (h as i64, w as i64);
    let (ay0, ax0, ay1, ax1) = (anchor.y0 as i64, anchor.x0 as i64, anchor.y1 as i64, anchor.x1 as i64);
    let along = |rng: &mut R, a0: i64, a1: i64, len: i64| rng.random_range(a0 - len + 1..=a1);
    let (top, left) = match new_dir {
        // new box left of anchor
        0 => (along(rng, ay0, ay1, h), ax0 - g - w),
        1 => (along(rng, ay0, ay1, h), ax1 + g + 1),
        2 => (ay0 - g - h, along(rng, ax0, ax1, w)),
        _ => (ay1 + g + 1, along(rng, ax0, ax1, w)),
    };
    let s = size as i64;
    (top >= 0 && left >= 0 && top + h <= s && left + w <= s).then_some((top as usize, left as usize))
}

fn side_range<R: Rng>(rng: &mut R) -> (usize, usize) {
    (rng.random_range(MIN_SIDE..=MAX_SIDE), rng.random_range(MIN_SIDE..=MAX_SIDE))
}

fn try_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Option<(Vec<BinaryMask>, Vec<Relation>)> {
    let size = cfg.size;
    let weights = WeightedIndex::new(cfg.predicate_weights()).ok()?;
    let (h, w) = side_range(rng);
    let (top, left) = (rng.random_range(0..=size - h), rng.random_range(0..=size - w));
    let first = random_shape(rng, size, top, left, h, w);
    let mut masks = vec![first];
    let mut edges: Vec<Relation> = Vec::new();

    for idx in 1..cfg.n_instances {
        let predicate = weights.sample(rng);
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let anchor = rng.random_range(0..masks.len());
            let new_is_subject = rng.random_bool(0.5);
            let (h, w) = side_range(rng);
            let a_box = BBox::of(&masks[anchor])?;
            let Some((top, left)) = place_box(rng, size, a_box, predicate, new_is_subject, h, w) else {
                continue;
            };
            let m = random_shape(rng, size, top, left, h, w);
            if masks.iter().any(|o| o.bits.iter().zip(&m.bits).any(|(a, b)| *a && *b)) {
                continue;
            }
            let rel = if new_is_subject {
                Relation { subject: idx, object: anchor, predicate }
            } else {
                Relation { subject: anchor, object: idx, predicate }
            };
            masks.push(m);
            let mut want = edges.clone();
            want.push(rel);
            want.sort();
            if geometric_relations(&masks, cfg.n_predicates) == want {
                edges = want;
                placed = true;
                break;
            }
            masks.pop();
        }
        if !placed {
            return None;
        }
    }
    Some((masks, edges))
}

/// Deterministic scene for `seed`: non-overlapping coloured shapes whose
/// relations follow [`relation_between`].
pub fn synth_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    for attempt in 0..SCENE_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let Some((masks, relations)) = try_scene(cfg, &mut rng) else {
            continue;
        };
        let mut image = SyntheticImage::filled(cfg.size, cfg.size, BACKGROUND);
        let masks: Vec<BinaryMask> = masks
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.with_identity(i, rng.random_range(0..cfg.n_classes)))
            .collect();
        for m in &masks {
            let color = PALETTE[m.class_label];
            for y in 0..m.height {
                for x in 0..m.width {
                    if m.get(y, x) {
                        image.set(y, x, color);
                    }
                }
            }
        }
        return Ok(Scene {
            image,
            panoptic: PanopticOutput::from_masks(masks.clone())?,
            graph: GTSceneGraph {
                instances: masks,
                relations,
            },
        });
    }
    Err(Error::Placement(format!(
        "could not place {} instances on a {}x{} canvas",
        cfg.n_instances, cfg.size, cfg.size
    )))
}

//! Scene-graph data model and recall-based evaluation.
//!
//! Ranking follows the single-attempt rule: every predicted ordered pair
//! contributes only its best predicate, and with SingleMPO enabled every
//! matched ground-truth pair gets one attempt no matter how many duplicate
//! masks point at it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::mask_embed::BinaryMask;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GTSceneGraph {
    pub instances: Vec<BinaryMask>,
    pub relations: Vec<Relation>,
}

impl GTSceneGraph {
    pub fn validate(&self, num_predicates: usize) -> Result<()> {
        let n = self.instances.len();
        let mut seen = HashSet::new();
        for r in &self.relations {
            for i in [r.subject, r.object] {
                if i >= n {
                    return Err(Error::OutOfRange { index: i, len: n });
                }
            }
            if r.predicate >= num_predicates {
                return Err(Error::OutOfRange {
                    index: r.predicate,
                    len: num_predicates,
                });
            }
            if r.subject == r.object {
                return Err(Error::Data(format!("self relation on instance {}", r.subject)));
            }
            if !seen.insert(*r) {
                return Err(Error::Data(format!("duplicate relation {r:?}")));
            }
        }
        Ok(())
    }
}

/// A scored relation between two predicted instances (indices into the
/// image's predicted instance list).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredTriplet {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub score: f64,
    /// Set by [`dedup_singlempo`]: still ranked, never counted as a hit.
    #[serde(default)]
    pub suppressed: bool,
}

impl PredTriplet {
    pub fn new(subject: usize, object: usize, predicate: usize, score: f64) -> Self {
        Self {
            subject,
            object,
            predicate,
            score,
            suppressed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredSceneGraph {
    pub instances: Vec<BinaryMask>,
    pub triplets: Vec<PredTriplet>,
}

/// Predicted-instance → ground-truth assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub pred_to_gt: Vec<Option<usize>>,
    /// IoU with the assigned GT instance, 0 when unmatched.
    pub ious: Vec<f64>,
    /// False for surplus predictions merged into an existing match.
    pub primary: Vec<bool>,
}

impl MatchResult {
    /// Every prediction `i` assigned to GT `i` (PredCls).
    pub fn identity(n: usize) -> Self {
        Self {
            pred_to_gt: (0..n).map(Some).collect(),
            ious: vec![1.0; n],
            primary: vec![true; n],
        }
    }

    pub fn gt_matched(&self, num_gt: usize) -> Vec<bool> {
        let mut out = vec![false; num_gt];
        for g in self.pred_to_gt.iter().flatten() {
            out[*g] = true;
        }
        out
    }
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(shape_err(
            "mask_iou",
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(Error::InvalidArgument("IoU of two empty masks".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// Greedy descending-IoU matching among same-class pairs with
/// `IoU ≥ iou_thresh`. Predictions left over whose best candidate GT is
/// already taken are merged into that GT's match.
pub fn match_instances(pred: &[BinaryMask], gt: &[BinaryMask], iou_thresh: f64) -> Result<MatchResult> {
    let mut cands = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            if p.class_label != g.class_label {
                continue;
            }
            let iou = mask_iou(p, g)?;
            if iou >= iou_thresh {
                cands.push((iou, i, j));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut out = MatchResult {
        pred_to_gt: vec![None; pred.len()],
        ious: vec![0.0; pred.len()],
        primary: vec![false; pred.len()],
    };
    let mut gt_taken = vec![false; gt.len()];
    for &(iou, i, j) in &cands {
        if out.pred_to_gt[i].is_none() && !gt_taken[j] {
            out.pred_to_gt[i] = Some(j);
            out.ious[i] = iou;
            out.primary[i] = true;
            gt_taken[j] = true;
        }
    }
    // Candidates are IoU-sorted, so the first hit per prediction is its best.
    for &(iou, i, j) in &cands {
        if out.pred_to_gt[i].is_none() {
            out.pred_to_gt[i] = Some(j);
            out.ious[i] = iou;
        }
    }
    Ok(out)
}

/// Score descending; ties by (predicate, subject, object).
pub fn ranking_order(a: &PredTriplet, b: &PredTriplet) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.predicate.cmp(&b.predicate))
        .then(a.subject.cmp(&b.subject))
        .then(a.object.cmp(&b.object))
}

/// Keeps the best-ranked triplet of every predicted ordered pair.
pub fn best_per_pair(triplets: &[PredTriplet]) -> Vec<PredTriplet> {
    let mut best: HashMap<(usize, usize), PredTriplet> = HashMap::new();
    for t in triplets {
        best.entry((t.subject, t.object))
            .and_modify(|b| {
                if ranking_order(t, b) == Ordering::Less {
                    *b = *t;
                }
            })
            .or_insert(*t);
    }
    let mut out: Vec<PredTriplet> = best.into_values().collect();
    out.sort_by(ranking_order);
    out
}

/// SingleMPO: among triplets whose endpoints map to the same ground-truth
/// ordered pair, only the best-ranked one stays live; the rest are marked
/// suppressed but keep their rank. Triplets with an unmatched endpoint pass
/// through. Output is in ranking order.
pub fn dedup_singlempo(triplets: &[PredTriplet], matching: &MatchResult) -> Result<Vec<PredTriplet>> {
    let n = matching.pred_to_gt.len();
    let mut ranked = triplets.to_vec();
    ranked.sort_by(ranking_order);
    let mut claimed = HashSet::new();
    for t in &mut ranked {
        for i in [t.subject, t.object] {
            if i >= n {
                return Err(Error::OutOfRange { index: i, len: n });
            }
        }
        if t.suppressed {
            continue;
        }
        if let (Some(s), Some(o)) = (matching.pred_to_gt[t.subject], matching.pred_to_gt[t.object]) {
            if !claimed.insert((s, o)) {
                t.suppressed = true;
            }
        }
    }
    Ok(ranked)
}

/// Per-image outcome: for each GT relation, the 0-based rank of its first
/// hit and whether both endpoints were matched at all.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageHits {
    pub predicates: Vec<usize>,
    pub first_hit: Vec<Option<usize>>,
    pub endpoints_matched: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Protocol {
    /// Instances come from the segmenter and are matched by mask IoU.
    #[default]
    SgDet,
    /// Ground-truth instances are given; prediction `i` is GT `i`.
    PredCls,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgdet" => Ok(Self::SgDet),
            "predcls" => Ok(Self::PredCls),
            _ => Err(Error::InvalidArgument(format!("unknown protocol `{s}`"))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SgDet => "sgdet",
            Self::PredCls => "predcls",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub protocol: Protocol,
    pub iou_thresh: f64,
    pub dedup: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            protocol: Protocol::SgDet,
            iou_thresh: DEFAULT_IOU_THRESHOLD,
            dedup: true,
        }
    }
}

pub fn match_image(gt: &GTSceneGraph, pred: &PredSceneGraph, opts: &EvalOptions) -> Result<MatchResult> {
    match opts.protocol {
        Protocol::SgDet => match_instances(&pred.instances, &gt.instances, opts.iou_thresh),
        Protocol::PredCls => {
            if pred.instances.len() != gt.instances.len() {
                return Err(Error::Data(format!(
                    "predcls needs the {} GT instances, got {}",
                    gt.instances.len(),
                    pred.instances.len()
                )));
            }
            Ok(MatchResult::identity(gt.instances.len()))
        }
    }
}

/// Ranks one image's triplets and records where each GT relation is hit.
pub fn image_hits(gt: &GTSceneGraph, pred: &PredSceneGraph, opts: &EvalOptions) -> Result<ImageHits> {
    let matching = match_image(gt, pred, opts)?;
    let mut ranked = best_per_pair(&pred.triplets);
    if opts.dedup {
        ranked = dedup_singlempo(&ranked, &matching)?;
    }
    let n = pred.instances.len();
    let mut first_hit: BTreeMap<Relation, usize> = BTreeMap::new();
    for (rank, t) in ranked.iter().enumerate() {
        for i in [t.subject, t.object] {
            if i >= n {
                return Err(Error::OutOfRange { index: i, len: n });
            }
        }
        if t.suppressed {
            continue;
        }
        if let (Some(s), Some(o)) = (matching.pred_to_gt[t.subject], matching.pred_to_gt[t.object]) {
            let key = Relation {
                subject: s,
                object: o,
                predicate: t.predicate,
            };
            first_hit.entry(key).or_insert(rank);
        }
    }
    let matched = matching.gt_matched(gt.instances.len());
    Ok(ImageHits {
        predicates: gt.relations.iter().map(|r| r.predicate).collect(),
        first_hit: gt.relations.iter().map(|r| first_hit.get(r).copied()).collect(),
        endpoints_matched: gt.relations.iter().map(|r| matched[r.subject] && matched[r.object]).collect(),
    })
}

/// Pooled hit/GT counts per predicate class across images.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecallTable {
    pub images: Vec<ImageHits>,
}

impl RecallTable {
    pub fn build<'a>(
        pairs: impl IntoIterator<Item = (&'a GTSceneGraph, &'a PredSceneGraph)>,
        opts: &EvalOptions,
    ) -> Result<Self> {
        let images = pairs
            .into_iter()
            .map(|(g, p)| image_hits(g, p, opts))
            .collect::<Result<_>>()?;
        Ok(Self { images })
    }

    fn per_class(&self, hit: impl Fn(&ImageHits, usize) -> bool) -> BTreeMap<usize, (usize, usize)> {
        let mut table = BTreeMap::new();
        for img in &self.images {
            for (i, &p) in img.predicates.iter().enumerate() {
                let e = table.entry(p).or_insert((0, 0));
                e.0 += hit(img, i) as usize;
                e.1 += 1;
            }
        }
        table
    }

    fn hit_within(k: usize) -> impl Fn(&ImageHits, usize) -> bool {
        move |img, i| img.first_hit[i].is_some_and(|r| r < k)
    }

    /// Per-class recall (percent) at `k`, keyed by predicate.
    pub fn class_recalls(&self, k: usize) -> Result<BTreeMap<usize, f64>> {
        check_k(k)?;
        Ok(self
            .per_class(Self::hit_within(k))
            .into_iter()
            .map(|(p, (h, n))| (p, 100.0 * h as f64 / n as f64))
            .collect())
    }

    pub fn recall_at_k(&self, k: usize) -> Result<f64> {
        check_k(k)?;
        let (h, n) = self
            .per_class(Self::hit_within(k))
            .values()
            .fold((0, 0), |acc, &(h, n)| (acc.0 + h, acc.1 + n));
        Ok(if n == 0 { 0.0 } else { 100.0 * h as f64 / n as f64 })
    }

    pub fn mean_recall_at_k(&self, k: usize) -> Result<f64> {
        Ok(mean(self.class_recalls(k)?.values()))
    }

    /// Mean over classes of the fraction of GT relations with both
    /// endpoints matched.
    pub fn mr_inf(&self) -> f64 {
        mean(
            self.per_class(|img, i| img.endpoints_matched[i])
                .values()
                .map(|&(h, n)| 100.0 * h as f64 / n as f64)
                .collect::<Vec<_>>()
                .iter(),
        )
    }
}

fn mean<'a>(v: impl ExactSizeIterator<Item = &'a f64>) -> f64 {
    let n = v.len();
    if n == 0 {
        0.0
    } else {
        v.sum::<f64>() / n as f64
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    Ok(())
}

pub fn recall_at_k(gt: &[GTSceneGraph], pred: &[PredSceneGraph], k: usize, opts: &EvalOptions) -> Result<f64> {
    table(gt, pred, opts)?.recall_at_k(k)
}

pub fn mean_recall_at_k(gt: &[GTSceneGraph], pred: &[PredSceneGraph], k: usize, opts: &EvalOptions) -> Result<f64> {
    table(gt, pred, opts)?.mean_recall_at_k(k)
}

/// Upper bound on mR@k for a perfect predicate classifier over one image
/// set, given the matching implied by `opts`.
pub fn mr_inf(gt: &[GTSceneGraph], pred: &[PredSceneGraph], opts: &EvalOptions) -> Result<f64> {
    Ok(table(gt, pred, opts)?.mr_inf())
}

fn table(gt: &[GTSceneGraph], pred: &[PredSceneGraph], opts: &EvalOptions) -> Result<RecallTable> {
    if gt.len() != pred.len() {
        return Err(Error::Data(format!("{} GT images vs {} predictions", gt.len(), pred.len())));
    }
    RecallTable::build(gt.iter().zip(pred), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(y: usize, x: usize, s: usize, class: usize) -> BinaryMask {
        BinaryMask::from_fn(8, 8, |r, c| (y..y + s).contains(&r) && (x..x + s).contains(&c)).with_identity(0, class)
    }

    #[test]
    fn iou_cases() {
        let a = square(0, 0, 4, 0);
        let b = BinaryMask::from_fn(8, 8, |r, c| r < 4 && (2..6).contains(&c));
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &square(4, 4, 4, 0)).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &b).unwrap(), 1.0 / 3.0);
        let empty = BinaryMask::from_fn(8, 8, |_, _| false);
        assert!(mask_iou(&empty, &empty).is_err());
    }

    #[test]
    fn duplicate_prediction_is_merged() {
        let gt = [square(0, 0, 4, 1)];
        let near = BinaryMask::from_fn(8, 8, |r, c| r < 4 && c < 3).with_identity(1, 1);
        let m = match_instances(&[gt[0].clone(), near], &gt, 0.5).unwrap();
        assert_eq!(m.pred_to_gt, vec![Some(0), Some(0)]);
        assert_eq!(m.primary, vec![true, false]);
    }

    #[test]
    fn dedup_keeps_best_attempt() {
        let m = MatchResult {
            pred_to_gt: vec![Some(0), Some(1), Some(1)],
            ious: vec![1.0; 3],
            primary: vec![true, true, false],
        };
        let t = [PredTriplet::new(0, 1, 2, 0.7), PredTriplet::new(0, 2, 2, 0.9)];
        let d = dedup_singlempo(&t, &m).unwrap();
        let live: Vec<_> = d.iter().filter(|t| !t.suppressed).collect();
        assert_eq!(live.len(), 1);
        assert_eq!(live[0].score, 0.9);
        assert_eq!(dedup_singlempo(&d, &m).unwrap(), d);
    }
}

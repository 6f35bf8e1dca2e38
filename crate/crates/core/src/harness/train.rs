//! Training loop: one scene per step, all sampled pairs on one tape,
//! AdamW with global-norm clipping and a warmup-cosine schedule.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalConfig};
use crate::bidir_head::{consistency_loss, predict_bidirectional, training_losses};
use crate::counters;
use crate::error::{Error, Result};
use crate::layers::Bound;
use crate::model::{ImageContext, InferenceOptions, RelationModel};
use crate::numerics::{
    adamw_step, clip_grad_norm, lr_at, LrSchedule, OptimizerState, Tape, DEFAULT_LR, DEFAULT_WEIGHT_DECAY,
};
use crate::sgeval::Protocol;
use crate::synth::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// One negative pair per this many ground-truth relations.
    pub neg_ratio: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Evaluate train mR@50 every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: DEFAULT_LR,
            min_lr: 0.0,
            warmup_frac: 0.05,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            neg_ratio: 5,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neg_ratio == 0 {
            return Err(Error::InvalidArgument("neg_ratio must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("lr and clip_norm must be positive, wd non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidArgument(format!("warmup_frac {} outside [0, 1)", self.warmup_frac)));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// One JSON-lines record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub bce: f64,
    pub consistency: f64,
    /// Mean consistency over every pair of the training set after this epoch.
    pub probe_consistency: f64,
    pub train_mr50: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
    pub head_passes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
    pub initial_consistency: f64,
    pub final_consistency: f64,
}

/// A training pair: `s0 < s1` by instance id, with multi-hot targets for
/// both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub s0: usize,
    pub s1: usize,
    pub y_fwd: Vec<f64>,
    pub y_bwd: Vec<f64>,
}

/// Negatives drawn for a scene with `n_relations` ground-truth relations.
pub fn negative_count(n_relations: usize, neg_ratio: usize) -> usize {
    n_relations.div_ceil(neg_ratio)
}

/// Every related unordered pair plus sampled unrelated ones.
pub fn sample_pairs<R: rand::Rng + ?Sized>(
    scene: &Scene,
    num_predicates: usize,
    neg_ratio: usize,
    rng: &mut R,
) -> (Vec<TrainPair>, usize) {
    let inst = &scene.graph.instances;
    let n = inst.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| inst[i].instance_id);
    let mut positives = Vec::new();
    let mut unrelated = Vec::new();
    for (a, &i) in order.iter().enumerate() {
        for &j in &order[a + 1..] {
            let mut y_fwd = vec![0.0; num_predicates];
            let mut y_bwd = vec![0.0; num_predicates];
            let mut any = false;
            for r in &scene.graph.relations {
                if r.subject == i && r.object == j {
                    y_fwd[r.predicate] = 1.0;
                    any = true;
                } else if r.subject == j && r.object == i {
                    y_bwd[r.predicate] = 1.0;
                    any = true;
                }
            }
            let pair = TrainPair { s0: i, s1: j, y_fwd, y_bwd };
            if any {
                positives.push(pair);
            } else {
                unrelated.push(pair);
            }
        }
    }
    let k = negative_count(scene.graph.relations.len(), neg_ratio).min(unrelated.len());
    let negatives: Vec<TrainPair> = unrelated.choose_multiple(rng, k).cloned().collect();
    let n_neg = negatives.len();
    positives.extend(negatives);
    (positives, n_neg)
}

struct StepLoss {
    loss: f64,
    bce: f64,
    consistency: f64,
}

fn train_step(
    model: &mut RelationModel,
    ctx: &ImageContext,
    pairs: &[TrainPair],
) -> Result<Option<StepLoss>> {
    let tape = Tape::new();
    let b = Bound::new(&tape, &model.params);
    let patches = model.patch_tokens(&b, ctx)?;
    let mut total = None;
    let (mut bce, mut cons) = (0.0, 0.0);
    for p in pairs {
        let x = model.pair_feature(&b, patches, ctx, p.s0, p.s1)?;
        let xs = model.pair_feature(&b, patches, ctx, p.s1, p.s0)?;
        counters::add_head_pass();
        counters::add_head_pass();
        let l = training_losses(&b, x, xs, &p.y_fwd, &p.y_bwd, &model.ids.gate, &model.ids.head, model.lambda_cons())?;
        bce += l.bce_total.item();
        cons += l.consistency.item();
        total = Some(match total {
            None => l.combined,
            Some(t) => l.combined.add(t)?,
        });
    }
    let Some(total) = total else {
        return Ok(None);
    };
    let n = pairs.len() as f64;
    let loss = total.scale(1.0 / n);
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value} (bce {bce}, consistency {cons})")));
    }
    let grads = tape.backward(loss)?;
    model.params.zero_grad();
    grads.accumulate_into(&mut model.params)?;
    Ok(Some(StepLoss {
        loss: value,
        bce: bce / n,
        consistency: cons / n,
    }))
}

/// Mean consistency loss over every unordered pair of every scene.
pub fn probe_consistency(model: &RelationModel, contexts: &[ImageContext]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for ctx in contexts {
        let tape = Tape::new();
        let b = Bound::new(&tape, &model.params);
        let patches = model.patch_tokens(&b, ctx)?;
        let n = ctx.ratios.len();
        for i in 0..n {
            for j in i + 1..n {
                let x = model.pair_feature(&b, patches, ctx, i, j)?;
                let xs = model.pair_feature(&b, patches, ctx, j, i)?;
                let p = predict_bidirectional(&b, x, &model.ids.gate, &model.ids.head)?;
                let q = predict_bidirectional(&b, xs, &model.ids.gate, &model.ids.head)?;
                sum += consistency_loss(p.split.t_fwd, p.split.t_bwd, q.split.t_fwd, q.split.t_bwd)?.item();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Trains `model` in place on ground-truth masks; `on_epoch` sees each log
/// record as it is produced.
pub fn train(
    model: &mut RelationModel,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    let num_predicates = model.cfg.num_predicates;
    for s in scenes {
        s.graph.validate(num_predicates)?;
    }
    let contexts = scenes
        .iter()
        .map(|s| model.prepare(&s.image, &s.panoptic))
        .collect::<Result<Vec<_>>>()?;
    let initial_consistency = probe_consistency(model, &contexts)?;
    let total_steps = (cfg.epochs * scenes.len()) as u64;
    let schedule = if total_steps > 0 {
        let warmup = (cfg.warmup_frac * total_steps as f64) as u64;
        Some(LrSchedule::new(cfg.lr, cfg.min_lr, warmup, total_steps)?)
    } else {
        None
    };
    let mut opt = OptimizerState::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval_cfg = EvalConfig {
        protocol: Protocol::PredCls,
        ks: vec![50],
        inference: InferenceOptions::default(),
        ..EvalConfig::default()
    };
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    let mut final_consistency = initial_consistency;
    for epoch in 0..cfg.epochs {
        let before = counters::snapshot();
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss, mut bce, mut cons) = (0.0, 0.0, 0.0);
        let (mut positives, mut negatives) = (0, 0);
        let mut lr = cfg.lr;
        for &i in &order {
            let (pairs, n_neg) = sample_pairs(&scenes[i], num_predicates, cfg.neg_ratio, &mut rng);
            positives += pairs.len() - n_neg;
            negatives += n_neg;
            let l = train_step(model, &contexts[i], &pairs)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, step {step}, scene {i}: {msg}")),
                    other => other,
                })?;
            if let Some(s) = &schedule {
                lr = lr_at(s, step)?;
            }
            step += 1;
            // A scene without any pair contributes no update.
            let Some(l) = l else { continue };
            loss += l.loss;
            bce += l.bce;
            cons += l.consistency;
            opt.lr = lr;
            clip_grad_norm(&mut model.params, cfg.clip_norm);
            adamw_step(&mut model.params, &mut opt)?;
        }
        let n = scenes.len().max(1) as f64;
        let head_passes = (counters::snapshot() - before).head_passes;
        final_consistency = probe_consistency(model, &contexts)?;
        let last = epoch + 1 == cfg.epochs;
        let train_mr50 = if last || (epoch + 1) % cfg.eval_every == 0 {
            Some(evaluate(model, scenes, &eval_cfg)?.mean_recall(50)?)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            step,
            lr,
            loss: loss / n,
            bce: bce / n,
            consistency: cons / n,
            probe_consistency: final_consistency,
            train_mr50,
            positives,
            negatives,
            head_passes,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainReport {
        epochs: logs,
        steps: step,
        initial_consistency,
        final_consistency,
    })
}

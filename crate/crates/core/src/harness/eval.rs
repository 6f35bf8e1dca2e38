//! Scene-graph evaluation over a dataset and the metrics CSV.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::simulate_inferred_masks;
use crate::counters;
use crate::error::{Error, Result};
use crate::model::{pair_triplets, ImageContext, InferenceOptions, RelationModel};
use crate::sgeval::{EvalOptions, PredSceneGraph, Protocol, RecallTable};
use crate::synth::Scene;

pub const CSV_HEADER: &str = "protocol,k,R@k,mR@k,mR@inf,latency_ms_mean,rps,head_passes,flops";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub mask_jitter: f64,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub inference: InferenceOptions,
    pub dedup: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::SgDet,
            mask_jitter: 0.0,
            ks: vec![20, 50, 100],
            seed: 0,
            inference: InferenceOptions::default(),
            dedup: true,
        }
    }
}

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub protocol: String,
    pub k: usize,
    pub r_at_k: f64,
    pub mr_at_k: f64,
    pub mr_inf: f64,
    pub latency_ms_mean: f64,
    pub rps: f64,
    pub head_passes: u64,
    pub flops: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.2},{},{}",
            self.protocol,
            self.k,
            self.r_at_k,
            self.mr_at_k,
            self.mr_inf,
            self.latency_ms_mean,
            self.rps,
            self.head_passes,
            self.flops
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Data(format!("metrics row needs 9 fields: `{line}`")));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Data(format!("bad number `{}` in `{line}`", f[i])))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse()
                .map_err(|_| Error::Data(format!("bad integer `{}` in `{line}`", f[i])))
        };
        Ok(Self {
            protocol: f[0].to_string(),
            k: int(1)? as usize,
            r_at_k: num(2)?,
            mr_at_k: num(3)?,
            mr_inf: num(4)?,
            latency_ms_mean: num(5)?,
            rps: num(6)?,
            head_passes: int(7)?,
            flops: int(8)?,
        })
    }
}

pub fn write_csv(rows: &[MetricsRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Data(format!("{}: missing metrics header", path.display()))),
    }
    lines.map(MetricsRow::from_csv).collect()
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub rows: Vec<MetricsRow>,
    pub table: RecallTable,
    /// Per-class recall at every requested k.
    pub class_recalls: BTreeMap<usize, BTreeMap<usize, f64>>,
    pub predictions: Vec<PredSceneGraph>,
}

impl EvalOutcome {
    pub fn row(&self, k: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    pub fn mean_recall(&self, k: usize) -> Result<f64> {
        self.table.mean_recall_at_k(k)
    }
}

/// Predicted scene graph for one scene under `cfg`.
pub fn predict_scene(model: &RelationModel, scene: &Scene, index: usize, cfg: &EvalConfig) -> Result<PredSceneGraph> {
    predict_with_context(model, scene, index, cfg).map(|(p, _)| p)
}

fn predict_with_context(
    model: &RelationModel,
    scene: &Scene,
    index: usize,
    cfg: &EvalConfig,
) -> Result<(PredSceneGraph, ImageContext)> {
    let panoptic = match cfg.protocol {
        Protocol::PredCls => scene.panoptic.clone(),
        Protocol::SgDet => simulate_inferred_masks(&scene.panoptic, cfg.mask_jitter, cfg.seed ^ index as u64)?,
    };
    let ctx = model.prepare(&scene.image, &panoptic)?;
    let triplets = pair_triplets(&model.infer_pairs(&ctx, cfg.inference)?);
    Ok((
        PredSceneGraph {
            instances: panoptic.masks,
            triplets,
        },
        ctx,
    ))
}

/// Comprehensive-graph evaluation with metrics at every `k`.
pub fn evaluate(model: &RelationModel, scenes: &[Scene], cfg: &EvalConfig) -> Result<EvalOutcome> {
    if cfg.ks.is_empty() {
        return Err(Error::InvalidArgument("no k values".into()));
    }
    let before = counters::snapshot();
    let mut predictions = Vec::with_capacity(scenes.len());
    let mut flops = 0u64;
    let mut elapsed = 0.0;
    let mut pairs = 0usize;
    for (i, scene) in scenes.iter().enumerate() {
        let t0 = Instant::now();
        let (pred, ctx) = predict_with_context(model, scene, i, cfg)?;
        elapsed += t0.elapsed().as_secs_f64();
        let n = pred.instances.len();
        pairs += n * n.saturating_sub(1);
        flops += model.scene_flops(&ctx, cfg.inference);
        predictions.push(pred);
    }
    let head_passes = (counters::snapshot() - before).head_passes;
    let opts = EvalOptions {
        protocol: cfg.protocol,
        dedup: cfg.dedup,
        ..EvalOptions::default()
    };
    let table = RecallTable::build(scenes.iter().map(|s| &s.graph).zip(&predictions), &opts)?;
    let n = scenes.len().max(1) as f64;
    let mut ks = cfg.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let mut rows = Vec::new();
    let mut class_recalls = BTreeMap::new();
    for &k in &ks {
        rows.push(MetricsRow {
            protocol: cfg.protocol.to_string(),
            k,
            r_at_k: table.recall_at_k(k)?,
            mr_at_k: table.mean_recall_at_k(k)?,
            mr_inf: table.mr_inf(),
            latency_ms_mean: 1e3 * elapsed / n,
            rps: if elapsed > 0.0 { pairs as f64 / elapsed } else { 0.0 },
            head_passes,
            flops: (flops as f64 / n).round() as u64,
        });
        class_recalls.insert(k, table.class_recalls(k)?);
    }
    Ok(EvalOutcome {
        rows,
        table,
        class_recalls,
        predictions,
    })
}

/// Per-class recall table as CSV (`k,predicate,recall`).
pub fn write_class_csv(outcome: &EvalOutcome, names: &[String], mut out: impl Write) -> Result<()> {
    writeln!(out, "k,predicate,recall")?;
    for (k, table) in &outcome.class_recalls {
        for (p, r) in table {
            let name = names.get(*p).map_or_else(|| p.to_string(), Clone::clone);
            writeln!(out, "{k},{name},{r:.4}")?;
        }
    }
    Ok(())
}

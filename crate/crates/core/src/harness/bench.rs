//! Latency and throughput benchmark.
//!
//! Every variant shares the trained parameters and differs only in its
//! inference switches. Variants are timed round-robin so slow drifts of
//! the machine hit all of them alike.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{Error, Result};
use crate::layers::Bound;
use crate::model::{ImageContext, InferenceOptions, RatioSource, RelationModel};
use crate::numerics::Tape;
use crate::synth::Scene;

pub const DEFAULT_WARMUP: usize = 200;
pub const DEFAULT_PASSES: usize = 1000;
pub const DEFAULT_RPS_BATCH: usize = 64;
pub const MIN_PASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchVariant {
    pub name: String,
    pub prune: bool,
    pub tome_ratio: f64,
    pub ratio_source: RatioSource,
    pub bidirectional: bool,
}

impl BenchVariant {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            prune: true,
            tome_ratio: 0.0,
            ratio_source: RatioSource::LowResLogits,
            bidirectional: true,
        }
    }

    pub fn prune(mut self, on: bool) -> Self {
        self.prune = on;
        self
    }

    pub fn tome(mut self, ratio: f64) -> Self {
        self.tome_ratio = ratio;
        self
    }

    pub fn lowres(mut self, on: bool) -> Self {
        self.ratio_source = if on {
            RatioSource::LowResLogits
        } else {
            RatioSource::UpsampledLogits
        };
        self
    }

    pub fn bidirectional(mut self, on: bool) -> Self {
        self.bidirectional = on;
        self
    }

    /// `model` with this variant's switches and unchanged parameters.
    pub fn apply(&self, model: &RelationModel) -> Result<RelationModel> {
        let mut m = model.clone();
        m.cfg.prune = self.prune;
        m.cfg.tome_ratio = self.tome_ratio;
        m.cfg.ratio_source = self.ratio_source;
        m.cfg.validate()?;
        Ok(m)
    }

    fn inference(&self) -> InferenceOptions {
        InferenceOptions {
            bidirectional: self.bidirectional,
            swap_order: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub warmup: usize,
    pub passes: usize,
    /// Pairs per batch in the throughput measurement.
    pub rps_batch: usize,
    /// Number of batches timed for throughput.
    pub rps_batches: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: DEFAULT_WARMUP,
            passes: DEFAULT_PASSES,
            rps_batch: DEFAULT_RPS_BATCH,
            rps_batches: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Statistics of post-warmup samples given in milliseconds.
pub fn summarize(samples_ms: &[f64]) -> Result<LatencyStats> {
    if samples_ms.len() < MIN_PASSES {
        return Err(Error::InvalidArgument(format!(
            "{} measured passes, need at least {MIN_PASSES}",
            samples_ms.len()
        )));
    }
    let mut s = samples_ms.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    // Nearest-rank percentile.
    let p95 = s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
    Ok(LatencyStats {
        mean_ms: s.iter().sum::<f64>() / n as f64,
        median_ms: median,
        p95_ms: p95,
    })
}

/// Runs `warmup + passes` rounds; in each round every job runs once with
/// the global pass index. Returns post-warmup samples (ms) per job.
pub fn time_interleaved(
    warmup: usize,
    passes: usize,
    jobs: &mut [&mut dyn FnMut(usize) -> Result<()>],
) -> Result<Vec<Vec<f64>>> {
    if passes < MIN_PASSES {
        return Err(Error::InvalidArgument(format!(
            "{passes} passes requested, need at least {MIN_PASSES}"
        )));
    }
    let mut samples = vec![Vec::with_capacity(passes); jobs.len()];
    for i in 0..warmup + passes {
        for (job, out) in jobs.iter_mut().zip(&mut samples) {
            let t0 = Instant::now();
            job(i)?;
            let ms = 1e3 * t0.elapsed().as_secs_f64();
            if i >= warmup {
                out.push(ms);
            }
        }
    }
    Ok(samples)
}

/// Single-job form of [`time_interleaved`].
pub fn time_passes(warmup: usize, passes: usize, mut job: impl FnMut(usize) -> Result<()>) -> Result<LatencyStats> {
    let samples = time_interleaved(warmup, passes, &mut [&mut job])?;
    summarize(&samples[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: BenchVariant,
    pub warmup: usize,
    pub passes: usize,
    pub latency: LatencyStats,
    /// Ordered subject-object pairs classified per second.
    pub rps: f64,
    /// Mean estimated FLOPs per image.
    pub flops: u64,
    /// Head passes over one sweep of the scenes.
    pub head_passes: u64,
    /// Bilinear upsampling calls over one sweep of the scenes.
    pub upsample_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, name: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>9} {:>9} {:>9} {:>10} {:>12} {:>6} {:>6}\n",
            "variant", "mean_ms", "median", "p95", "rps", "flops", "heads", "upsmp"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<14} {:>9.3} {:>9.3} {:>9.3} {:>10.1} {:>12} {:>6} {:>6}\n",
                r.variant.name,
                r.latency.mean_ms,
                r.latency.median_ms,
                r.latency.p95_ms,
                r.rps,
                r.flops,
                r.head_passes,
                r.upsample_calls
            ));
        }
        s
    }
}

/// One forward pass over a scene: encoder, ratios, every pair pass.
fn forward(model: &RelationModel, scene: &Scene, opts: InferenceOptions) -> Result<usize> {
    let ctx = model.prepare(&scene.image, &scene.panoptic)?;
    Ok(model.infer_pairs(&ctx, opts)?.len())
}

/// Ordered pairs per second when pairs are streamed in batches of
/// `batch`, each batch on one tape.
pub fn throughput(model: &RelationModel, scenes: &[Scene], opts: InferenceOptions, batch: usize, batches: usize) -> Result<f64> {
    if batch == 0 || batches == 0 {
        return Err(Error::InvalidArgument("throughput needs a positive batch size and count".into()));
    }
    let mut jobs = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        let n = s.panoptic.masks.len();
        for i in 0..n {
            for j in 0..n {
                if i != j && (!opts.bidirectional || i < j) {
                    jobs.push((si, i, j));
                }
            }
        }
    }
    if jobs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to benchmark".into()));
    }
    let per_pass = if opts.bidirectional { 2 } else { 1 };
    let t0 = Instant::now();
    let mut contexts: HashMap<usize, ImageContext> = HashMap::new();
    let mut classified = 0usize;
    let mut cursor = 0usize;
    for _ in 0..batches {
        let tape = Tape::new();
        let b = Bound::new(&tape, &model.params);
        let mut patches = HashMap::new();
        for _ in 0..batch {
            let (si, i, j) = jobs[cursor % jobs.len()];
            cursor += 1;
            if cursor % jobs.len() == 0 {
                contexts.clear();
            }
            if !contexts.contains_key(&si) {
                let s = &scenes[si];
                contexts.insert(si, model.prepare(&s.image, &s.panoptic)?);
            }
            let ctx = &contexts[&si];
            let p = match patches.get(&si) {
                Some(&p) => p,
                None => {
                    let p = model.patch_tokens(&b, ctx)?;
                    patches.insert(si, p);
                    p
                }
            };
            model.pair_forward(&b, p, ctx, i, j)?;
            classified += per_pass;
        }
    }
    Ok(classified as f64 / t0.elapsed().as_secs_f64())
}

/// Benchmarks `variants` of `model` on `scenes` at batch size 1.
pub fn bench(model: &RelationModel, scenes: &[Scene], variants: &[BenchVariant], opts: &BenchOptions) -> Result<BenchReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no scenes to benchmark".into()));
    }
    let models = variants.iter().map(|v| v.apply(model)).collect::<Result<Vec<_>>>()?;
    let mut counts = Vec::new();
    for (m, v) in models.iter().zip(variants) {
        let before = counters::snapshot();
        let mut flops = 0u64;
        for s in scenes {
            let ctx = m.prepare(&s.image, &s.panoptic)?;
            m.infer_pairs(&ctx, v.inference())?;
            flops += m.scene_flops(&ctx, v.inference());
        }
        let d = counters::snapshot() - before;
        counts.push((flops / scenes.len() as u64, d.head_passes, d.upsample_calls));
    }
    let mut closures: Vec<Box<dyn FnMut(usize) -> Result<()>>> = models
        .iter()
        .zip(variants)
        .map(|(m, v)| {
            let o = v.inference();
            Box::new(move |i: usize| forward(m, &scenes[i % scenes.len()], o).map(|_| ()))
                as Box<dyn FnMut(usize) -> Result<()>>
        })
        .collect();
    let mut jobs: Vec<&mut dyn FnMut(usize) -> Result<()>> = closures.iter_mut().map(|c| c.as_mut() as _).collect();
    let samples = time_interleaved(opts.warmup, opts.passes, &mut jobs)?;
    let mut rows = Vec::new();
    for (((m, v), s), (flops, head_passes, upsample_calls)) in models.iter().zip(variants).zip(&samples).zip(counts) {
        rows.push(BenchRow {
            variant: v.clone(),
            warmup: opts.warmup,
            passes: opts.passes,
            latency: summarize(s)?,
            rps: throughput(m, scenes, v.inference(), opts.rps_batch, opts.rps_batches)?,
            flops,
            head_passes,
            upsample_calls,
        });
    }
    Ok(BenchReport { rows })
}

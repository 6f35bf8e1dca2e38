//! Transformer neck over `[class, location, patch…]` with mask-based patch
//! pruning.
//!
//! Only the class token's final state is read out, so the neck accepts any
//! number of patch tokens, including zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{Bound, LayerNorm, Linear, Mlp};
use crate::mask_embed::OverlapRatios;
use crate::numerics::{concat_cols, concat_rows, randn, ParamId, ParamSet, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeckConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
}

impl NeckConfig {
    /// Full-size neck: 4 blocks, 6 heads, width 384.
    pub fn full() -> Self {
        Self {
            depth: 4,
            heads: 6,
            dim: 384,
            mlp_ratio: 4,
        }
    }

    /// Small neck used for CPU training runs.
    pub fn desk() -> Self {
        Self {
            depth: 2,
            heads: 4,
            dim: 64,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "neck dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self::full()
    }
}

/// Parameters of one pre-norm transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParams {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl BlockParams {
    pub fn init<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, cfg: &NeckConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        Self {
            ln1: LayerNorm::init(ps, &format!("{name}.ln1"), d),
            q: Linear::init(ps, &format!("{name}.attn.q"), d, d, rng),
            k: Linear::init(ps, &format!("{name}.attn.k"), d, d, rng),
            v: Linear::init(ps, &format!("{name}.attn.v"), d, d, rng),
            out: Linear::init(ps, &format!("{name}.attn.out"), d, d, rng),
            ln2: LayerNorm::init(ps, &format!("{name}.ln2"), d),
            mlp: Mlp::init(ps, &format!("{name}.mlp"), (d, d * cfg.mlp_ratio, d), rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeckParams {
    pub class_token: ParamId,
    pub location_token: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl NeckParams {
    pub fn init<R: Rng + ?Sized>(ps: &mut ParamSet, cfg: &NeckConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            class_token: ps.add("neck.class_token", randn(rng, &[cfg.dim], 0.02)),
            location_token: ps.add("neck.location_token", randn(rng, &[cfg.dim], 0.02)),
            blocks: (0..cfg.depth)
                .map(|i| BlockParams::init(ps, &format!("neck.block{i}"), cfg, rng))
                .collect(),
        })
    }
}

/// Token sequence entering the neck.
#[derive(Debug, Clone)]
pub struct TokenSequence<'t> {
    pub class_token: Var<'t>,
    pub location_token: Var<'t>,
    /// `P' × D`; may have zero rows.
    pub patch_tokens: Var<'t>,
    /// Original patch index of every surviving row, strictly increasing.
    pub keep_map: Vec<usize>,
}

impl<'t> TokenSequence<'t> {
    pub fn new(class_token: Var<'t>, location_token: Var<'t>, patch_tokens: Var<'t>) -> Result<Self> {
        let rows = match patch_tokens.shape().as_slice() {
            &[p, _] => p,
            s => return Err(shape_err("TokenSequence", format!("patches must be P×D, got {s:?}"))),
        };
        Ok(Self {
            class_token,
            location_token,
            patch_tokens,
            keep_map: (0..rows).collect(),
        })
    }

    pub fn num_patches(&self) -> usize {
        self.keep_map.len()
    }

    pub fn len(&self) -> usize {
        self.keep_map.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Patch indices (into the full grid) with any subject or object coverage.
pub fn surviving_patches(r_s: &OverlapRatios, r_o: &OverlapRatios) -> Vec<usize> {
    r_s.values
        .iter()
        .zip(&r_o.values)
        .enumerate()
        .filter(|(_, (&s, &o))| s > 0.0 || o > 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Drops every patch token that neither mask touches. The ratios are the
/// ones already computed for the mask embedding; nothing is re-pooled.
pub fn prune_patches<'t>(
    tokens: &TokenSequence<'t>,
    r_s: &OverlapRatios,
    r_o: &OverlapRatios,
) -> Result<TokenSequence<'t>> {
    if r_s.len() != r_o.len() {
        return Err(shape_err("prune_patches", format!("ratio lengths {} vs {}", r_s.len(), r_o.len())));
    }
    let unpruned = tokens.keep_map.iter().enumerate().all(|(i, &k)| i == k);
    let out_of_range = tokens.keep_map.last().is_some_and(|&l| l >= r_s.len());
    if out_of_range || (unpruned && tokens.keep_map.len() != r_s.len()) {
        return Err(shape_err(
            "prune_patches",
            format!("{} patch tokens vs a {}-patch ratio grid", tokens.keep_map.len(), r_s.len()),
        ));
    }
    let (rows, keep_map): (Vec<usize>, Vec<usize>) = tokens
        .keep_map
        .iter()
        .enumerate()
        .filter(|(_, &orig)| r_s.values[orig] > 0.0 || r_o.values[orig] > 0.0)
        .map(|(row, &orig)| (row, orig))
        .unzip();
    Ok(TokenSequence {
        class_token: tokens.class_token,
        location_token: tokens.location_token,
        patch_tokens: tokens.patch_tokens.select_rows(&rows)?,
        keep_map,
    })
}

/// Multi-head self-attention of a pre-normalized `L×D` sequence.
pub(crate) fn attention<'t>(b: &Bound<'t>, blk: &BlockParams, x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let d = blk.q.fan_out;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = blk.q.forward(b, x)?;
    let k = blk.k.forward(b, x)?;
    let v = blk.v.forward(b, x)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let p = qh.matmul(kh.transpose()?)?.scale(scale).softmax(1)?;
        outs.push(p.matmul(vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { concat_cols(&outs)? };
    blk.out.forward(b, merged)
}

/// `x + attn(ln1(x))`, then `h + mlp(ln2(h))`.
pub fn block_forward<'t>(b: &Bound<'t>, blk: &BlockParams, x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let h = x.add(attention(b, blk, blk.ln1.forward(b, x)?, heads)?)?;
    h.add(blk.mlp.forward(b, blk.ln2.forward(b, h)?)?)
}

/// Runs the blocks over `[class, location, patches]` and returns the class
/// token's final state (length `D`).
pub fn neck_forward<'t>(
    b: &Bound<'t>,
    params: &NeckParams,
    tokens: &TokenSequence<'t>,
    cfg: &NeckConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    if params.blocks.len() != cfg.depth {
        return Err(Error::InvalidArgument(format!(
            "{} blocks for depth {}",
            params.blocks.len(),
            cfg.depth
        )));
    }
    let all_finite = |v: &Var<'t>| v.with_data(|d| d.iter().all(|x| x.is_finite()));
    if ![tokens.class_token, tokens.location_token, tokens.patch_tokens]
        .iter()
        .all(all_finite)
    {
        return Err(Error::NonFinite("neck input".into()));
    }
    if cfg.depth == 0 {
        return Ok(tokens.class_token);
    }
    let mut x = concat_rows(&[tokens.class_token, tokens.location_token, tokens.patch_tokens])?;
    for blk in &params.blocks {
        x = block_forward(b, blk, x, cfg.heads)?;
    }
    x.row(0)
}

/// Multiply-accumulate count of one neck pass over `num_patches` patch
/// tokens plus the two persistent tokens.
///
/// Per block with `L = num_patches + 2`, width `D`, MLP width `M`:
/// `4·L·D²` (q, k, v, out projections) `+ 2·L²·D` (scores and weighted
/// values) `+ 2·L·D·M` (MLP). Norms and activations are not counted.
pub fn mac_estimate(num_patches: usize, cfg: &NeckConfig) -> u64 {
    let l = (num_patches + 2) as u64;
    let d = cfg.dim as u64;
    let m = (cfg.dim * cfg.mlp_ratio) as u64;
    cfg.depth as u64 * (4 * l * d * d + 2 * l * l * d + 2 * l * d * m)
}

/// FLOPs of one neck pass: two per multiply-accumulate.
pub fn flop_estimate(num_patches: usize, cfg: &NeckConfig) -> u64 {
    2 * mac_estimate(num_patches, cfg)
}

/// Attention-only share of [`flop_estimate`] (`2·L²·D` per block, doubled).
pub fn attention_score_flops(num_patches: usize, cfg: &NeckConfig) -> u64 {
    let l = (num_patches + 2) as u64;
    2 * cfg.depth as u64 * 2 * l * l * cfg.dim as u64
}

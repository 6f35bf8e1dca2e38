//! Per-patch mask overlap ratios and the subject/object mask embedding.
//!
//! A patch token is enriched as
//! `patch + r_s·t_s + r_o·t_o + (1 − r_s − r_o)·t_bg`, where `r_s`/`r_o`
//! are the fractions of the patch area covered by the subject/object mask.
//! Ratios are plain average pools of the binary masks, so a mask only needs
//! to be pooled once no matter how many pairs it takes part in.

use serde::{Deserialize, Serialize};

use crate::counters;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{kernels, outer, Tape, Tensor, Var};

/// Per-instance segmentation mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
    pub instance_id: usize,
    pub class_label: usize,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>, instance_id: usize, class_label: usize) -> Result<Self> {
        if bits.len() != height * width {
            return Err(shape_err("BinaryMask::new", format!("{height}x{width} vs {} bits", bits.len())));
        }
        Ok(Self {
            height,
            width,
            bits,
            instance_id,
            class_label,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self {
            height,
            width,
            bits,
            instance_id: 0,
            class_label: 0,
        }
    }

    pub fn with_identity(mut self, instance_id: usize, class_label: usize) -> Self {
        self.instance_id = instance_id;
        self.class_label = class_label;
        self
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
            ..self.clone()
        }
    }
}

/// Fraction of every patch covered by one mask, row-major over the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRatios {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<f64>,
}

impl OverlapRatios {
    pub fn zeros(grid_h: usize, grid_w: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            values: vec![0.0; grid_h * grid_w],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_grid(h: usize, w: usize, grid: (usize, usize)) -> Result<()> {
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::InvalidArgument("grid extent must be positive".into()));
    }
    if grid.0 > h || grid.1 > w {
        return Err(Error::InvalidArgument(format!(
            "grid {}x{} larger than input {h}x{w}",
            grid.0, grid.1
        )));
    }
    Ok(())
}

fn pool_plane(plane: &[f64], h: usize, w: usize, grid: (usize, usize)) -> OverlapRatios {
    counters::add_pool_call();
    OverlapRatios {
        grid_h: grid.0,
        grid_w: grid.1,
        values: kernels::avg_pool2d(plane, 1, h, w, grid.0, grid.1),
    }
}

fn check_masks(masks: &[BinaryMask]) -> Result<(usize, usize)> {
    let first = masks.first().ok_or_else(|| Error::InvalidArgument("empty mask list".into()))?;
    let (h, w) = (first.height, first.width);
    if let Some(m) = masks.iter().find(|m| (m.height, m.width) != (h, w)) {
        return Err(shape_err(
            "ratios",
            format!("mask {} is {}x{}, expected {h}x{w}", m.instance_id, m.height, m.width),
        ));
    }
    Ok((h, w))
}

/// Pools every mask once; the result is indexed like `masks` and reused for
/// any number of pairs.
pub fn ratios_pooled(masks: &[BinaryMask], grid: (usize, usize)) -> Result<Vec<OverlapRatios>> {
    let (h, w) = check_masks(masks)?;
    check_grid(h, w, grid)?;
    Ok(masks.iter().map(|m| pool_plane(&m.to_f64(), h, w, grid)).collect())
}

/// Reference per-pair path: copies both masks of every pair and pools each
/// copy, performing `2·|pairs|` pools.
pub fn ratios_per_pair(
    masks: &[BinaryMask],
    pairs: &[(usize, usize)],
    grid: (usize, usize),
) -> Result<Vec<(OverlapRatios, OverlapRatios)>> {
    let (h, w) = check_masks(masks)?;
    check_grid(h, w, grid)?;
    pairs
        .iter()
        .map(|&(s, o)| {
            for i in [s, o] {
                if i >= masks.len() {
                    return Err(Error::OutOfRange { index: i, len: masks.len() });
                }
            }
            let s_copy = masks[s].to_f64();
            let o_copy = masks[o].to_f64();
            Ok((pool_plane(&s_copy, h, w, grid), pool_plane(&o_copy, h, w, grid)))
        })
        .collect()
}

/// How mask logits become per-patch coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LogitPooling {
    /// Threshold the logits, then pool the binary mask.
    #[default]
    Binarized,
    /// Pool sigmoid probabilities directly.
    Soft,
}

fn logits_dims(logits: &Tensor) -> Result<(usize, usize, usize)> {
    match logits.shape() {
        &[n, h, w] => Ok((n, h, w)),
        s => Err(shape_err("ratios_from_logits", format!("expected N×H×W, got {s:?}"))),
    }
}

fn planes_to_ratios(
    planes: impl Iterator<Item = Vec<f64>>,
    h: usize,
    w: usize,
    grid: (usize, usize),
    threshold: f64,
    mode: LogitPooling,
) -> Vec<OverlapRatios> {
    planes
        .map(|p| {
            let v: Vec<f64> = match mode {
                LogitPooling::Binarized => p.iter().map(|&z| if z > threshold { 1.0 } else { 0.0 }).collect(),
                LogitPooling::Soft => p.iter().map(|&z| kernels::sigmoid(z)).collect(),
            };
            pool_plane(&v, h, w, grid)
        })
        .collect()
}

/// Low-resolution path: pools logits at their native resolution straight to
/// the patch grid, without upsampling to image size.
pub fn ratios_from_logits(logits: &Tensor, grid: (usize, usize), threshold: f64) -> Result<Vec<OverlapRatios>> {
    ratios_from_logits_with(logits, grid, threshold, LogitPooling::Binarized)
}

pub fn ratios_from_logits_with(
    logits: &Tensor,
    grid: (usize, usize),
    threshold: f64,
    mode: LogitPooling,
) -> Result<Vec<OverlapRatios>> {
    let (_, h, w) = logits_dims(logits)?;
    check_grid(h, w, grid)?;
    let planes = logits.data().chunks(h * w).map(<[f64]>::to_vec);
    Ok(planes_to_ratios(planes, h, w, grid, threshold, mode))
}

/// Upsampled path: bilinearly resizes every logit plane to `image`, then
/// binarizes and pools.
pub fn ratios_from_logits_upsampled(
    logits: &Tensor,
    image: (usize, usize),
    grid: (usize, usize),
    threshold: f64,
) -> Result<Vec<OverlapRatios>> {
    let (_, h, w) = logits_dims(logits)?;
    check_grid(image.0, image.1, grid)?;
    let planes = logits
        .data()
        .chunks(h * w)
        .map(|p| kernels::bilinear_resize(p, h, w, image.0, image.1));
    Ok(planes_to_ratios(planes, image.0, image.1, grid, threshold, LogitPooling::Binarized))
}

/// The three learnable embedding vectors, already recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MaskEmbedTokens<'t> {
    pub subject: Var<'t>,
    pub object: Var<'t>,
    pub background: Var<'t>,
}

/// Adds the weighted subject/object/background embedding to `patches`
/// (`P×D`, row-major over the ratio grid).
pub fn embed_pair<'t>(
    tape: &'t Tape,
    patches: Var<'t>,
    r_s: &OverlapRatios,
    r_o: &OverlapRatios,
    tokens: MaskEmbedTokens<'t>,
) -> Result<Var<'t>> {
    let shape = patches.shape();
    let (p, d) = match shape.as_slice() {
        &[p, d] => (p, d),
        s => return Err(shape_err("embed_pair", format!("patches must be P×D, got {s:?}"))),
    };
    if r_s.len() != p || r_o.len() != p {
        return Err(shape_err(
            "embed_pair",
            format!("{p} patches vs ratios {} / {}", r_s.len(), r_o.len()),
        ));
    }
    for t in [tokens.subject, tokens.object, tokens.background] {
        if t.numel() != d {
            return Err(shape_err("embed_pair", format!("token dim {} vs D={d}", t.numel())));
        }
    }
    let bg: Vec<f64> = r_s.values.iter().zip(&r_o.values).map(|(s, o)| 1.0 - s - o).collect();
    let ws = tape.constant(vec![p], r_s.values.clone())?;
    let wo = tape.constant(vec![p], r_o.values.clone())?;
    let wb = tape.constant(vec![p], bg)?;
    patches
        .add(outer(ws, tokens.subject))?
        .add(outer(wo, tokens.object))?
        .add(outer(wb, tokens.background))
}

//! Frozen stand-in for the segmentation backbone.
//!
//! A small random ViT produces multi-block patch features, [`Repatch`]
//! regrids them for the neck, and [`simulate_inferred_masks`] perturbs
//! ground-truth masks the way an imperfect segmenter would.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::layers::{Bound, Linear};
use crate::mask_embed::BinaryMask;
use crate::numerics::kernels::{gelu, gemm, layernorm, softmax};
use crate::numerics::{randn, ParamSet, Tensor, Var};
use crate::tome;

/// Mask logits live at `1 / LOGIT_STRIDE` of the image resolution.
pub const LOGIT_STRIDE: usize = 4;

/// RGB image, row-major `height × width × 3`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl SyntheticImage {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Self {
            height,
            width,
            pixels: rgb.iter().copied().cycle().take(height * width * 3).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        3
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 0-based block indices whose outputs are stacked.
    pub taps: Vec<usize>,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            dim: 48,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            taps: vec![0, 1, 2, 3],
            seed: 0x5eed,
        }
    }

    /// Full-size layout: 640² input, 16-pixel patches, 12 blocks of width
    /// 192, taps after blocks 2, 5, 8 and 11 (1-based 3, 6, 9, 12).
    pub fn full() -> Self {
        Self {
            image_size: 640,
            patch: 16,
            dim: 192,
            depth: 12,
            heads: 3,
            mlp_ratio: 4,
            taps: vec![2, 5, 8, 11],
            seed: 0x5eed,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// `(channels, grid, grid)` of the stacked features.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        (self.taps.len() * self.dim, self.grid(), self.grid())
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("dim {} vs heads {}", self.dim, self.heads)));
        }
        if self.taps.is_empty() || self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("taps must be non-empty and increasing".into()));
        }
        if let Some(&t) = self.taps.iter().find(|&&t| t >= self.depth) {
            return Err(Error::OutOfRange { index: t, len: self.depth });
        }
        Ok(())
    }
}

/// Channel-major `channels × grid_h × grid_w` stack of tapped patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Vec<f64>,
}

impl FeatureStack {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.grid_h, self.grid_w)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.grid_h + y) * self.grid_w + x]
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln1: (Vec<f64>, Vec<f64>),
    qkv: (Vec<f64>, Vec<f64>),
    out: (Vec<f64>, Vec<f64>),
    ln2: (Vec<f64>, Vec<f64>),
    fc1: (Vec<f64>, Vec<f64>),
    fc2: (Vec<f64>, Vec<f64>),
}

/// Randomly initialized, never-trained ViT encoder.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    cfg: EncoderConfig,
    patch_embed: (Vec<f64>, Vec<f64>),
    cls: Vec<f64>,
    pos: Vec<f64>,
    blocks: Vec<EncoderBlock>,
}

fn dense(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> (Vec<f64>, Vec<f64>) {
    let w = randn(rng, &[fan_in, fan_out], gain / (fan_in as f64).sqrt()).into_data();
    (w, vec![0.0; fan_out])
}

fn apply_dense(x: &[f64], rows: usize, layer: &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let out_dim = layer.1.len();
    let in_dim = layer.0.len() / out_dim;
    let mut y: Vec<f64> = layer.1.iter().copied().cycle().take(rows * out_dim).collect();
    gemm(rows, in_dim, out_dim, x, false, &layer.0, false, &mut y, true);
    y
}

impl FrozenEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.dim;
        let tokens = cfg.grid() * cfg.grid() + 1;
        let patch_embed = dense(&mut rng, 3 * cfg.patch * cfg.patch, d, 1.0);
        let cls = randn(&mut rng, &[d], 0.5).into_data();
        let pos = randn(&mut rng, &[tokens, d], 0.5).into_data();
        let blocks = (0..cfg.depth)
            .map(|_| EncoderBlock {
                ln1: (vec![1.0; d], vec![0.0; d]),
                qkv: dense(&mut rng, d, 3 * d, 1.0),
                out: dense(&mut rng, d, d, 0.5),
                ln2: (vec![1.0; d], vec![0.0; d]),
                fc1: dense(&mut rng, d, d * cfg.mlp_ratio, 1.0),
                fc2: dense(&mut rng, d * cfg.mlp_ratio, d, 0.5),
            })
            .collect();
        Ok(Self {
            cfg,
            patch_embed,
            cls,
            pos,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn params(&self) -> impl Iterator<Item = &[f64]> {
        let head = [&self.patch_embed.0, &self.patch_embed.1, &self.cls, &self.pos];
        head.into_iter().map(Vec::as_slice).chain(self.blocks.iter().flat_map(|b| {
            [&b.ln1, &b.qkv, &b.out, &b.ln2, &b.fc1, &b.fc2]
                .into_iter()
                .flat_map(|(w, bias)| [w.as_slice(), bias.as_slice()])
        }))
    }

    pub fn num_params(&self) -> usize {
        self.params().map(<[f64]>::len).sum()
    }

    /// SHA-256 over every parameter in a fixed order, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn embed_patches(&self, image: &SyntheticImage) -> Vec<f64> {
        let (p, g, d) = (self.cfg.patch, self.cfg.grid(), self.cfg.dim);
        let mut flat = Vec::with_capacity(g * g * 3 * p * p);
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..3 {
                    for y in gy * p..(gy + 1) * p {
                        for x in gx * p..(gx + 1) * p {
                            flat.push(image.get(y, x)[c] as f64 / 255.0 - 0.5);
                        }
                    }
                }
            }
        }
        let patches = apply_dense(&flat, g * g, &self.patch_embed);
        let mut x = Vec::with_capacity((g * g + 1) * d);
        x.extend_from_slice(&self.cls);
        x.extend_from_slice(&patches);
        x.iter_mut().zip(&self.pos).for_each(|(v, p)| *v += p);
        x
    }

    fn attention(&self, blk: &EncoderBlock, x: &Tensor) -> Result<Tensor> {
        let (l, d) = (x.shape()[0], self.cfg.dim);
        let h = self.cfg.heads;
        let dh = d / h;
        let qkv = apply_dense(x.data(), l, &blk.qkv);
        let head = |which: usize, i: usize| -> Vec<f64> {
            let off = which * d + i * dh;
            (0..l).flat_map(|r| qkv[r * 3 * d + off..r * 3 * d + off + dh].iter().copied()).collect()
        };
        let mut merged = vec![0.0; l * d];
        let scale = 1.0 / (dh as f64).sqrt();
        for i in 0..h {
            let (q, k, v) = (head(0, i), head(1, i), head(2, i));
            let mut s = vec![0.0; l * l];
            gemm(l, dh, l, &q, false, &k, true, &mut s, false);
            s.iter_mut().for_each(|v| *v *= scale);
            let p = softmax(&s, l, l, 1);
            let mut o = vec![0.0; l * dh];
            gemm(l, l, dh, &p, false, &v, false, &mut o, false);
            for r in 0..l {
                merged[r * d + i * dh..r * d + (i + 1) * dh].copy_from_slice(&o[r * dh..(r + 1) * dh]);
            }
        }
        Tensor::new(vec![l, d], apply_dense(&merged, l, &blk.out))
    }

    /// Runs the encoder and stacks the patch tokens of every tapped block.
    ///
    /// With `tome_ratio > 0` every attention layer runs on merged tokens
    /// (class token protected) and is unmerged right after.
    pub fn extract_features(&self, image: &SyntheticImage, tome_ratio: f64) -> Result<FeatureStack> {
        let s = self.cfg.image_size;
        if image.height != s || image.width != s {
            return Err(shape_err(
                "extract_features",
                format!("encoder expects {s}x{s}, got {}x{}", image.height, image.width),
            ));
        }
        let (g, d) = (self.cfg.grid(), self.cfg.dim);
        let l = g * g + 1;
        let mut x = self.embed_patches(image);
        let mut stack = vec![0.0; self.cfg.taps.len() * d * g * g];
        let mut tap = 0;
        for (bi, blk) in self.blocks.iter().enumerate() {
            let (n1, _, _) = layernorm(&x, d, &blk.ln1.0, &blk.ln1.1);
            let n1 = Tensor::new(vec![l, d], n1)?;
            let a = tome::wrapped_attention(&n1, tome_ratio, &[0], |t| self.attention(blk, t))?;
            x.iter_mut().zip(a.data()).for_each(|(v, a)| *v += a);
            let (n2, _, _) = layernorm(&x, d, &blk.ln2.0, &blk.ln2.1);
            let mut hdn = apply_dense(&n2, l, &blk.fc1);
            hdn.iter_mut().for_each(|v| *v = gelu(*v));
            let m = apply_dense(&hdn, l, &blk.fc2);
            x.iter_mut().zip(&m).for_each(|(v, m)| *v += m);

            if self.cfg.taps.get(tap) == Some(&bi) {
                // Patch tokens only: row 0 is the class token.
                for p in 0..g * g {
                    for c in 0..d {
                        stack[((tap * d + c) * g * g) + p] = x[(p + 1) * d + c];
                    }
                }
                tap += 1;
            }
        }
        Ok(FeatureStack {
            channels: self.cfg.taps.len() * d,
            grid_h: g,
            grid_w: g,
            data: stack,
        })
    }
}

/// Multiply-accumulates of one encoder pass, counting merged attention
/// (`tome_ratio`) and the similarity products used to plan merges.
pub fn encoder_mac_estimate(cfg: &EncoderConfig, tome_ratio: f64) -> u64 {
    let g = cfg.grid();
    let l = (g * g + 1) as u64;
    let lm = tome::merged_len(g * g + 1, 1, tome_ratio) as u64;
    let d = cfg.dim as u64;
    let m = d * cfg.mlp_ratio as u64;
    let embed = (g * g) as u64 * (3 * cfg.patch * cfg.patch) as u64 * d;
    let free = (g * g) as u64;
    let plan = if lm < l { free.div_ceil(2) * (free / 2) * d } else { 0 };
    let attn = 4 * lm * d * d + 2 * lm * lm * d;
    embed + cfg.depth as u64 * (plan + attn + 2 * l * d * m)
}

/// Flattens non-overlapping `k×k` windows of the stack for an
/// `out_grid` regrid (`k = grid / out`, trailing rows/cols dropped).
/// Rows are row-major over the output grid; each row is channel-major then
/// window-row then window-col.
pub fn window_flatten(stack: &FeatureStack, out_grid: (usize, usize)) -> Result<Tensor> {
    let (oh, ow) = out_grid;
    if oh == 0 || ow == 0 || oh > stack.grid_h || ow > stack.grid_w {
        return Err(shape_err(
            "repatch",
            format!("output grid {oh}x{ow} vs feature grid {}x{}", stack.grid_h, stack.grid_w),
        ));
    }
    let (kh, kw) = (stack.grid_h / oh, stack.grid_w / ow);
    let width = stack.channels * kh * kw;
    let mut out = Vec::with_capacity(oh * ow * width);
    for gy in 0..oh {
        for gx in 0..ow {
            for c in 0..stack.channels {
                for y in gy * kh..(gy + 1) * kh {
                    for x in gx * kw..(gx + 1) * kw {
                        out.push(stack.at(c, y, x));
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh * ow, width], out)
}

/// Learned projection from flattened windows to neck width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Repatch {
    pub proj: Linear,
    pub out_grid: (usize, usize),
}

impl Repatch {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        stack_shape: (usize, usize, usize),
        out_grid: (usize, usize),
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let (c, h, w) = stack_shape;
        let k = (h / out_grid.0) * (w / out_grid.1);
        Self {
            proj: Linear::init(ps, "repatch.proj", c * k, dim, rng),
            out_grid,
        }
    }

    /// `P×D` patch tokens for the neck.
    pub fn forward<'t>(&self, b: &Bound<'t>, stack: &FeatureStack) -> Result<Var<'t>> {
        let flat = window_flatten(stack, self.out_grid)?;
        if flat.shape()[1] != self.proj.fan_in {
            return Err(shape_err(
                "repatch",
                format!("window width {} vs projection {}", flat.shape()[1], self.proj.fan_in),
            ));
        }
        let leaf = b.tape().leaf(&flat);
        self.proj.forward(b, leaf)
    }
}

/// Segmenter output: pixel-disjoint masks plus optional low-res logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticOutput {
    pub masks: Vec<BinaryMask>,
    /// `N × H/stride × W/stride`.
    pub logits: Option<Tensor>,
}

impl PanopticOutput {
    pub fn from_masks(masks: Vec<BinaryMask>) -> Result<Self> {
        let logits = mask_logits(&masks, LOGIT_STRIDE)?;
        Ok(Self {
            masks,
            logits: Some(logits),
        })
    }

    /// Every pixel owned by at most one mask.
    pub fn is_disjoint(&self) -> bool {
        let Some(first) = self.masks.first() else {
            return true;
        };
        (0..first.bits.len()).all(|i| self.masks.iter().filter(|m| m.bits[i]).count() <= 1)
    }
}

/// Low-resolution logits: `10·(coverage − 0.5)` of each `stride×stride`
/// cell.
pub fn mask_logits(masks: &[BinaryMask], stride: usize) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no masks".into()))?;
    let (h, w) = (first.height / stride, first.width / stride);
    let mut out = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        let cov = crate::numerics::kernels::avg_pool2d(&m.to_f64(), 1, m.height, m.width, h, w);
        out.extend(cov.iter().map(|c| 10.0 * (c - 0.5)));
    }
    Tensor::new(vec![masks.len(), h, w], out)
}

/// BFS distance (4-neighbourhood) of every pixel to the nearest pixel
/// with `seed[i] == true`; pixels outside the image count as seeds when
/// `border_is_seed`.
fn distance_field(h: usize, w: usize, seed: &[bool], border_is_seed: bool) -> Vec<usize> {
    let mut dist = vec![usize::MAX; h * w];
    let mut q = VecDeque::new();
    for i in 0..h * w {
        let (y, x) = (i / w, i % w);
        if seed[i] {
            dist[i] = 0;
            q.push_back(i);
        } else if border_is_seed && (y == 0 || x == 0 || y == h - 1 || x == w - 1) {
            dist[i] = 1;
            q.push_back(i);
        }
    }
    while let Some(i) = q.pop_front() {
        let (y, x) = (i / w, i % w);
        let mut visit = |j: usize| {
            if dist[j] == usize::MAX {
                dist[j] = dist[i] + 1;
                q.push_back(j);
            }
        };
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
    }
    dist
}

/// Perturbs ground-truth masks to an expected IoU of about `1 − jitter`.
///
/// Each mask of area `A` loses its `k = A·j/(2−j)` most-boundary pixels and
/// gains `k` nearby background pixels, so `(A−k)/(A+k) = 1−j`. Ordering uses
/// distance to the boundary plus uniform noise; a background pixel claimed
/// by several masks goes to the lowest key. Every mask keeps at least one
/// pixel.
pub fn simulate_inferred_masks(gt: &PanopticOutput, jitter: f64, seed: u64) -> Result<PanopticOutput> {
    if !(0.0..=1.0).contains(&jitter) {
        return Err(Error::InvalidArgument(format!("jitter {jitter} outside [0, 1]")));
    }
    if jitter == 0.0 || gt.masks.is_empty() {
        return Ok(gt.clone());
    }
    let (h, w) = (gt.masks[0].height, gt.masks[0].width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background: Vec<bool> = (0..h * w).map(|i| gt.masks.iter().all(|m| !m.bits[i])).collect();

    let mut out: Vec<BinaryMask> = gt.masks.clone();
    // Best (key, mask) claim on every background pixel.
    let mut claims: Vec<Option<(f64, usize)>> = vec![None; h * w];
    for (mi, m) in gt.masks.iter().enumerate() {
        let area = m.area();
        if area == 0 {
            continue;
        }
        let k = (area as f64 * jitter / (2.0 - jitter)).round() as usize;

        let outside: Vec<bool> = m.bits.iter().map(|b| !b).collect();
        let depth = distance_field(h, w, &outside, true);
        let mut inner: Vec<(f64, usize)> = (0..h * w)
            .filter(|&i| m.bits[i])
            .map(|i| (depth[i] as f64 + rng.random::<f64>() * 1.5, i))
            .collect();
        inner.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in inner.iter().take(k.min(area - 1)) {
            out[mi].bits[i] = false;
        }

        let reach = distance_field(h, w, &m.bits, false);
        let mut shell: Vec<(f64, usize)> = (0..h * w)
            .filter(|&i| background[i] && reach[i] != usize::MAX)
            .map(|i| (reach[i] as f64 + rng.random::<f64>() * 1.5, i))
            .collect();
        shell.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(key, i) in shell.iter().take(k) {
            if claims[i].is_none_or(|(best, _)| key < best) {
                claims[i] = Some((key, mi));
            }
        }
    }
    for (i, c) in claims.iter().enumerate() {
        if let Some((_, mi)) = c {
            out[*mi].bits[i] = true;
        }
    }
    PanopticOutput::from_masks(out)
}

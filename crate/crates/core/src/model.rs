//! End-to-end relation model: frozen encoder, regrid, mask embedding,
//! pruned neck and the gated bidirectional head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{encoder_mac_estimate, EncoderConfig, FeatureStack, FrozenEncoder, PanopticOutput, Repatch, SyntheticImage};
use crate::bidir_head::{predict_bidirectional, BidirLogits, GateParams, RelHeadParams, DEFAULT_LAMBDA_CONS};
use crate::counters;
use crate::error::{Error, Result};
use crate::layers::Bound;
use crate::mask_embed::{
    embed_pair, ratios_from_logits, ratios_from_logits_upsampled, ratios_pooled, MaskEmbedTokens, OverlapRatios,
};
use crate::neck::{flop_estimate, neck_forward, surviving_patches, prune_patches, NeckConfig, NeckParams, TokenSequence};
use crate::numerics::kernels::sigmoid;
use crate::numerics::{randn, ParamId, ParamSet, Tape, Var};
use crate::sgeval::PredTriplet;

/// Where per-patch overlap ratios come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RatioSource {
    /// Pool the binary masks at image resolution.
    #[default]
    Masks,
    /// Binarize low-resolution logits and pool them directly.
    LowResLogits,
    /// Upsample logits to image size, then binarize and pool.
    UpsampledLogits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub neck: NeckConfig,
    /// Patch grid seen by the neck.
    pub grid: (usize, usize),
    pub num_predicates: usize,
    pub lambda_cons: f64,
    pub prune: bool,
    pub tome_ratio: f64,
    pub ratio_source: RatioSource,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk(num_predicates: usize) -> Self {
        let encoder = EncoderConfig::desk();
        let g = encoder.grid();
        Self {
            encoder,
            neck: NeckConfig::desk(),
            grid: (g, g),
            num_predicates,
            lambda_cons: DEFAULT_LAMBDA_CONS,
            prune: true,
            tome_ratio: 0.0,
            ratio_source: RatioSource::Masks,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.neck.validate()?;
        let g = self.encoder.grid();
        if self.grid.0 == 0 || self.grid.1 == 0 || self.grid.0 > g || self.grid.1 > g {
            return Err(Error::InvalidArgument(format!(
                "neck grid {:?} vs feature grid {g}",
                self.grid
            )));
        }
        if self.num_predicates == 0 {
            return Err(Error::InvalidArgument("num_predicates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.tome_ratio) {
            return Err(Error::InvalidArgument(format!("tome ratio {} outside [0, 1)", self.tome_ratio)));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Trainable parameter handles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelParams {
    pub repatch: Repatch,
    pub pos_embed: ParamId,
    pub subject_token: ParamId,
    pub object_token: ParamId,
    pub background_token: ParamId,
    pub neck: NeckParams,
    pub gate: GateParams,
    pub head: RelHeadParams,
}

#[derive(Debug, Clone)]
pub struct RelationModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub ids: ModelParams,
    pub encoder: FrozenEncoder,
}

/// Everything about one image that does not depend on the pair: backbone
/// features and each instance's overlap ratios (pooled once).
#[derive(Debug, Clone)]
pub struct ImageContext {
    pub features: FeatureStack,
    pub ratios: Vec<OverlapRatios>,
    pub instance_ids: Vec<usize>,
}

/// Predicate logits for one evaluated ordered pair `(s0, s1)`; `z_bwd` is
/// empty for unidirectional passes.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    pub s0: usize,
    pub s1: usize,
    pub z_fwd: Vec<f64>,
    pub z_bwd: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceOptions {
    /// One pass per unordered pair; otherwise one pass per ordered pair.
    pub bidirectional: bool,
    /// Use the larger instance id as `S0`.
    pub swap_order: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            bidirectional: true,
            swap_order: false,
        }
    }
}

impl RelationModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = FrozenEncoder::new(cfg.encoder.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamSet::new();
        let d = cfg.neck.dim;
        let repatch = Repatch::init(&mut ps, cfg.encoder.feature_shape(), cfg.grid, d, &mut rng);
        let pos_embed = ps.add("embed.pos", randn(&mut rng, &[cfg.num_patches(), d], 0.02));
        let subject_token = ps.add("embed.subject", randn(&mut rng, &[d], 0.02));
        let object_token = ps.add("embed.object", randn(&mut rng, &[d], 0.02));
        let background_token = ps.add("embed.background", randn(&mut rng, &[d], 0.02));
        let neck = NeckParams::init(&mut ps, &cfg.neck, &mut rng)?;
        let gate = GateParams::init(&mut ps, d, &mut rng);
        let head = RelHeadParams::init(&mut ps, d, cfg.num_predicates, &mut rng);
        Ok(Self {
            cfg,
            params: ps,
            ids: ModelParams {
                repatch,
                pos_embed,
                subject_token,
                object_token,
                background_token,
                neck,
                gate,
                head,
            },
            encoder,
        })
    }

    /// Runs the frozen encoder and computes every instance's ratios once.
    pub fn prepare(&self, image: &SyntheticImage, panoptic: &PanopticOutput) -> Result<ImageContext> {
        let features = self.encoder.extract_features(image, self.cfg.tome_ratio)?;
        let ratios = self.ratios(image, panoptic)?;
        Ok(ImageContext {
            features,
            ratios,
            instance_ids: panoptic.masks.iter().map(|m| m.instance_id).collect(),
        })
    }

    pub fn ratios(&self, image: &SyntheticImage, panoptic: &PanopticOutput) -> Result<Vec<OverlapRatios>> {
        if panoptic.masks.is_empty() {
            return Ok(Vec::new());
        }
        let logits = || {
            panoptic
                .logits
                .as_ref()
                .ok_or_else(|| Error::Data("ratio source needs mask logits".into()))
        };
        match self.cfg.ratio_source {
            RatioSource::Masks => ratios_pooled(&panoptic.masks, self.cfg.grid),
            RatioSource::LowResLogits => ratios_from_logits(logits()?, self.cfg.grid, 0.0),
            RatioSource::UpsampledLogits => {
                ratios_from_logits_upsampled(logits()?, (image.height, image.width), self.cfg.grid, 0.0)
            }
        }
    }

    /// Regridded patch tokens plus the positional embedding, `P×D`.
    pub fn patch_tokens<'t>(&self, b: &Bound<'t>, ctx: &ImageContext) -> Result<Var<'t>> {
        self.ids.repatch.forward(b, &ctx.features)?.add(b.get(self.ids.pos_embed))
    }

    /// Neck input for the ordered pair `(s, o)` (indices into the context).
    pub fn pair_tokens<'t>(
        &self,
        b: &Bound<'t>,
        patches: Var<'t>,
        ctx: &ImageContext,
        s: usize,
        o: usize,
    ) -> Result<TokenSequence<'t>> {
        for i in [s, o] {
            if i >= ctx.ratios.len() {
                return Err(Error::OutOfRange {
                    index: i,
                    len: ctx.ratios.len(),
                });
            }
        }
        let tokens = MaskEmbedTokens {
            subject: b.get(self.ids.subject_token),
            object: b.get(self.ids.object_token),
            background: b.get(self.ids.background_token),
        };
        let (r_s, r_o) = (&ctx.ratios[s], &ctx.ratios[o]);
        let embedded = embed_pair(b.tape(), patches, r_s, r_o, tokens)?;
        let seq = TokenSequence::new(
            b.get(self.ids.neck.class_token),
            b.get(self.ids.neck.location_token),
            embedded,
        )?;
        if self.cfg.prune {
            prune_patches(&seq, r_s, r_o)
        } else {
            Ok(seq)
        }
    }

    /// One neck + head pass for the ordered pair `(s, o)`.
    pub fn pair_forward<'t>(
        &self,
        b: &Bound<'t>,
        patches: Var<'t>,
        ctx: &ImageContext,
        s: usize,
        o: usize,
    ) -> Result<BidirLogits<'t>> {
        counters::add_head_pass();
        let seq = self.pair_tokens(b, patches, ctx, s, o)?;
        let x = neck_forward(b, &self.ids.neck, &seq, &self.cfg.neck)?;
        predict_bidirectional(b, x, &self.ids.gate, &self.ids.head)
    }

    /// Class-token feature for `(s, o)` without touching the head or the
    /// pass counter.
    pub fn pair_feature<'t>(
        &self,
        b: &Bound<'t>,
        patches: Var<'t>,
        ctx: &ImageContext,
        s: usize,
        o: usize,
    ) -> Result<Var<'t>> {
        let seq = self.pair_tokens(b, patches, ctx, s, o)?;
        neck_forward(b, &self.ids.neck, &seq, &self.cfg.neck)
    }

    /// The comprehensive graph over all instance pairs of one image.
    pub fn infer_pairs(&self, ctx: &ImageContext, opts: InferenceOptions) -> Result<Vec<PairPrediction>> {
        let n = ctx.ratios.len();
        let tape = Tape::new();
        let b = Bound::new(&tape, &self.params);
        let patches = self.patch_tokens(&b, ctx)?;
        let mut out = Vec::new();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| ctx.instance_ids[i]);
        if opts.swap_order {
            order.reverse();
        }
        for (a, &i) in order.iter().enumerate() {
            for (c, &j) in order.iter().enumerate() {
                let run = if opts.bidirectional { a < c } else { a != c };
                if !run {
                    continue;
                }
                let z = self.pair_forward(&b, patches, ctx, i, j)?;
                out.push(PairPrediction {
                    s0: i,
                    s1: j,
                    z_fwd: z.z_fwd.data(),
                    z_bwd: if opts.bidirectional { z.z_bwd.data() } else { Vec::new() },
                });
            }
        }
        Ok(out)
    }

    pub fn infer_scene(
        &self,
        image: &SyntheticImage,
        panoptic: &PanopticOutput,
        opts: InferenceOptions,
    ) -> Result<Vec<PredTriplet>> {
        let ctx = self.prepare(image, panoptic)?;
        Ok(pair_triplets(&self.infer_pairs(&ctx, opts)?))
    }

    pub fn lambda_cons(&self) -> f64 {
        self.cfg.lambda_cons
    }

    /// Patch tokens the neck sees for `(s, o)` after optional pruning.
    pub fn pair_patch_count(&self, ctx: &ImageContext, s: usize, o: usize) -> usize {
        if self.cfg.prune {
            surviving_patches(&ctx.ratios[s], &ctx.ratios[o]).len()
        } else {
            self.cfg.num_patches()
        }
    }

    /// Estimated FLOPs of one scene: encoder plus one neck pass per
    /// evaluated pair (heads and norms excluded).
    pub fn scene_flops(&self, ctx: &ImageContext, opts: InferenceOptions) -> u64 {
        let n = ctx.ratios.len();
        let mut neck = 0;
        for s in 0..n {
            for o in 0..n {
                if s != o && (!opts.bidirectional || s < o) {
                    neck += flop_estimate(self.pair_patch_count(ctx, s, o), &self.cfg.neck);
                }
            }
        }
        2 * encoder_mac_estimate(&self.cfg.encoder, self.cfg.tome_ratio) + neck
    }
}

/// Every predicate of every evaluated direction as a triplet scored by
/// `σ(logit)`.
pub fn pair_triplets(preds: &[PairPrediction]) -> Vec<PredTriplet> {
    let mut out = Vec::new();
    for p in preds {
        for (k, &z) in p.z_fwd.iter().enumerate() {
            out.push(PredTriplet::new(p.s0, p.s1, k, sigmoid(z)));
        }
        for (k, &z) in p.z_bwd.iter().enumerate() {
            out.push(PredTriplet::new(p.s1, p.s0, k, sigmoid(z)));
        }
    }
    out
}

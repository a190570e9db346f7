//! Conditioning assembly: exemplar composite -> feature maps -> frequency
//! split -> pooled prototypes -> resampled frequency tokens -> token stacks
//! and coherence maps, everything on the tape so gradients reach the whole
//! conditioning stack.

use super::unet::FicgenModel;
use crate::error::Result;
use crate::exemplar::{compose_exemplars, ExemplarBank};
use crate::freq::graph::{split_frequency_var, DftConsts};
use crate::layout::LayoutSpec;
use crate::nn::Ctx;
use crate::num::Real;
use crate::resampler::{resample_all, FrequencyTokenVars};
use crate::tensor::{ops, Tape, Var};
use crate::vfea::{build_tokens, coherence_maps, CoherenceMaps, ConditioningTokenVars};
use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Conditioning vars for one forward pass.
pub struct FicgenCondVars<'t, F: Real> {
    pub tokens: ConditioningTokenVars<'t, F>,
    /// Concatenation of every token stack, for the plain-attention ablation.
    pub all_tokens: Var<'t, F>,
    pub maps8: CoherenceMaps,
    pub maps16: CoherenceMaps,
}

/// Build the full conditioning graph for a layout. `scene` supplies the
/// background exemplar during training; at sampling time it is absent and a
/// blank canvas stands in.
pub fn build_cond<'t, F: Real>(
    ctx: &Ctx<'t, F>,
    model: &FicgenModel,
    layout: &LayoutSpec,
    bank: &ExemplarBank,
    scene: Option<&Array3<F>>,
    rng: &mut ChaCha8Rng,
) -> Result<FicgenCondVars<'t, F>> {
    let cfg = &model.cfg;
    let composite = compose_exemplars(layout, scene, bank, cfg.image_size, rng)?;

    // per-instance HF prototypes from canonical crops, resized to the
    // encoder's input size when the bank's canonical size differs
    let crop_feat = cfg.crop_size / 8;
    let k_crop = DftConsts::<F>::new(crop_feat, crop_feat);
    let hf_w = ctx.param("ficgen.freq.hf_w");
    let lf_w = ctx.param("ficgen.freq.lf_w");
    let proj = ctx.param("ficgen.freq.proto_proj");
    let mut instance_protos = Vec::with_capacity(layout.n());
    for crop in &composite.per_instance_crops {
        let crop = if crop.dim().1 == cfg.crop_size && crop.dim().2 == cfg.crop_size {
            crop.clone()
        } else {
            crate::imgutil::resize_bilinear(crop, cfg.crop_size, cfg.crop_size)
        };
        let x = ctx.tape.constant(crop.into_dyn());
        let feats = model.exemplar_enc.fwd(ctx, x);
        let (hf, _lf) = split_frequency_var(&k_crop, feats, cfg.gamma, hf_w, lf_w);
        let proto = hf
            .spatial_mean()
            .reshape(&[1, cfg.feat_channels])
            .matmul(proj)
            .reshape(&[cfg.d]);
        instance_protos.push(proto);
    }

    // context LF prototype from the background canvas
    let bg_feat = cfg.image_size / 8;
    let k_bg = DftConsts::<F>::new(bg_feat, bg_feat);
    let bg = ctx.tape.constant(composite.background.clone().into_dyn());
    let bg_feats = model.exemplar_enc.fwd(ctx, bg);
    let (_bg_hf, bg_lf) = split_frequency_var(&k_bg, bg_feats, cfg.gamma, hf_w, lf_w);
    let context_proto = bg_lf
        .spatial_mean()
        .reshape(&[1, cfg.feat_channels])
        .matmul(proj)
        .reshape(&[cfg.d]);

    // dual-query resampling; the FPR-off ablation zeroes the tokens
    let freq_tokens = if cfg.use_fpr {
        resample_all(ctx, &model.hf_res, &model.lf_res, &instance_protos, context_proto)
    } else {
        let zeros = || {
            ctx.tape
                .constant(ArrayD::<F>::zeros(IxDyn(&[cfg.m, cfg.d])))
        };
        FrequencyTokenVars {
            instance_tokens: (0..layout.n()).map(|_| zeros()).collect(),
            context_tokens: zeros(),
        }
    };

    let tokens = build_tokens(ctx, &model.vfea_shared, &freq_tokens, layout)?;
    let mut stacks: Vec<Var<'t, F>> = tokens.instance_stacks.clone();
    stacks.push(tokens.context_stack);
    let all_tokens = if stacks.len() == 1 {
        stacks[0]
    } else {
        ops::concat(&stacks, 0)
    };

    let ls = cfg.latent_size();
    Ok(FicgenCondVars {
        tokens,
        all_tokens,
        maps8: coherence_maps(layout, ls / 4, ls / 4)?,
        maps16: coherence_maps(layout, ls / 2, ls / 2)?,
    })
}

/// Plain-array snapshot of a conditioning build, for reuse across sampling
/// steps without re-running the conditioning graph.
#[derive(Debug, Clone)]
pub struct CondArrays<F: Real> {
    pub instance_stacks: Vec<ArrayD<F>>,
    pub context_stack: ArrayD<F>,
    pub all_tokens: ArrayD<F>,
    pub maps8: CoherenceMaps,
    pub maps16: CoherenceMaps,
}

impl<F: Real> CondArrays<F> {
    pub fn from_vars(cond: &FicgenCondVars<'_, F>) -> Self {
        Self {
            instance_stacks: cond
                .tokens
                .instance_stacks
                .iter()
                .map(|v| v.value())
                .collect(),
            context_stack: cond.tokens.context_stack.value(),
            all_tokens: cond.all_tokens.value(),
            maps8: cond.maps8.clone(),
            maps16: cond.maps16.clone(),
        }
    }
}

/// Re-wrap precomputed conditioning arrays as tape constants.
pub fn cond_consts<'t, F: Real>(tape: &'t Tape<F>, arrays: &CondArrays<F>) -> FicgenCondVars<'t, F> {
    FicgenCondVars {
        tokens: ConditioningTokenVars {
            instance_stacks: arrays
                .instance_stacks
                .iter()
                .map(|a| tape.constant(a.clone()))
                .collect(),
            context_stack: tape.constant(arrays.context_stack.clone()),
        },
        all_tokens: tape.constant(arrays.all_tokens.clone()),
        maps8: arrays.maps8.clone(),
        maps16: arrays.maps16.clone(),
    }
}

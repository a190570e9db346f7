//! Adaptive spatial-frequency aggregation: a spatial self-attention pathway
//! (SAM), a frequency-attention pathway over DFT bins (FAM), a depthwise (or
//! pointwise) fusion, and a per-location softmax over entity slots that
//! recombines the N instance features and the context feature.

use crate::error::{FicgenError, Result};
use crate::freq::graph::{dft_var, idft_im_var, idft_re_var, DftConsts};
use crate::nn::{AttnBlock, Ctx, DepthwiseConv, Linear, ParamGroup, ParamStore};
use crate::num::Real;
use crate::tensor::{ops, Var};
use crate::vfea::DegradedRepVars;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Fusion strategy for the SAM/FAM outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    Depthwise,
    Pointwise,
}

impl FusionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "depthwise" => Ok(FusionKind::Depthwise),
            "pointwise" => Ok(FusionKind::Pointwise),
            other => Err(FicgenError::Config(format!(
                "fusion must be 'depthwise' or 'pointwise', got '{other}'"
            ))),
        }
    }
}

/// One aggregation site at fixed latent channels and resolution.
#[derive(Debug, Clone)]
pub struct Asfa {
    pub name: String,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    sam: AttnBlock,
    fam: AttnBlock,
    zeta_dw: DepthwiseConv,
    zeta_pw: Linear,
    slot_proj: Linear,
    dft: DftConstsHolder,
}

/// DFT constants are scalar-typed; hold both precisions and pick at use.
#[derive(Debug, Clone)]
struct DftConstsHolder {
    h: usize,
    w: usize,
}

impl Asfa {
    pub fn new(name: &str, c: usize, h: usize, w: usize, heads: usize) -> Self {
        Self {
            name: name.to_string(),
            c,
            h,
            w,
            sam: AttnBlock::new(&format!("{name}.sam"), 2 * c, 2, heads),
            fam: AttnBlock::new(&format!("{name}.fam"), 4 * c, 2, heads),
            zeta_dw: DepthwiseConv::new(format!("{name}.zeta_dw"), 4 * c, 3),
            zeta_pw: Linear::new(format!("{name}.zeta_pw"), 4 * c, 4 * c),
            slot_proj: Linear::new(format!("{name}.slot_proj"), 5 * c, 1).zeroed(),
            dft: DftConstsHolder { h, w },
        }
    }

    pub fn register<F: Real>(&self, store: &mut ParamStore<F>, group: ParamGroup) {
        self.sam.register(store, group);
        self.fam.register(store, group);
        self.zeta_dw.register(store, group);
        self.zeta_pw.register(store, group);
        self.slot_proj.register(store, group);
    }

    /// Spatial pathway: self-attention over the `h*w` token grid with a
    /// residual connection.
    pub fn spatial_aggregate<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let s = x.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let toks = x.permute(&[1, 2, 0]).reshape(&[h * w, c]);
        let out = self.sam.fwd_self(ctx, toks);
        out.reshape(&[h, w, c]).permute(&[2, 0, 1])
    }

    /// Frequency pathway: centered DFT, self-attention over frequency bins
    /// (real/imaginary parts concatenated channel-wise) with residual, then
    /// the real part of the inverse transform.
    pub fn frequency_aggregate<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let (out, _) = self.frequency_aggregate_with_residue(ctx, x);
        out
    }

    /// As [`Self::frequency_aggregate`], also returning the discarded
    /// imaginary residue map for diagnostics.
    pub fn frequency_aggregate_with_residue<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        x: Var<'t, F>,
    ) -> (Var<'t, F>, Var<'t, F>) {
        let s = x.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let k = DftConsts::<F>::new(self.dft.h, self.dft.w);
        debug_assert_eq!((h, w), (self.dft.h, self.dft.w));
        let (re, im) = dft_var(&k, x);
        let spec = ops::concat(&[re, im], 0); // [2c, h, w]
        let toks = spec.permute(&[1, 2, 0]).reshape(&[h * w, 2 * c]);
        let out = self.fam.fwd_self(ctx, toks);
        let spec_out = out.reshape(&[h, w, 2 * c]).permute(&[2, 0, 1]);
        let re_out = spec_out.slice_axis0(0, c);
        let im_out = spec_out.slice_axis0(c, c);
        let spatial = idft_re_var(&k, re_out, im_out);
        let residue = idft_im_var(&k, re_out, im_out);
        (spatial, residue)
    }

    fn fuse<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        fusion_in: Var<'t, F>,
        fusion: FusionKind,
    ) -> Var<'t, F> {
        match fusion {
            FusionKind::Depthwise => self.zeta_dw.fwd(ctx, fusion_in),
            FusionKind::Pointwise => {
                let s = fusion_in.shape();
                let (c4, h, w) = (s[0], s[1], s[2]);
                let toks = fusion_in.permute(&[1, 2, 0]).reshape(&[h * w, c4]);
                self.zeta_pw
                    .fwd(ctx, toks)
                    .reshape(&[h, w, c4])
                    .permute(&[2, 0, 1])
            }
        }
    }

    /// Full aggregation. Returns the refined `[c,h,w]` representation.
    pub fn aggregate<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        rep: &DegradedRepVars<'t, F>,
        fusion: FusionKind,
    ) -> Var<'t, F> {
        self.aggregate_with_weights(ctx, rep, fusion).0
    }

    /// Aggregation that also returns the `[N+1, h, w]` slot weight maps
    /// (each location's weights sum to 1).
    pub fn aggregate_with_weights<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        rep: &DegradedRepVars<'t, F>,
        fusion: FusionKind,
    ) -> (Var<'t, F>, Var<'t, F>) {
        let s = rep.context_feat.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let n = rep.instance_feats.len();

        // pathway input: summed instances alongside the context map
        let pooled = if n == 0 {
            ctx.tape.constant(ArrayD::zeros(IxDyn(&[c, h, w])))
        } else {
            let mut acc = rep.instance_feats[0];
            for f in &rep.instance_feats[1..] {
                acc = acc.add(*f);
            }
            acc
        };
        let composite = ops::concat(&[pooled, rep.context_feat], 0); // [2c,h,w]
        let f_s = self.spatial_aggregate(ctx, composite);
        let f_f = self.frequency_aggregate(ctx, composite);
        let fusion_in = ops::concat(&[f_s, f_f], 0); // [4c,h,w]
        let delta_fusion = self.fuse(ctx, fusion_in, fusion);

        // per-slot logits from one shared scoring head over
        // [fused descriptor ; slot feature]
        let mut slots: Vec<Var<'t, F>> = rep.instance_feats.clone();
        slots.push(rep.context_feat);
        let mut logit_maps = Vec::with_capacity(slots.len());
        for &slot in &slots {
            let scored = ops::concat(&[delta_fusion, slot], 0); // [5c,h,w]
            let toks = scored.permute(&[1, 2, 0]).reshape(&[h * w, 5 * c]);
            let logit = self.slot_proj.fwd(ctx, toks); // [h*w, 1]
            logit_maps.push(logit.reshape(&[1, h * w]));
        }
        let logits = ops::concat(&logit_maps, 0); // [N+1, h*w]
        let weights = logits.permute(&[1, 0]).softmax_last().permute(&[1, 0]); // [N+1, h*w]

        // delta_final = sum_k w_k . F_k
        let mut delta: Option<Var<'t, F>> = None;
        for (k, &slot) in slots.iter().enumerate() {
            let wk = weights.slice_axis0(k, 1).reshape(&[h * w]);
            let weighted = slot.reshape(&[c, h * w]).mul_vec_last(wk);
            delta = Some(match delta {
                None => weighted,
                Some(acc) => acc.add(weighted),
            });
        }
        let out = delta.unwrap().reshape(&[c, h, w]);
        (out, weights.reshape(&[n + 1, h, w]))
    }
}

//! Dual-query mechanism: learnable query banks refined against frequency
//! prototypes through stacked cross-attention blocks, emitting
//! frequency-aware instance and context tokens.

use crate::nn::{AttnBlock, Ctx, Init, Linear, ParamGroup, ParamStore};
use crate::num::Real;
use crate::tensor::Var;

/// One resampler: `m` learnable queries, per-block key/value projections of
/// the prototype, `depth` cross-attention blocks. Residual output
/// projections start at zero, so the initial output equals the raw queries.
#[derive(Debug, Clone)]
pub struct Resampler {
    pub name: String,
    pub m: usize,
    pub d: usize,
    blocks: Vec<ResamplerBlock>,
}

#[derive(Debug, Clone)]
struct ResamplerBlock {
    phi_k: Linear,
    phi_v: Linear,
    attn: AttnBlock,
}

impl Resampler {
    pub fn new(name: &str, m: usize, d: usize, depth: usize, heads: usize) -> Self {
        assert!(m >= 1 && depth >= 1);
        let blocks = (0..depth)
            .map(|i| ResamplerBlock {
                phi_k: Linear::new(format!("{name}.blk{i}.phi_k"), d, d),
                phi_v: Linear::new(format!("{name}.blk{i}.phi_v"), d, d),
                attn: AttnBlock::new(&format!("{name}.blk{i}"), d, 2, heads),
            })
            .collect();
        Self {
            name: name.to_string(),
            m,
            d,
            blocks,
        }
    }

    pub fn register<F: Real>(&self, store: &mut ParamStore<F>, group: ParamGroup) {
        store.register(
            &format!("{}.queries", self.name),
            group,
            &[self.m, self.d],
            Init::Normal(0.02),
        );
        for b in &self.blocks {
            b.phi_k.register(store, group);
            b.phi_v.register(store, group);
            b.attn.register(store, group);
        }
    }

    /// Refine the query bank against one prototype vector `[d]`,
    /// producing `[m, d]` tokens.
    pub fn fwd<'t, F: Real>(&self, ctx: &Ctx<'t, F>, proto: Var<'t, F>) -> Var<'t, F> {
        let kv = proto.reshape(&[1, self.d]);
        let mut q = ctx.param(&format!("{}.queries", self.name));
        for b in &self.blocks {
            // keys/values from the projected prototype; the block's own
            // wk/wv then act on this length-1 sequence
            let k = b.phi_k.fwd(ctx, kv);
            let v = b.phi_v.fwd(ctx, kv);
            // fold both projections into the kv stream: concat is length-1,
            // so project separately and feed pre-projected tokens
            q = b.attn_fwd(ctx, q, k, v);
        }
        q
    }
}

impl ResamplerBlock {
    fn attn_fwd<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        x: Var<'t, F>,
        k: Var<'t, F>,
        v: Var<'t, F>,
    ) -> Var<'t, F> {
        let q = self.attn.wq.fwd(ctx, self.attn.norm_q.fwd(ctx, x));
        let kk = self.attn.wk.fwd(ctx, k);
        let vv = self.attn.wv.fwd(ctx, v);
        let out = crate::nn::attention(q, kk, vv, self.attn.heads);
        let x = x.add(self.attn.wo.fwd(ctx, out));
        let ff = self.attn.ff2.fwd(
            ctx,
            self.attn.ff1.fwd(ctx, self.attn.norm_ff.fwd(ctx, x)).silu(),
        );
        x.add(ff)
    }
}

/// Frequency tokens for a whole layout.
pub struct FrequencyTokenVars<'t, F: Real> {
    /// `N` stacks of `[m, d]` instance tokens.
    pub instance_tokens: Vec<Var<'t, F>>,
    /// `[m, d]` context tokens.
    pub context_tokens: Var<'t, F>,
}

/// Apply the HF resampler independently per instance prototype (shared
/// weights) and the LF resampler once to the context prototype.
pub fn resample_all<'t, F: Real>(
    ctx: &Ctx<'t, F>,
    hf: &Resampler,
    lf: &Resampler,
    instance_protos: &[Var<'t, F>],
    context_proto: Var<'t, F>,
) -> FrequencyTokenVars<'t, F> {
    let instance_tokens = instance_protos.iter().map(|&p| hf.fwd(ctx, p)).collect();
    let context_tokens = lf.fwd(ctx, context_proto);
    FrequencyTokenVars {
        instance_tokens,
        context_tokens,
    }
}

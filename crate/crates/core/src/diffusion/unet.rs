//! Three-level U-Net (32 -> 16 -> 8) over the packed latent, with the
//! conditioning stack injected after the 8x8 and 16x16 decoder blocks
//! through zero-initialized gates.

use super::cond::FicgenCondVars;
use super::ModelConfig;
use crate::asfa::Asfa;
use crate::exemplar::FeatureExtractor;
use crate::nn::{attention, Conv2dLayer, Ctx, Init, LayerNorm, Linear, ParamGroup, ParamStore};
use crate::num::Real;
use crate::resampler::Resampler;
use crate::tensor::{ops, Var};
use crate::vfea::{vfea_attend, VfeaShared, VfeaSite};
use ndarray::{ArrayD, IxDyn};

/// Conditioning given to one forward pass.
pub enum UnetCond<'a, 't, F: Real> {
    /// Unconditional path (classifier-free guidance branch).
    Null,
    /// Caption-only conditioning (backbone pretraining).
    CaptionOnly { caption: &'a [usize] },
    /// Full layout conditioning with the frequency stack.
    Full {
        caption: &'a [usize],
        ficgen: &'a FicgenCondVars<'t, F>,
    },
}

/// Normalize over channels at each spatial position.
fn chan_norm<'t, F: Real>(ctx: &Ctx<'t, F>, ln: &LayerNorm, x: Var<'t, F>) -> Var<'t, F> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    ln.fwd(ctx, x.permute(&[1, 2, 0]).reshape(&[h * w, c]))
        .reshape(&[h, w, c])
        .permute(&[2, 0, 1])
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: LayerNorm,
    conv1: Conv2dLayer,
    emb: Linear,
    norm2: LayerNorm,
    conv2: Conv2dLayer,
    skip: Option<Conv2dLayer>,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, tdim: usize) -> Self {
        Self {
            norm1: LayerNorm::new(format!("{name}.norm1"), cin),
            conv1: Conv2dLayer::new(format!("{name}.conv1"), cin, cout, 3, 1),
            emb: Linear::new(format!("{name}.emb"), tdim, cout),
            norm2: LayerNorm::new(format!("{name}.norm2"), cout),
            conv2: Conv2dLayer::new(format!("{name}.conv2"), cout, cout, 3, 1).zeroed(),
            skip: (cin != cout).then(|| Conv2dLayer::new(format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    fn register<F: Real>(&self, store: &mut ParamStore<F>, group: ParamGroup) {
        self.norm1.register(store, group);
        self.conv1.register(store, group);
        self.emb.register(store, group);
        self.norm2.register(store, group);
        self.conv2.register(store, group);
        if let Some(s) = &self.skip {
            s.register(store, group);
        }
    }

    fn fwd<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>, temb: Var<'t, F>) -> Var<'t, F> {
        let h = self.conv1.fwd(ctx, chan_norm(ctx, &self.norm1, x).silu());
        let bias = self.emb.fwd(ctx, temb.silu().reshape(&[1, temb.shape()[0]]));
        let cout = bias.shape()[1];
        let h = h.add_bias_first(bias.reshape(&[cout]));
        let h = self.conv2.fwd(ctx, chan_norm(ctx, &self.norm2, h).silu());
        match &self.skip {
            Some(s) => s.fwd(ctx, x).add(h),
            None => x.add(h),
        }
    }
}

/// Plain (unmasked, ungated) cross-attention over the concatenated token
/// set; the conditioning pathway of the masked-attention-off ablation.
#[derive(Debug, Clone)]
struct PlainCross {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl PlainCross {
    fn new(name: &str, c: usize, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(format!("{name}.q"), c, d),
            k: Linear::new(format!("{name}.k"), d, d),
            v: Linear::new(format!("{name}.v"), d, d),
            out: Linear::new(format!("{name}.out"), d, c).zeroed(),
            heads,
        }
    }

    fn register<F: Real>(&self, store: &mut ParamStore<F>, group: ParamGroup) {
        self.q.register(store, group);
        self.k.register(store, group);
        self.v.register(store, group);
        self.out.register(store, group);
    }

    fn fwd<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        latent: Var<'t, F>,
        tokens: Var<'t, F>,
    ) -> Var<'t, F> {
        let s = latent.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let q = self.q.fwd(ctx, latent.permute(&[1, 2, 0]).reshape(&[h * w, c]));
        let attn = attention(q, self.k.fwd(ctx, tokens), self.v.fwd(ctx, tokens), self.heads);
        self.out
            .fwd(ctx, attn)
            .reshape(&[h, w, c])
            .permute(&[2, 0, 1])
    }
}

/// The complete model: backbone U-Net plus the conditioning stack.
#[derive(Debug, Clone)]
pub struct FicgenModel {
    pub cfg: ModelConfig,
    // backbone
    conv_in: Conv2dLayer,
    enc0: ResBlock,
    down1: Conv2dLayer,
    enc1: ResBlock,
    down2: Conv2dLayer,
    mid: ResBlock,
    dec2: ResBlock,
    up1: Conv2dLayer,
    cat1: Conv2dLayer,
    dec1: ResBlock,
    up0: Conv2dLayer,
    cat0: Conv2dLayer,
    dec0: ResBlock,
    conv_out: Conv2dLayer,
    temb1: Linear,
    temb2: Linear,
    cap_proj: Linear,
    // conditioning stack
    pub exemplar_enc: FeatureExtractor,
    pub hf_res: Resampler,
    pub lf_res: Resampler,
    pub vfea_shared: VfeaShared,
    pub vfea8: VfeaSite,
    pub vfea16: VfeaSite,
    pub asfa8: Asfa,
    pub asfa16: Asfa,
    plain8: PlainCross,
    plain16: PlainCross,
}

const TEMB_FEAT: usize = 64;

impl FicgenModel {
    pub fn new(cfg: ModelConfig) -> Self {
        let [c0, c1, c2] = cfg.unet_channels;
        let tdim = c2;
        let lc = cfg.latent_channels();
        let ls = cfg.latent_size();
        let (s8, s16) = (ls / 4, ls / 2);
        Self {
            cfg: cfg.clone(),
            conv_in: Conv2dLayer::new("unet.conv_in", lc, c0, 3, 1),
            enc0: ResBlock::new("unet.enc0", c0, c0, tdim),
            down1: Conv2dLayer::new("unet.down1", c0, c1, 3, 2),
            enc1: ResBlock::new("unet.enc1", c1, c1, tdim),
            down2: Conv2dLayer::new("unet.down2", c1, c2, 3, 2),
            mid: ResBlock::new("unet.mid", c2, c2, tdim),
            dec2: ResBlock::new("unet.dec2", c2, c2, tdim),
            up1: Conv2dLayer::new("unet.up1", c2, c1, 3, 1),
            cat1: Conv2dLayer::new("unet.cat1", 2 * c1, c1, 3, 1),
            dec1: ResBlock::new("unet.dec1", c1, c1, tdim),
            up0: Conv2dLayer::new("unet.up0", c1, c0, 3, 1),
            cat0: Conv2dLayer::new("unet.cat0", 2 * c0, c0, 3, 1),
            dec0: ResBlock::new("unet.dec0", c0, c0, tdim),
            conv_out: Conv2dLayer::new("unet.conv_out", c0, lc, 3, 1).zeroed(),
            temb1: Linear::new("unet.temb1", TEMB_FEAT, tdim),
            temb2: Linear::new("unet.temb2", tdim, tdim),
            cap_proj: Linear::new("unet.cap_proj", tdim, tdim),
            exemplar_enc: FeatureExtractor::new(
                "ficgen.exemplar",
                (cfg.feat_mid[0], cfg.feat_mid[1]),
                cfg.feat_channels,
            ),
            hf_res: Resampler::new("ficgen.hf_res", cfg.m, cfg.d, cfg.depth, cfg.heads),
            lf_res: Resampler::new("ficgen.lf_res", cfg.m, cfg.d, cfg.depth, cfg.heads),
            vfea_shared: VfeaShared::new(
                "ficgen.vfea",
                cfg.d,
                cfg.n_freqs,
                cfg.num_classes,
                cfg.vocab_size,
            ),
            vfea8: VfeaSite::new("ficgen.vfea.site8", c2, cfg.d, cfg.heads),
            vfea16: VfeaSite::new("ficgen.vfea.site16", c1, cfg.d, cfg.heads),
            asfa8: Asfa::new("ficgen.asfa8", c2, s8, s8, cfg.heads),
            asfa16: Asfa::new("ficgen.asfa16", c1, s16, s16, cfg.heads),
            plain8: PlainCross::new("ficgen.plain8", c2, cfg.d, cfg.heads),
            plain16: PlainCross::new("ficgen.plain16", c1, cfg.d, cfg.heads),
        }
    }

    /// Register every parameter: backbone under [`ParamGroup::Backbone`],
    /// the conditioning stack under [`ParamGroup::Ficgen`].
    pub fn register<F: Real>(&self, store: &mut ParamStore<F>) {
        let bb = ParamGroup::Backbone;
        let fg = ParamGroup::Ficgen;
        let tdim = self.cfg.unet_channels[2];
        for blk in [
            &self.enc0, &self.enc1, &self.mid, &self.dec2, &self.dec1, &self.dec0,
        ] {
            blk.register(store, bb);
        }
        for conv in [
            &self.conv_in,
            &self.down1,
            &self.down2,
            &self.up1,
            &self.cat1,
            &self.up0,
            &self.cat0,
            &self.conv_out,
        ] {
            conv.register(store, bb);
        }
        self.temb1.register(store, bb);
        self.temb2.register(store, bb);
        self.cap_proj.register(store, bb);
        store.register(
            "unet.cap_embed",
            bb,
            &[self.cfg.vocab_size, tdim],
            Init::Normal(0.02),
        );
        store.register("unet.cap_null", bb, &[tdim], Init::Normal(0.02));

        self.exemplar_enc.register(store, fg);
        store.register(
            "ficgen.freq.hf_w",
            fg,
            &[self.cfg.feat_channels],
            Init::Ones,
        );
        store.register(
            "ficgen.freq.lf_w",
            fg,
            &[self.cfg.feat_channels],
            Init::Ones,
        );
        store.register(
            "ficgen.freq.proto_proj",
            fg,
            &[self.cfg.feat_channels, self.cfg.d],
            Init::FanIn(self.cfg.feat_channels),
        );
        self.hf_res.register(store, fg);
        self.lf_res.register(store, fg);
        self.vfea_shared.register(store, fg);
        self.vfea8.register(store, fg);
        self.vfea8.register_gate(store, fg);
        self.vfea16.register(store, fg);
        self.vfea16.register_gate(store, fg);
        self.asfa8.register(store, fg);
        self.asfa16.register(store, fg);
        self.plain8.register(store, fg);
        self.plain16.register(store, fg);
    }

    fn time_features<F: Real>(&self, t: usize) -> ArrayD<F> {
        let half = TEMB_FEAT / 2;
        let mut feats = Vec::with_capacity(TEMB_FEAT);
        let pos = t as f64;
        for k in 0..half {
            let freq = (-(k as f64) * (10_000f64).ln() / (half as f64 - 1.0)).exp();
            feats.push(F::of((pos * freq).sin()));
        }
        for k in 0..half {
            let freq = (-(k as f64) * (10_000f64).ln() / (half as f64 - 1.0)).exp();
            feats.push(F::of((pos * freq).cos()));
        }
        ArrayD::from_shape_vec(IxDyn(&[1, TEMB_FEAT]), feats).unwrap()
    }

    fn temb<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        t: usize,
        cond: &UnetCond<'_, 't, F>,
    ) -> Var<'t, F> {
        let tdim = self.cfg.unet_channels[2];
        let tf = ctx.tape.constant(self.time_features::<F>(t));
        let base = self.temb2.fwd(ctx, self.temb1.fwd(ctx, tf).silu());
        let caption: Option<&[usize]> = match cond {
            UnetCond::Null => None,
            UnetCond::CaptionOnly { caption } | UnetCond::Full { caption, .. } => {
                (!caption.is_empty()).then_some(*caption)
            }
        };
        let cap_vec = match caption {
            None => ctx.param("unet.cap_null").reshape(&[1, tdim]),
            Some(toks) => {
                let rows = ctx.param("unet.cap_embed").index_rows(toks);
                rows.mean_rows()
            }
        };
        base.add(self.cap_proj.fwd(ctx, cap_vec)).reshape(&[tdim])
    }

    fn inject<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        hidden: Var<'t, F>,
        site: &VfeaSite,
        asfa: &Asfa,
        plain: &PlainCross,
        ficgen: &FicgenCondVars<'t, F>,
        which: u8,
    ) -> Var<'t, F> {
        if !self.cfg.use_vfea {
            // ungated plain cross-attention over all tokens, no masks
            return hidden.add(plain.fwd(ctx, hidden, ficgen.all_tokens));
        }
        let maps = if which == 8 { &ficgen.maps8 } else { &ficgen.maps16 };
        let rep = vfea_attend(ctx, site, hidden, &ficgen.tokens, maps)
            .expect("conditioning shapes verified at build time");
        let delta = if self.cfg.use_asfa {
            asfa.aggregate(ctx, &rep, self.cfg.fusion)
        } else {
            // direct summation baseline
            let mut acc = rep.context_feat;
            for f in &rep.instance_feats {
                acc = acc.add(*f);
            }
            acc
        };
        let s = delta.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let gate = ctx.param(&site.gate_name());
        let gated = delta.reshape(&[c * h * w, 1]).mul_vec_last(gate).reshape(&[c, h, w]);
        hidden.add(gated)
    }

    /// Predict the per-step noise from a noisy latent.
    pub fn forward<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        z_t: Var<'t, F>,
        t: usize,
        cond: &UnetCond<'_, 't, F>,
    ) -> Var<'t, F> {
        let temb = self.temb(ctx, t, cond);
        let h0 = self.enc0.fwd(ctx, self.conv_in.fwd(ctx, z_t), temb);
        let h1 = self.enc1.fwd(ctx, self.down1.fwd(ctx, h0), temb);
        let h2 = self.mid.fwd(ctx, self.down2.fwd(ctx, h1), temb);
        let mut d2 = self.dec2.fwd(ctx, h2, temb);
        if let UnetCond::Full { ficgen, .. } = cond {
            d2 = self.inject(ctx, d2, &self.vfea8, &self.asfa8, &self.plain8, ficgen, 8);
        }
        let u1 = self.up1.fwd(ctx, d2.upsample2x());
        let mut d1 = self
            .dec1
            .fwd(ctx, self.cat1.fwd(ctx, ops::concat(&[u1, h1], 0)), temb);
        if let UnetCond::Full { ficgen, .. } = cond {
            d1 = self.inject(ctx, d1, &self.vfea16, &self.asfa16, &self.plain16, ficgen, 16);
        }
        let u0 = self.up0.fwd(ctx, d1.upsample2x());
        let d0 = self
            .dec0
            .fwd(ctx, self.cat0.fwd(ctx, ops::concat(&[u0, h0], 0)), temb);
        self.conv_out.fwd(ctx, d0)
    }
}

trait MeanRows<'t, F: Real> {
    fn mean_rows(self) -> Var<'t, F>;
}

impl<'t, F: Real> MeanRows<'t, F> for Var<'t, F> {
    /// `[R, d] -> [1, d]` row mean.
    fn mean_rows(self) -> Var<'t, F> {
        let s = self.shape();
        let (r, d) = (s[0], s[1]);
        let scale = F::one() / F::of(r as f64);
        // sum rows via transpose-reshape trick: permute to [d, r], sum last
        let mut acc = self.slice_axis0(0, 1);
        for i in 1..r {
            acc = acc.add(self.slice_axis0(i, 1));
        }
        acc.mul_scalar(scale).reshape(&[1, d])
    }
}

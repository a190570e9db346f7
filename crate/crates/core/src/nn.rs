//! Parameter store, optimizer, and thin layer wrappers over the tape ops.
//!
//! Parameters are named; initialization derives a per-name RNG from the
//! store seed so creation order never affects weights. Parameter groups
//! separate the diffusion backbone from the conditioning stack so the
//! freeze contract is enforceable at the optimizer level.

use crate::error::{FicgenError, Result};
use crate::num::Real;
use crate::tensor::{ops, Grads, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Draw a standard normal sample as `f64` and narrow, so `f32` and `f64`
/// models consume identical random streams.
pub fn randn<F: Real, R: Rng>(rng: &mut R) -> F {
    F::of(rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform<F: Real, R: Rng>(rng: &mut R, lo: f64, hi: f64) -> F {
    F::of(rng.gen_range(lo..hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    /// Diffusion backbone weights (frozen during the conditioning phase).
    Backbone,
    /// Conditioning-stack weights: frequency split, exemplar encoder,
    /// resamplers, masked attention, aggregation, gates.
    Ficgen,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanIn(usize),
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct Param<F: Real> {
    pub value: ArrayD<F>,
    pub m: ArrayD<F>,
    pub v: ArrayD<F>,
    pub group: ParamGroup,
}

fn name_hash(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone)]
pub struct ParamStore<F: Real> {
    map: BTreeMap<String, Param<F>>,
    pub seed: u64,
}

impl<F: Real> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        Self {
            map: BTreeMap::new(),
            seed,
        }
    }

    /// Create a parameter if absent. Initialization depends only on
    /// `(store seed, name)`.
    pub fn register(&mut self, name: &str, group: ParamGroup, shape: &[usize], init: Init) {
        if self.map.contains_key(name) {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let value = match init {
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::Ones => ArrayD::ones(IxDyn(shape)),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(shape), |_| uniform::<F, _>(&mut rng, -bound, bound))
            }
            Init::Normal(std) => {
                ArrayD::from_shape_fn(IxDyn(shape), |_| randn::<F, _>(&mut rng) * F::of(std))
            }
        };
        self.map.insert(
            name.to_string(),
            Param {
                m: ArrayD::zeros(value.raw_dim()),
                v: ArrayD::zeros(value.raw_dim()),
                value,
                group,
            },
        );
    }

    pub fn get(&self, name: &str) -> &Param<F> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<F> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<F>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.map.values().map(|p| p.value.len()).sum()
    }

    /// Any non-finite weight anywhere?
    pub fn find_non_finite(&self) -> Option<String> {
        for (name, p) in &self.map {
            if !p.value.iter().all(|v| v.is_finite()) {
                return Some(name.clone());
            }
        }
        None
    }

    /// Snapshot of one group's values, for freeze-contract checks.
    pub fn snapshot_group(&self, group: ParamGroup) -> BTreeMap<String, ArrayD<F>> {
        self.map
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect()
    }
}

/// Forward context: a tape plus read access to the parameter store.
/// Parameters touched during the forward pass are inserted as leaves once
/// and memoized by name.
pub struct Ctx<'t, F: Real> {
    pub tape: &'t Tape<F>,
    pub store: &'t ParamStore<F>,
    touched: RefCell<BTreeMap<String, usize>>,
}

impl<'t, F: Real> Ctx<'t, F> {
    pub fn new(tape: &'t Tape<F>, store: &'t ParamStore<F>) -> Self {
        Self {
            tape,
            store,
            touched: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn param(&self, name: &str) -> Var<'t, F> {
        if let Some(&idx) = self.touched.borrow().get(name) {
            return Var {
                tape: self.tape,
                idx,
            };
        }
        let var = self.tape.leaf(self.store.get(name).value.clone());
        self.touched.borrow_mut().insert(name.to_string(), var.idx);
        var
    }

    /// Gradients of every touched parameter, keyed by name.
    pub fn param_grads(&self, grads: &mut Grads<F>) -> BTreeMap<String, ArrayD<F>> {
        let mut out = BTreeMap::new();
        for (name, &idx) in self.touched.borrow().iter() {
            let var = Var {
                tape: self.tape,
                idx,
            };
            if let Some(g) = grads.take(var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Decoupled weight-decay Adam.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// Apply one update. `step_t` is 1-based for bias correction. Only
    /// parameters passing `trainable` move; gradients for frozen groups are
    /// ignored entirely.
    pub fn step<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        grads: &BTreeMap<String, ArrayD<F>>,
        step_t: u64,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let lr = F::of(self.lr);
        let eps = F::of(self.eps);
        let wd = F::of(self.weight_decay);
        let bc1 = F::of(1.0 - self.beta1.powi(step_t as i32));
        let bc2 = F::of(1.0 - self.beta2.powi(step_t as i32));
        for (name, g) in grads {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(FicgenError::Diverged(format!(
                    "non-finite gradient for {name}"
                )));
            }
            let p = store.get_mut(name);
            if !trainable(p.group) {
                continue;
            }
            azip_update(p, g, b1, b2, lr, eps, wd, bc1, bc2);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update<F: Real>(
    p: &mut Param<F>,
    g: &ArrayD<F>,
    b1: F,
    b2: F,
    lr: F,
    eps: F,
    wd: F,
    bc1: F,
    bc2: F,
) {
    let one = F::one();
    ndarray::Zip::from(&mut p.m).and(g).for_each(|m, &gv| {
        *m = b1 * *m + (one - b1) * gv;
    });
    ndarray::Zip::from(&mut p.v).and(g).for_each(|v, &gv| {
        *v = b2 * *v + (one - b2) * gv * gv;
    });
    ndarray::Zip::from(&mut p.value)
        .and(&p.m)
        .and(&p.v)
        .for_each(|w, &m, &v| {
            let mhat = m / bc1;
            let vhat = v / bc2;
            *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
        });
}

/// Dense layer; weight `[din, dout]`, optional bias `[dout]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
    pub zero_init: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
            bias: true,
            zero_init: false,
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// Zero-initialized output projections give residual blocks an exact
    /// identity at initialization.
    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn register<F: Real>(&self, store: &mut ParamStore<F>, group: ParamGroup) {
        let init = if self.zero_init {
            Init::Zeros
        } else {
            Init::FanIn(self.din)
        };
        store.register(&format!("{}.w", self.name), group, &[self.din, self.dout], init);
        if self.bias {
            store.register(&format!("{}.b", self.name), group, &[self.dout], Init::Zeros);
        }
    }

    /// `x: [..., din] -> [..., dout]` (leading axes flattened internally).
    pub fn fwd<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let shape = x.shape();
        let din = *shape.last().expect("linear input needs an axis");
        debug_assert_eq!(din, self.din, "{}: wrong input dim", self.name);
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let w = ctx.param(&format!("{}.w", self.name));
        let mut y = x.reshape(&[rows, din]).matmul(w);
        if self.bias {
            y = y.add_bias_last(ctx.param(&format!("{}.b", self.name)));
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.dout;
        y.reshape(&out_shape)
    }
}

/// 2-d convolution layer wrapper.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub zero_init: bool,
}

impl Conv2dLayer {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            zero_init: false,
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn register<F: Real>(&self, store: &mut ParamStore<F>, group: ParamGroup) {
        let fan_in = self.cin * self.k * self.k;
        let init = if self.zero_init {
            Init::Zeros
        } else {
            Init::FanIn(fan_in)
        };
        store.register(
            &format!("{}.w", self.name),
            group,
            &[self.cout, self.cin, self.k, self.k],
            init,
        );
        store.register(&format!("{}.b", self.name), group, &[self.cout], Init::Zeros);
    }

    pub fn fwd<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let w = ctx.param(&format!("{}.w", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        x.conv2d(w, b, self.stride, self.pad)
    }
}

/// Per-channel depthwise convolution (stride 1, same padding).
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    pub name: String,
    pub channels: usize,
    pub k: usize,
}

impl DepthwiseConv {
    pub fn new(name: impl Into<String>, channels: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            k,
        }
    }

    pub fn register<F: Real>(&self, store: &mut ParamStore<F>, group: ParamGroup) {
        store.register(
            &format!("{}.k", self.name),
            group,
            &[self.channels, self.k, self.k],
            Init::FanIn(self.k * self.k),
        );
        store.register(
            &format!("{}.b", self.name),
            group,
            &[self.channels],
            Init::Zeros,
        );
    }

    pub fn fwd<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let k = ctx.param(&format!("{}.k", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        x.conv2d_depthwise(k, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub d: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        Self { name: name.into(), d }
    }

    pub fn register<F: Real>(&self, store: &mut ParamStore<F>, group: ParamGroup) {
        store.register(&format!("{}.g", self.name), group, &[self.d], Init::Ones);
        store.register(&format!("{}.b", self.name), group, &[self.d], Init::Zeros);
    }

    pub fn fwd<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let g = ctx.param(&format!("{}.g", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        x.layer_norm_last(g, b, F::of(1e-5))
    }
}

/// Scaled dot-product attention over token matrices, optionally multi-head.
/// `q: [Tq, d]`, `k/v: [Tk, d]` -> `[Tq, d]`.
pub fn attention<'t, F: Real>(
    q: Var<'t, F>,
    k: Var<'t, F>,
    v: Var<'t, F>,
    heads: usize,
) -> Var<'t, F> {
    let d = *q.shape().last().unwrap();
    assert!(heads >= 1 && d % heads == 0, "head count must divide d");
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    if heads == 1 {
        let kt = k.permute(&[1, 0]);
        let attn = q.matmul(kt).mul_scalar(scale).softmax_last();
        return attn.matmul(v);
    }
    let tq = q.shape()[0];
    let tk = k.shape()[0];
    let qh = q.reshape(&[tq, heads, dh]).permute(&[1, 0, 2]);
    let kh = k.reshape(&[tk, heads, dh]).permute(&[1, 0, 2]);
    let vh = v.reshape(&[tk, heads, dh]).permute(&[1, 0, 2]);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qs = qh.slice_axis0(h, 1).reshape(&[tq, dh]);
        let ks = kh.slice_axis0(h, 1).reshape(&[tk, dh]);
        let vs = vh.slice_axis0(h, 1).reshape(&[tk, dh]);
        let attn = qs.matmul(ks.permute(&[1, 0])).mul_scalar(scale).softmax_last();
        outs.push(attn.matmul(vs).reshape(&[tq, 1, dh]));
    }
    ops::concat(&outs, 1).reshape(&[tq, d])
}

/// Pre-norm transformer block: residual attention (self- or cross-) followed
/// by a residual feed-forward. Attention-output and feed-forward-output
/// projections are zero-initialized, so the block is exactly the identity at
/// initialization.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub norm_q: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm_ff: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

impl AttnBlock {
    pub fn new(name: &str, d: usize, ff_mult: usize, heads: usize) -> Self {
        Self {
            norm_q: LayerNorm::new(format!("{name}.norm_q"), d),
            wq: Linear::new(format!("{name}.wq"), d, d),
            wk: Linear::new(format!("{name}.wk"), d, d),
            wv: Linear::new(format!("{name}.wv"), d, d),
            wo: Linear::new(format!("{name}.wo"), d, d).zeroed(),
            norm_ff: LayerNorm::new(format!("{name}.norm_ff"), d),
            ff1: Linear::new(format!("{name}.ff1"), d, d * ff_mult),
            ff2: Linear::new(format!("{name}.ff2"), d * ff_mult, d).zeroed(),
            heads,
        }
    }

    pub fn register<F: Real>(&self, store: &mut ParamStore<F>, group: ParamGroup) {
        self.norm_q.register(store, group);
        self.wq.register(store, group);
        self.wk.register(store, group);
        self.wv.register(store, group);
        self.wo.register(store, group);
        self.norm_ff.register(store, group);
        self.ff1.register(store, group);
        self.ff2.register(store, group);
    }

    /// Cross-attention: `x` queries an external token sequence.
    pub fn fwd_cross<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        x: Var<'t, F>,
        kv: Var<'t, F>,
    ) -> Var<'t, F> {
        let q = self.wq.fwd(ctx, self.norm_q.fwd(ctx, x));
        let k = self.wk.fwd(ctx, kv);
        let v = self.wv.fwd(ctx, kv);
        let attn = attention(q, k, v, self.heads);
        let x = x.add(self.wo.fwd(ctx, attn));
        let ff = self
            .ff2
            .fwd(ctx, self.ff1.fwd(ctx, self.norm_ff.fwd(ctx, x)).silu());
        x.add(ff)
    }

    /// Self-attention over `x`'s own tokens.
    pub fn fwd_self<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let h = self.norm_q.fwd(ctx, x);
        let attn = attention(
            self.wq.fwd(ctx, h),
            self.wk.fwd(ctx, h),
            self.wv.fwd(ctx, h),
            self.heads,
        );
        let x = x.add(self.wo.fwd(ctx, attn));
        let ff = self
            .ff2
            .fwd(ctx, self.ff1.fwd(ctx, self.norm_ff.fwd(ctx, x)).silu());
        x.add(ff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn param_init_is_name_keyed_not_order_keyed() {
        let mut a = ParamStore::<f64>::new(7);
        a.register("x", ParamGroup::Backbone, &[4, 4], Init::FanIn(4));
        a.register("y", ParamGroup::Backbone, &[4, 4], Init::FanIn(4));
        let mut b = ParamStore::<f64>::new(7);
        b.register("y", ParamGroup::Backbone, &[4, 4], Init::FanIn(4));
        b.register("x", ParamGroup::Backbone, &[4, 4], Init::FanIn(4));
        assert_eq!(a.get("x").value, b.get("x").value);
        assert_eq!(a.get("y").value, b.get("y").value);
        assert_ne!(a.get("x").value, a.get("y").value);
    }

    #[test]
    fn adamw_freezes_filtered_groups() {
        let mut store = ParamStore::<f64>::new(1);
        store.register("bb", ParamGroup::Backbone, &[2], Init::Ones);
        store.register("fg", ParamGroup::Ficgen, &[2], Init::Ones);
        let mut grads = BTreeMap::new();
        grads.insert("bb".to_string(), ArrayD::from_elem(IxDyn(&[2]), 1.0));
        grads.insert("fg".to_string(), ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let opt = AdamW::new(0.1);
        opt.step(&mut store, &grads, 1, |g| g == ParamGroup::Ficgen)
            .unwrap();
        assert_eq!(store.get("bb").value[[0]], 1.0);
        assert!(store.get("fg").value[[0]] < 1.0);
    }

    #[test]
    fn attn_block_identity_at_init() {
        let mut store = ParamStore::<f64>::new(3);
        let blk = AttnBlock::new("blk", 8, 2, 2);
        blk.register(&mut store, ParamGroup::Ficgen);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.leaf(ArrayD::from_shape_fn(IxDyn(&[3, 8]), |i| {
            (i[0] * 8 + i[1]) as f64 * 0.1
        }));
        let kv = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 8]), 0.5));
        let y = blk.fwd_cross(&ctx, x, kv);
        assert_eq!(x.value(), y.value(), "zero-init projections => identity");
        let ys = blk.fwd_self(&ctx, x);
        assert_eq!(x.value(), ys.value());
    }

    #[test]
    fn linear_shapes_and_grad_flow() {
        let mut store = ParamStore::<f64>::new(5);
        let lin = Linear::new("l", 6, 4);
        lin.register(&mut store, ParamGroup::Ficgen);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 3, 6]), 0.3));
        let y = lin.fwd(&ctx, x);
        assert_eq!(y.shape(), vec![2, 3, 4]);
        let loss = y.mul(y).mean_all();
        let mut grads = tape.backward(loss);
        let pg = ctx.param_grads(&mut grads);
        assert!(pg.contains_key("l.w"));
        assert!(pg.contains_key("l.b"));
    }
}

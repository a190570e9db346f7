//! Differentiable primitives. Each op computes its forward value eagerly and
//! registers a VJP closure capturing parent indices plus whatever saved
//! arrays the backward pass needs.

use super::{same_tape, BackFn, Var};
use crate::num::Real;
use ndarray::{concatenate, Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix2, Ix3, IxDyn};

fn to2<F: Real>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d")
}

fn to3<F: Real>(a: &ArrayD<F>) -> ArrayView3<'_, F> {
    a.view().into_dimensionality::<Ix3>().expect("expected 3-d")
}

impl<'t, F: Real> Var<'t, F> {
    pub fn add(self, rhs: Var<'t, F>) -> Var<'t, F> {
        same_tape(&self, &rhs);
        let t = self.tape;
        let out = t.with_value(self.idx, |a| t.with_value(rhs.idx, |b| a + b));
        let (ai, bi) = (self.idx, rhs.idx);
        let back: BackFn<F> = Box::new(move |g, _v, emit| {
            emit(ai, g.clone());
            emit(bi, g.clone());
        });
        t.push(out, t.needs(ai) || t.needs(bi), Some(back))
    }

    pub fn sub(self, rhs: Var<'t, F>) -> Var<'t, F> {
        same_tape(&self, &rhs);
        let t = self.tape;
        let out = t.with_value(self.idx, |a| t.with_value(rhs.idx, |b| a - b));
        let (ai, bi) = (self.idx, rhs.idx);
        let back: BackFn<F> = Box::new(move |g, _v, emit| {
            emit(ai, g.clone());
            emit(bi, g.mapv(|x| -x));
        });
        t.push(out, t.needs(ai) || t.needs(bi), Some(back))
    }

    pub fn mul(self, rhs: Var<'t, F>) -> Var<'t, F> {
        same_tape(&self, &rhs);
        let t = self.tape;
        let out = t.with_value(self.idx, |a| t.with_value(rhs.idx, |b| a * b));
        let (ai, bi) = (self.idx, rhs.idx);
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            emit(ai, g * &v[bi]);
            emit(bi, g * &v[ai]);
        });
        t.push(out, t.needs(ai) || t.needs(bi), Some(back))
    }

    pub fn neg(self) -> Var<'t, F> {
        self.mul_scalar(F::of(-1.0))
    }

    pub fn add_scalar(self, c: F) -> Var<'t, F> {
        let t = self.tape;
        let out = t.with_value(self.idx, |a| a.mapv(|x| x + c));
        let ai = self.idx;
        let back: BackFn<F> = Box::new(move |g, _v, emit| emit(ai, g.clone()));
        t.push(out, t.needs(ai), Some(back))
    }

    pub fn mul_scalar(self, c: F) -> Var<'t, F> {
        let t = self.tape;
        let out = t.with_value(self.idx, |a| a.mapv(|x| x * c));
        let ai = self.idx;
        let back: BackFn<F> = Box::new(move |g, _v, emit| emit(ai, g.mapv(|x| x * c)));
        t.push(out, t.needs(ai), Some(back))
    }

    /// Elementwise product with a constant array (e.g. a binary mask).
    pub fn mul_const(self, c: &ArrayD<F>) -> Var<'t, F> {
        let t = self.tape;
        assert_eq!(t.with_value(self.idx, |a| a.shape().to_vec()), c.shape());
        let out = t.with_value(self.idx, |a| a * c);
        let ai = self.idx;
        let cc = c.clone();
        let back: BackFn<F> = Box::new(move |g, _v, emit| emit(ai, g * &cc));
        t.push(out, t.needs(ai), Some(back))
    }

    /// `x * v` where `v` has the shape of the last axis of `x`; both sides
    /// receive gradients.
    pub fn mul_vec_last(self, v: Var<'t, F>) -> Var<'t, F> {
        same_tape(&self, &v);
        let t = self.tape;
        let d = t.with_value(v.idx, |b| b.len());
        let out = t.with_value(self.idx, |a| {
            t.with_value(v.idx, |b| {
                a * &b.view().into_shape_with_order(IxDyn(&[d])).unwrap()
            })
        });
        let (ai, vi) = (self.idx, v.idx);
        let back: BackFn<F> = Box::new(move |g, vals, emit| {
            let rows = g.len() / d;
            let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
            let vv = vals[vi].view().into_shape_with_order(d).unwrap();
            let x2 = vals[ai].view().into_shape_with_order((rows, d)).unwrap();
            let mut dx = Array2::<F>::zeros((rows, d));
            let mut dv = Array1::<F>::zeros(d);
            for r in 0..rows {
                for c in 0..d {
                    dx[[r, c]] = g2[[r, c]] * vv[c];
                    dv[c] += g2[[r, c]] * x2[[r, c]];
                }
            }
            emit(ai, dx.into_shape_with_order(g.raw_dim()).unwrap());
            emit(vi, dv.into_dyn());
        });
        t.push(out, t.needs(ai) || t.needs(vi), Some(back))
    }

    /// `x + b` where `b` has the shape of the last axis of `x`.
    pub fn add_bias_last(self, bias: Var<'t, F>) -> Var<'t, F> {
        same_tape(&self, &bias);
        let t = self.tape;
        let d = t.with_value(bias.idx, |b| b.len());
        let out = t.with_value(self.idx, |a| {
            t.with_value(bias.idx, |b| a + &b.view().into_shape_with_order(IxDyn(&[d])).unwrap())
        });
        let (ai, bi) = (self.idx, bias.idx);
        let back: BackFn<F> = Box::new(move |g, _v, emit| {
            emit(ai, g.clone());
            let rows = g.len() / d;
            let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
            emit(bi, g2.sum_axis(Axis(0)).into_dyn());
        });
        t.push(out, t.needs(ai) || t.needs(bi), Some(back))
    }

    /// `x + b` where `b` has the shape of the first axis of `x` (channel bias).
    pub fn add_bias_first(self, bias: Var<'t, F>) -> Var<'t, F> {
        same_tape(&self, &bias);
        let t = self.tape;
        let c = t.with_value(bias.idx, |b| b.len());
        let out = t.with_value(self.idx, |a| {
            let mut o = a.clone();
            let rest = a.len() / c;
            let mut o2 = o.view_mut().into_shape_with_order((c, rest)).unwrap();
            t.with_value(bias.idx, |b| {
                for (mut row, bv) in o2.outer_iter_mut().zip(b.iter()) {
                    row.mapv_inplace(|x| x + *bv);
                }
            });
            o
        });
        let (ai, bi) = (self.idx, bias.idx);
        let back: BackFn<F> = Box::new(move |g, _v, emit| {
            emit(ai, g.clone());
            let rest = g.len() / c;
            let g2 = g.view().into_shape_with_order((c, rest)).unwrap();
            emit(bi, g2.sum_axis(Axis(1)).into_dyn());
        });
        t.push(out, t.needs(ai) || t.needs(bi), Some(back))
    }

    /// Per-channel scaling of a `[C, ...]` array by a `[C]` weight vector.
    /// Both operands receive gradients.
    pub fn mul_channel_first(self, w: Var<'t, F>) -> Var<'t, F> {
        same_tape(&self, &w);
        let t = self.tape;
        let c = t.with_value(w.idx, |b| b.len());
        let scale = |a: &ArrayD<F>, b: &ArrayD<F>| -> ArrayD<F> {
            let mut o = a.clone();
            let rest = a.len() / c;
            let mut o2 = o.view_mut().into_shape_with_order((c, rest)).unwrap();
            for (mut row, bv) in o2.outer_iter_mut().zip(b.iter()) {
                row.mapv_inplace(|x| x * *bv);
            }
            o
        };
        let out = t.with_value(self.idx, |a| t.with_value(w.idx, |b| scale(a, b)));
        let (ai, wi) = (self.idx, w.idx);
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            // dx = g * w (broadcast)
            let rest = g.len() / c;
            let g2 = g.view().into_shape_with_order((c, rest)).unwrap();
            let mut dx = g.clone();
            {
                let mut dx2 = dx.view_mut().into_shape_with_order((c, rest)).unwrap();
                for (mut row, bv) in dx2.outer_iter_mut().zip(v[wi].iter()) {
                    row.mapv_inplace(|x| x * *bv);
                }
            }
            emit(ai, dx);
            // dw[c] = sum(g[c,..] * x[c,..])
            let x2 = v[ai].view().into_shape_with_order((c, rest)).unwrap();
            let mut dw = Array1::<F>::zeros(c);
            for k in 0..c {
                let mut s = F::zero();
                for (gv, xv) in g2.row(k).iter().zip(x2.row(k).iter()) {
                    s += *gv * *xv;
                }
                dw[k] = s;
            }
            emit(wi, dw.into_dyn());
        });
        t.push(out, t.needs(ai) || t.needs(wi), Some(back))
    }

    /// Matrix product of 2-d operands: `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(self, rhs: Var<'t, F>) -> Var<'t, F> {
        same_tape(&self, &rhs);
        let t = self.tape;
        let out = t.with_value(self.idx, |a| {
            t.with_value(rhs.idx, |b| to2(a).dot(&to2(b)).into_dyn())
        });
        let (ai, bi) = (self.idx, rhs.idx);
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            let g2 = to2(g);
            emit(ai, g2.dot(&to2(&v[bi]).t()).into_dyn());
            emit(bi, to2(&v[ai]).t().dot(&g2).into_dyn());
        });
        t.push(out, t.needs(ai) || t.needs(bi), Some(back))
    }

    pub fn relu(self) -> Var<'t, F> {
        let t = self.tape;
        let out = t.with_value(self.idx, |a| a.mapv(|x| if x > F::zero() { x } else { F::zero() }));
        let ai = self.idx;
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            let mut dx = g.clone();
            dx.zip_mut_with(&v[ai], |d, x| {
                if *x <= F::zero() {
                    *d = F::zero();
                }
            });
            emit(ai, dx);
        });
        t.push(out, t.needs(ai), Some(back))
    }

    pub fn silu(self) -> Var<'t, F> {
        let t = self.tape;
        let sig = |x: F| F::one() / (F::one() + (-x).exp());
        let out = t.with_value(self.idx, |a| a.mapv(|x| x * sig(x)));
        let ai = self.idx;
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            let mut dx = g.clone();
            dx.zip_mut_with(&v[ai], |d, x| {
                let s = F::one() / (F::one() + (-*x).exp());
                *d = *d * (s * (F::one() + *x * (F::one() - s)));
            });
            emit(ai, dx);
        });
        t.push(out, t.needs(ai), Some(back))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t, F> {
        let t = self.tape;
        let out = t.with_value(self.idx, |a| {
            let d = *a.shape().last().expect("softmax needs an axis");
            let rows = a.len() / d;
            let a2 = a.view().into_shape_with_order((rows, d)).unwrap();
            let mut y = Array2::<F>::zeros((rows, d));
            for (mut yr, ar) in y.outer_iter_mut().zip(a2.outer_iter()) {
                let mx = ar.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut s = F::zero();
                for (yv, av) in yr.iter_mut().zip(ar.iter()) {
                    let e = (*av - mx).exp();
                    *yv = e;
                    s += e;
                }
                yr.mapv_inplace(|x| x / s);
            }
            y.into_shape_with_order(a.raw_dim()).unwrap()
        });
        let ai = self.idx;
        let oi = t.next_idx();
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            let y = &v[oi];
            let d = *y.shape().last().unwrap();
            let rows = y.len() / d;
            let y2 = y.view().into_shape_with_order((rows, d)).unwrap();
            let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
            let mut dx = Array2::<F>::zeros((rows, d));
            for ((mut dr, yr), gr) in dx.outer_iter_mut().zip(y2.outer_iter()).zip(g2.outer_iter())
            {
                let dot: F = yr.iter().zip(gr.iter()).map(|(a, b)| *a * *b).sum();
                for ((dv, yv), gv) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                    *dv = *yv * (*gv - dot);
                }
            }
            emit(ai, dx.into_shape_with_order(g.raw_dim()).unwrap());
        });
        t.push(out, t.needs(ai), Some(back))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(self) -> Var<'t, F> {
        let t = self.tape;
        let out = t.with_value(self.idx, |a| {
            let d = *a.shape().last().unwrap();
            let rows = a.len() / d;
            let a2 = a.view().into_shape_with_order((rows, d)).unwrap();
            let mut y = Array2::<F>::zeros((rows, d));
            for (mut yr, ar) in y.outer_iter_mut().zip(a2.outer_iter()) {
                let mx = ar.iter().cloned().fold(F::neg_infinity(), F::max);
                let lse = ar.iter().map(|x| (*x - mx).exp()).sum::<F>().ln() + mx;
                for (yv, av) in yr.iter_mut().zip(ar.iter()) {
                    *yv = *av - lse;
                }
            }
            y.into_shape_with_order(a.raw_dim()).unwrap()
        });
        let ai = self.idx;
        let oi = t.next_idx();
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            let y = &v[oi];
            let d = *y.shape().last().unwrap();
            let rows = y.len() / d;
            let y2 = y.view().into_shape_with_order((rows, d)).unwrap();
            let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
            let mut dx = Array2::<F>::zeros((rows, d));
            for ((mut dr, yr), gr) in dx.outer_iter_mut().zip(y2.outer_iter()).zip(g2.outer_iter())
            {
                let gsum: F = gr.iter().cloned().sum();
                for ((dv, yv), gv) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                    *dv = *gv - yv.exp() * gsum;
                }
            }
            emit(ai, dx.into_shape_with_order(g.raw_dim()).unwrap());
        });
        t.push(out, t.needs(ai), Some(back))
    }

    /// Mean negative log-likelihood of target entries of a `[R, C]` log-prob
    /// matrix.
    pub fn nll(self, targets: &[usize]) -> Var<'t, F> {
        let t = self.tape;
        let tg = targets.to_vec();
        let out = t.with_value(self.idx, |a| {
            let a2 = to2(a);
            assert_eq!(a2.nrows(), tg.len());
            let n = F::of(tg.len() as f64);
            let s: F = tg.iter().enumerate().map(|(r, &c)| a2[[r, c]]).sum();
            ArrayD::from_elem(IxDyn(&[]), -s / n)
        });
        let ai = self.idx;
        let tg2 = targets.to_vec();
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            let gs = *g.first().unwrap();
            let shape = v[ai].raw_dim();
            let mut dx = ArrayD::<F>::zeros(shape);
            {
                let mut d2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                let n = F::of(tg2.len() as f64);
                for (r, &c) in tg2.iter().enumerate() {
                    d2[[r, c]] = -gs / n;
                }
            }
            emit(ai, dx);
        });
        t.push(out, t.needs(ai), Some(back))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm_last(self, gain: Var<'t, F>, bias: Var<'t, F>, eps: F) -> Var<'t, F> {
        same_tape(&self, &gain);
        same_tape(&self, &bias);
        let t = self.tape;
        let (xhat, istd, out) = t.with_value(self.idx, |a| {
            let d = *a.shape().last().unwrap();
            let rows = a.len() / d;
            let a2 = a.view().into_shape_with_order((rows, d)).unwrap();
            let mut xhat = Array2::<F>::zeros((rows, d));
            let mut istd = Array1::<F>::zeros(rows);
            let nd = F::of(d as f64);
            for (r, ar) in a2.outer_iter().enumerate() {
                let mu = ar.iter().cloned().sum::<F>() / nd;
                let var = ar.iter().map(|x| (*x - mu) * (*x - mu)).sum::<F>() / nd;
                let is = F::one() / (var + eps).sqrt();
                istd[r] = is;
                for (c, av) in ar.iter().enumerate() {
                    xhat[[r, c]] = (*av - mu) * is;
                }
            }
            let out = t.with_value(gain.idx, |gn| {
                t.with_value(bias.idx, |bs| {
                    let gn1 = gn.view().into_shape_with_order(d).unwrap();
                    let bs1 = bs.view().into_shape_with_order(d).unwrap();
                    let mut o = xhat.clone();
                    for mut row in o.outer_iter_mut() {
                        for (c, ov) in row.iter_mut().enumerate() {
                            *ov = *ov * gn1[c] + bs1[c];
                        }
                    }
                    o.into_shape_with_order(a.raw_dim()).unwrap()
                })
            });
            (xhat, istd, out)
        });
        let (ai, gi, bi) = (self.idx, gain.idx, bias.idx);
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            let d = xhat.ncols();
            let rows = xhat.nrows();
            let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
            let gn = v[gi].view().into_shape_with_order(d).unwrap();
            let nd = F::of(d as f64);
            let mut dx = Array2::<F>::zeros((rows, d));
            let mut dgain = Array1::<F>::zeros(d);
            let mut dbias = Array1::<F>::zeros(d);
            for r in 0..rows {
                let mut m1 = F::zero(); // mean(dxhat)
                let mut m2 = F::zero(); // mean(dxhat * xhat)
                for c in 0..d {
                    let dxh = g2[[r, c]] * gn[c];
                    m1 += dxh;
                    m2 += dxh * xhat[[r, c]];
                    dgain[c] += g2[[r, c]] * xhat[[r, c]];
                    dbias[c] += g2[[r, c]];
                }
                m1 /= nd;
                m2 /= nd;
                for c in 0..d {
                    let dxh = g2[[r, c]] * gn[c];
                    dx[[r, c]] = istd[r] * (dxh - m1 - xhat[[r, c]] * m2);
                }
            }
            emit(ai, dx.into_shape_with_order(g.raw_dim()).unwrap());
            emit(gi, dgain.into_dyn());
            emit(bi, dbias.into_dyn());
        });
        t.push(out, t.needs(ai) || t.needs(gi) || t.needs(bi), Some(back))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, F> {
        let t = self.tape;
        let old = t.with_value(self.idx, |a| a.raw_dim());
        let out = t.with_value(self.idx, |a| {
            a.view()
                .into_shape_with_order(IxDyn(shape))
                .map(|v| v.to_owned())
                .unwrap_or_else(|_| {
                    a.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(shape))
                        .unwrap()
                })
        });
        let ai = self.idx;
        let back: BackFn<F> = Box::new(move |g, _v, emit| {
            emit(
                ai,
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(old.clone())
                    .unwrap(),
            );
        });
        t.push(out, t.needs(ai), Some(back))
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t, F> {
        let t = self.tape;
        let out = t.with_value(self.idx, |a| {
            a.view()
                .permuted_axes(IxDyn(axes))
                .as_standard_layout()
                .into_owned()
        });
        let ai = self.idx;
        let mut inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        let back: BackFn<F> = Box::new(move |g, _v, emit| {
            emit(
                ai,
                g.view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .into_owned(),
            );
        });
        t.push(out, t.needs(ai), Some(back))
    }

    pub fn slice_axis0(self, start: usize, len: usize) -> Var<'t, F> {
        let t = self.tape;
        let old = t.with_value(self.idx, |a| a.raw_dim());
        let out = t.with_value(self.idx, |a| {
            a.slice_axis(Axis(0), (start..start + len).into()).to_owned()
        });
        let ai = self.idx;
        let back: BackFn<F> = Box::new(move |g, _v, emit| {
            let mut dx = ArrayD::<F>::zeros(old.clone());
            dx.slice_axis_mut(Axis(0), (start..start + len).into())
                .assign(g);
            emit(ai, dx);
        });
        t.push(out, t.needs(ai), Some(back))
    }

    /// Gather rows of a `[V, d]` table.
    pub fn index_rows(self, idx: &[usize]) -> Var<'t, F> {
        let t = self.tape;
        let ids = idx.to_vec();
        let out = t.with_value(self.idx, |a| {
            let a2 = to2(a);
            let mut o = Array2::<F>::zeros((ids.len(), a2.ncols()));
            for (r, &i) in ids.iter().enumerate() {
                o.row_mut(r).assign(&a2.row(i));
            }
            o.into_dyn()
        });
        let ai = self.idx;
        let ids2 = idx.to_vec();
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            let g2 = to2(g);
            let mut dt = ArrayD::<F>::zeros(v[ai].raw_dim());
            {
                let mut d2 = dt.view_mut().into_dimensionality::<Ix2>().unwrap();
                for (r, &i) in ids2.iter().enumerate() {
                    let mut row = d2.row_mut(i);
                    row.zip_mut_with(&g2.row(r), |a, b| *a += *b);
                }
            }
            emit(ai, dt);
        });
        t.push(out, t.needs(ai), Some(back))
    }

    pub fn sum_all(self) -> Var<'t, F> {
        let t = self.tape;
        let out = t.with_value(self.idx, |a| ArrayD::from_elem(IxDyn(&[]), a.sum()));
        let ai = self.idx;
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            let gs = *g.first().unwrap();
            emit(ai, ArrayD::from_elem(v[ai].raw_dim(), gs));
        });
        t.push(out, t.needs(ai), Some(back))
    }

    pub fn mean_all(self) -> Var<'t, F> {
        let t = self.tape;
        let n = t.with_value(self.idx, |a| a.len());
        self.sum_all().mul_scalar(F::one() / F::of(n as f64))
    }

    /// Spatial mean of a `[C,H,W]` map, producing `[C]`.
    pub fn spatial_mean(self) -> Var<'t, F> {
        let t = self.tape;
        let out = t.with_value(self.idx, |a| {
            let a3 = to3(a);
            let (c, h, w) = a3.dim();
            let n = F::of((h * w) as f64);
            let mut o = Array1::<F>::zeros(c);
            for (k, ch) in a3.outer_iter().enumerate() {
                o[k] = ch.sum() / n;
            }
            o.into_dyn()
        });
        let ai = self.idx;
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            let shape = v[ai].raw_dim();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let n = F::of((h * w) as f64);
            let mut dx = Array3::<F>::zeros((c, h, w));
            for (k, mut ch) in dx.outer_iter_mut().enumerate() {
                ch.fill(g[[k]] / n);
            }
            emit(ai, dx.into_dyn());
        });
        t.push(out, t.needs(ai), Some(back))
    }

    /// Nearest-neighbour 2x upsampling of a `[C,H,W]` map.
    pub fn upsample2x(self) -> Var<'t, F> {
        let t = self.tape;
        let out = t.with_value(self.idx, |a| {
            let a3 = to3(a);
            let (c, h, w) = a3.dim();
            let mut o = Array3::<F>::zeros((c, 2 * h, 2 * w));
            for k in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = a3[[k, i, j]];
                        o[[k, 2 * i, 2 * j]] = v;
                        o[[k, 2 * i + 1, 2 * j]] = v;
                        o[[k, 2 * i, 2 * j + 1]] = v;
                        o[[k, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
            o.into_dyn()
        });
        let ai = self.idx;
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            let shape = v[ai].raw_dim();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let g3 = to3(g);
            let mut dx = Array3::<F>::zeros((c, h, w));
            for k in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        dx[[k, i, j]] = g3[[k, 2 * i, 2 * j]]
                            + g3[[k, 2 * i + 1, 2 * j]]
                            + g3[[k, 2 * i, 2 * j + 1]]
                            + g3[[k, 2 * i + 1, 2 * j + 1]];
                    }
                }
            }
            emit(ai, dx.into_dyn());
        });
        t.push(out, t.needs(ai), Some(back))
    }

    /// 2-d convolution of `[Cin,H,W]` with `[Cout,Cin,kh,kw]` weights plus a
    /// `[Cout]` bias, via im2col.
    pub fn conv2d(self, w: Var<'t, F>, b: Var<'t, F>, stride: usize, pad: usize) -> Var<'t, F> {
        same_tape(&self, &w);
        same_tape(&self, &b);
        let t = self.tape;
        let (cin, h, win) = t.with_value(self.idx, |a| {
            let a3 = to3(a);
            a3.dim()
        });
        let wshape = t.with_value(w.idx, |a| a.shape().to_vec());
        let (cout, wcin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let (cols, ho, wo) = t.with_value(self.idx, |a| im2col(&to3(a), kh, kw, stride, pad));
        let out = t.with_value(w.idx, |wv| {
            let wmat = wv.view().into_shape_with_order((cout, cin * kh * kw)).unwrap();
            let mut y = wmat.dot(&cols);
            t.with_value(b.idx, |bv| {
                for (mut row, bias) in y.outer_iter_mut().zip(bv.iter()) {
                    row.mapv_inplace(|x| x + *bias);
                }
            });
            y.into_shape_with_order(IxDyn(&[cout, ho, wo])).unwrap()
        });
        let (ai, wi, bi) = (self.idx, w.idx, b.idx);
        let xdims = (cin, h, win);
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            let g2 = g.view().into_shape_with_order((cout, ho * wo)).unwrap();
            // dW
            let dw = g2.dot(&cols.t());
            emit(
                wi,
                dw.into_shape_with_order(IxDyn(&[cout, cin, kh, kw])).unwrap(),
            );
            // db
            emit(bi, g2.sum_axis(Axis(1)).into_dyn());
            // dX
            let wmat = v[wi]
                .view()
                .into_shape_with_order((cout, cin * kh * kw))
                .unwrap();
            let dcols = wmat.t().dot(&g2);
            emit(ai, col2im(&dcols, xdims, kh, kw, stride, pad).into_dyn());
        });
        t.push(out, t.needs(ai) || t.needs(wi) || t.needs(bi), Some(back))
    }

    /// Depthwise 3x3-style convolution: `[C,H,W]` with per-channel kernels
    /// `[C,kh,kw]` plus `[C]` bias, stride 1, 'same' padding.
    pub fn conv2d_depthwise(self, k: Var<'t, F>, b: Var<'t, F>) -> Var<'t, F> {
        same_tape(&self, &k);
        same_tape(&self, &b);
        let t = self.tape;
        let kshape = t.with_value(k.idx, |a| a.shape().to_vec());
        let (kc, kh, kw) = (kshape[0], kshape[1], kshape[2]);
        let (ph, pw) = (kh / 2, kw / 2);
        let out = t.with_value(self.idx, |a| {
            let a3 = to3(a);
            let (c, h, w) = a3.dim();
            assert_eq!(c, kc, "depthwise channel mismatch");
            let mut o = Array3::<F>::zeros((c, h, w));
            t.with_value(k.idx, |kv| {
                let k3 = to3(kv);
                t.with_value(b.idx, |bv| {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let mut s = bv[[ci]];
                                for ki in 0..kh {
                                    for kj in 0..kw {
                                        let ii = i as isize + ki as isize - ph as isize;
                                        let jj = j as isize + kj as isize - pw as isize;
                                        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                            s += a3[[ci, ii as usize, jj as usize]] * k3[[ci, ki, kj]];
                                        }
                                    }
                                }
                                o[[ci, i, j]] = s;
                            }
                        }
                    }
                });
            });
            o.into_dyn()
        });
        let (ai, kidx, bi) = (self.idx, k.idx, b.idx);
        let back: BackFn<F> = Box::new(move |g, v, emit| {
            let g3 = to3(g);
            let x3 = to3(&v[ai]);
            let k3 = to3(&v[kidx]);
            let (c, h, w) = x3.dim();
            let mut dk = Array3::<F>::zeros((c, kh, kw));
            let mut dx = Array3::<F>::zeros((c, h, w));
            let mut db = Array1::<F>::zeros(c);
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let gv = g3[[ci, i, j]];
                        db[ci] += gv;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = i as isize + ki as isize - ph as isize;
                                let jj = j as isize + kj as isize - pw as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    dk[[ci, ki, kj]] += gv * x3[[ci, ii as usize, jj as usize]];
                                    dx[[ci, ii as usize, jj as usize]] += gv * k3[[ci, ki, kj]];
                                }
                            }
                        }
                    }
                }
            }
            emit(ai, dx.into_dyn());
            emit(kidx, dk.into_dyn());
            emit(bi, db.into_dyn());
        });
        t.push(out, t.needs(ai) || t.needs(kidx) || t.needs(bi), Some(back))
    }
}

/// Concatenate along an axis.
pub fn concat<'t, F: Real>(vars: &[Var<'t, F>], axis: usize) -> Var<'t, F> {
    assert!(!vars.is_empty());
    let t = vars[0].tape;
    let mut lens = Vec::with_capacity(vars.len());
    let out = {
        let views: Vec<ArrayD<F>> = vars.iter().map(|v| v.value()).collect();
        for v in &views {
            lens.push(v.shape()[axis]);
        }
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        concatenate(Axis(axis), &view_refs).expect("concat shape mismatch")
    };
    let idxs: Vec<usize> = vars.iter().map(|v| v.idx).collect();
    let needs = idxs.iter().any(|&i| t.needs(i));
    let back: BackFn<F> = Box::new(move |g, _v, emit| {
        let mut start = 0;
        for (&i, &len) in idxs.iter().zip(lens.iter()) {
            let piece = g
                .slice_axis(Axis(axis), (start..start + len).into())
                .to_owned();
            emit(i, piece);
            start += len;
        }
    });
    t.push(out, needs, Some(back))
}

/// Stack `[..]`-shaped vars along a new leading axis.
pub fn stack0<'t, F: Real>(vars: &[Var<'t, F>]) -> Var<'t, F> {
    let reshaped: Vec<Var<'t, F>> = vars
        .iter()
        .map(|v| {
            let mut s = v.shape();
            s.insert(0, 1);
            v.reshape(&s)
        })
        .collect();
    concat(&reshaped, 0)
}

/// Mean squared error between a prediction and a constant target.
pub fn mse_const<'t, F: Real>(pred: Var<'t, F>, target: &ArrayD<F>) -> Var<'t, F> {
    let t = pred.tape;
    let tgt = t.constant(target.clone());
    let d = pred.sub(tgt);
    d.mul(d).mean_all()
}

pub(crate) fn im2col<F: Real>(
    x: &ArrayView3<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<F>, usize, usize) {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<F>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut out_row = cols.row_mut(row);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        out_row[oi * wo + oj] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

pub(crate) fn col2im<F: Real>(
    dcols: &Array2<F>,
    (c, h, w): (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let drow = dcols.row(row);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        dx[[ci, ii as usize, jj as usize]] += drow[oi * wo + oj];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference check of d(scalar loss)/d(leaf). The builder must
    /// push the scalar loss as its final node.
    fn check_grad(
        shapes: &[&[usize]],
        f: impl Fn(&Tape<f64>, &[Var<'_, f64>]) -> f64 + Copy,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<ArrayD<f64>> = shapes.iter().map(|s| randn_arr(s, &mut rng)).collect();

        let eval = |xs: &[ArrayD<f64>]| -> f64 {
            let t = Tape::<f64>::new();
            let vs: Vec<Var<'_, f64>> = xs.iter().map(|a| t.leaf(a.clone())).collect();
            f(&t, &vs)
        };

        let t = Tape::<f64>::new();
        let vs: Vec<Var<'_, f64>> = inputs.iter().map(|a| t.leaf(a.clone())).collect();
        let _ = f(&t, &vs);
        let root = Var {
            tape: &t,
            idx: t.next_idx() - 1,
        };
        let grads = t.backward(root);

        let h = 1e-5;
        for (vi, x) in inputs.iter().enumerate() {
            let g = grads.get(vs[vi]).expect("missing grad").clone();
            for (lin, _) in x.iter().enumerate() {
                let mut xp = inputs.to_vec();
                let mut xm = inputs.to_vec();
                {
                    let f1 = xp[vi].as_slice_mut().unwrap();
                    f1[lin] += h;
                }
                {
                    let f2 = xm[vi].as_slice_mut().unwrap();
                    f2[lin] -= h;
                }
                let num = (eval(&xp) - eval(&xm)) / (2.0 * h);
                let ana = g.as_slice().unwrap()[lin];
                let denom = num.abs().max(ana.abs()).max(1e-8);
                assert!(
                    (num - ana).abs() < 1e-9 || (num - ana).abs() / denom < 1e-5,
                    "grad mismatch input {vi} elem {lin}: num {num} vs ad {ana}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        check_grad(
            &[&[3, 4], &[3, 4]],
            |_, vs| {
                vs[0]
                    .mul(vs[1])
                    .silu()
                    .add(vs[0].relu())
                    .mul_scalar(0.7)
                    .mean_all()
                    .scalar()
            },
            1,
        );
    }

    #[test]
    fn grad_matmul_softmax() {
        check_grad(
            &[&[3, 5], &[5, 4]],
            |_, vs| {
                vs[0]
                    .matmul(vs[1])
                    .softmax_last()
                    .mul(vs[0].matmul(vs[1]))
                    .mean_all()
                    .scalar()
            },
            2,
        );
    }

    #[test]
    fn grad_conv2d() {
        check_grad(
            &[&[2, 5, 5], &[3, 2, 3, 3], &[3]],
            |_, vs| {
                vs[0]
                    .conv2d(vs[1], vs[2], 2, 1)
                    .silu()
                    .mean_all()
                    .scalar()
            },
            3,
        );
    }

    #[test]
    fn grad_depthwise_and_upsample() {
        check_grad(
            &[&[2, 4, 4], &[2, 3, 3], &[2]],
            |_, vs| {
                vs[0]
                    .conv2d_depthwise(vs[1], vs[2])
                    .upsample2x()
                    .mean_all()
                    .scalar()
            },
            4,
        );
    }

    #[test]
    fn grad_layer_norm_and_bias() {
        check_grad(
            &[&[4, 6], &[6], &[6], &[6]],
            |_, vs| {
                vs[0]
                    .layer_norm_last(vs[1], vs[2], 1e-5)
                    .add_bias_last(vs[3])
                    .mul(vs[0])
                    .mean_all()
                    .scalar()
            },
            5,
        );
    }

    #[test]
    fn grad_concat_slice_gather() {
        check_grad(
            &[&[3, 4], &[2, 4], &[5, 4]],
            |_, vs| {
                let cat = concat(&[vs[0], vs[1]], 0);
                let sl = cat.slice_axis0(1, 3);
                let gathered = vs[2].index_rows(&[0, 2, 2]);
                sl.mul(gathered).mean_all().scalar()
            },
            6,
        );
    }

    #[test]
    fn grad_mul_vec_last() {
        check_grad(
            &[&[3, 4], &[4]],
            |_, vs| vs[0].mul_vec_last(vs[1]).silu().mean_all().scalar(),
            17,
        );
    }

    #[test]
    fn grad_channel_ops() {
        check_grad(
            &[&[3, 4, 4], &[3], &[3]],
            |_, vs| {
                vs[0]
                    .mul_channel_first(vs[1])
                    .add_bias_first(vs[2])
                    .spatial_mean()
                    .mul(vs[1])
                    .mean_all()
                    .scalar()
            },
            7,
        );
    }

    #[test]
    fn grad_log_softmax_nll() {
        check_grad(
            &[&[4, 3]],
            |_, vs| vs[0].log_softmax_last().nll(&[0, 2, 1, 1]).scalar(),
            8,
        );
    }

    #[test]
    fn grad_permute_reshape() {
        check_grad(
            &[&[2, 3, 4]],
            |_, vs| {
                vs[0]
                    .permute(&[2, 0, 1])
                    .reshape(&[4, 6])
                    .softmax_last()
                    .mean_all()
                    .scalar()
            },
            9,
        );
    }

    #[test]
    fn no_grad_tape_records_values_only() {
        let t = Tape::<f64>::no_grad();
        let a = t.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.5));
        let b = a.mul_scalar(2.0);
        assert_eq!(b.value()[[0, 0]], 3.0);
        assert!(!t.needs(b.idx));
    }
}

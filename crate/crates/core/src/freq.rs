//! Frequency-domain core: centered 2-d DFT, parametric high/low-frequency
//! box masks, the learnable channel-weighted frequency split, prototype
//! pooling, and radial spectrum analysis.
//!
//! Conventions: the forward transform carries a `1/(H*W)` prefactor and is
//! center-shifted, so the DC bin sits at `(H/2, W/2)` (floor for odd sizes).
//! The inverse carries no prefactor and exactly undoes the forward.

use crate::error::{FicgenError, Result};
use crate::num::Real;
use ndarray::{Array1, Array2, Array3};
use num_complex::Complex;
use std::f64::consts::PI;

/// Centered complex spectrum of a `[C,H,W]` real map.
#[derive(Debug, Clone)]
pub struct Spectrum<F: Real> {
    pub values: Array3<Complex<F>>,
}

impl<F: Real> Spectrum<F> {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    /// Max deviation from conjugate symmetry about the center, over all bins
    /// whose mirror lies inside the grid. Near zero for spectra of real maps.
    pub fn conjugate_symmetry_residual(&self) -> f64 {
        let (c, h, w) = self.values.dim();
        let (ch, cw) = (h / 2, w / 2);
        let mut worst = 0.0f64;
        for k in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let (mu, mv) = (2 * ch as isize - u as isize, 2 * cw as isize - v as isize);
                    if mu < 0 || mv < 0 || mu as usize >= h || mv as usize >= w {
                        continue;
                    }
                    let a = self.values[[k, u, v]];
                    let b = self.values[[k, mu as usize, mv as usize]].conj();
                    let d = ((a - b).norm_sqr()).as_f64().sqrt();
                    worst = worst.max(d);
                }
            }
        }
        worst
    }
}

/// Binary frequency mask; 1 marks the high-frequency region.
#[derive(Debug, Clone)]
pub struct FreqMask {
    pub values: Array2<u8>,
    pub gamma: f64,
}

impl FreqMask {
    pub fn zero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0).count()
    }
}

/// Learnable channel-wise weights applied to the two frequency branches.
#[derive(Debug, Clone)]
pub struct FreqSplitParams<F: Real> {
    pub hf_weights: Array1<F>,
    pub lf_weights: Array1<F>,
}

impl<F: Real> FreqSplitParams<F> {
    /// Unit weights: the initial split is an exact partition of the input.
    pub fn unit(channels: usize) -> Self {
        Self {
            hf_weights: Array1::ones(channels),
            lf_weights: Array1::ones(channels),
        }
    }
}

/// Pooled frequency prototypes: one HF vector per instance plus one LF
/// context vector.
#[derive(Debug, Clone)]
pub struct FrequencyPrototypes<F: Real> {
    pub instance_protos: Array2<F>,
    pub context_proto: Array1<F>,
}

fn forward_matrix<F: Real>(n: usize) -> Array2<Complex<F>> {
    let c = (n / 2) as isize;
    Array2::from_shape_fn((n, n), |(u, h)| {
        let f = u as isize - c;
        let theta = 2.0 * PI * (f as f64) * (h as f64) / n as f64;
        Complex::new(F::of(theta.cos()), F::of(-theta.sin()))
    })
}

fn inverse_matrix<F: Real>(n: usize) -> Array2<Complex<F>> {
    let c = (n / 2) as isize;
    Array2::from_shape_fn((n, n), |(h, u)| {
        let f = u as isize - c;
        let theta = 2.0 * PI * (f as f64) * (h as f64) / n as f64;
        Complex::new(F::of(theta.cos()), F::of(theta.sin()))
    })
}

/// Centered, `1/(H*W)`-normalized 2-d DFT of each channel.
pub fn dft2d<F: Real>(x: &Array3<F>) -> Result<Spectrum<F>> {
    let (c, h, w) = x.dim();
    if h < 2 || w < 2 {
        return Err(FicgenError::InvalidInput(format!(
            "dft2d needs H,W >= 2, got {h}x{w}"
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(FicgenError::NonFinite("dft2d input".into()));
    }
    let ah = forward_matrix::<F>(h);
    let aw = forward_matrix::<F>(w);
    let awt = aw.t();
    let scale = F::of(1.0 / (h * w) as f64);
    let mut values = Array3::<Complex<F>>::zeros((c, h, w));
    for k in 0..c {
        let xc: Array2<Complex<F>> =
            x.index_axis(ndarray::Axis(0), k).mapv(|v| Complex::new(v, F::zero()));
        let s = ah.dot(&xc).dot(&awt).mapv(|z| z * scale);
        values.index_axis_mut(ndarray::Axis(0), k).assign(&s);
    }
    Ok(Spectrum { values })
}

/// Exact inverse of [`dft2d`]. Imaginary residue is discarded after a sanity
/// bound check.
pub fn idft2d<F: Real>(s: &Spectrum<F>) -> Result<Array3<F>> {
    let (c, h, w) = s.values.dim();
    if h < 2 || w < 2 {
        return Err(FicgenError::ShapeMismatch(format!(
            "idft2d needs H,W >= 2, got {h}x{w}"
        )));
    }
    let bh = inverse_matrix::<F>(h);
    let bw = inverse_matrix::<F>(w);
    let bwt = bw.t();
    let mut out = Array3::<F>::zeros((c, h, w));
    let mut residue = 0.0f64;
    for k in 0..c {
        let sc = s.values.index_axis(ndarray::Axis(0), k).to_owned();
        let z = bh.dot(&sc).dot(&bwt);
        for ((i, j), zv) in z.indexed_iter() {
            residue = residue.max(zv.im.as_f64().abs());
            out[[k, i, j]] = zv.re;
        }
    }
    if residue > 1e-4 {
        return Err(FicgenError::NonFinite(format!(
            "idft2d imaginary residue {residue:.3e} exceeds sanity bound 1e-4"
        )));
    }
    Ok(out)
}

/// High-frequency box mask: an entry is 0 iff both centered coordinates lie
/// within the central band of half-width `gamma * size`.
pub fn hf_mask(h: usize, w: usize, gamma: f64) -> Result<FreqMask> {
    if !(0.0..=0.5).contains(&gamma) {
        return Err(FicgenError::InvalidInput(format!(
            "gamma must be in [0, 0.5], got {gamma}"
        )));
    }
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let (bh, bw) = (gamma * h as f64, gamma * w as f64);
    let values = Array2::from_shape_fn((h, w), |(u, v)| {
        let in_h = (u as f64 - ch).abs() <= bh;
        let in_w = (v as f64 - cw).abs() <= bw;
        u8::from(!(in_h && in_w))
    });
    Ok(FreqMask { values, gamma })
}

/// Frequency split of Eq.-style HF/LF branches with learnable channel weights:
/// `x_hf = idft(dft(x) . M) * w_hf`, `x_lf = idft(dft(x) . (1-M)) * w_lf`.
pub fn split_frequency<F: Real>(
    x: &Array3<F>,
    gamma: f64,
    params: &FreqSplitParams<F>,
) -> Result<(Array3<F>, Array3<F>)> {
    let (c, h, w) = x.dim();
    if params.hf_weights.len() != c || params.lf_weights.len() != c {
        return Err(FicgenError::ShapeMismatch(format!(
            "split weights must have {c} channels"
        )));
    }
    let mask = hf_mask(h, w, gamma)?;
    let spec = dft2d(x)?;
    let mut hf = Array3::<Complex<F>>::zeros((c, h, w));
    let mut lf = Array3::<Complex<F>>::zeros((c, h, w));
    for k in 0..c {
        for u in 0..h {
            for v in 0..w {
                let z = spec.values[[k, u, v]];
                if mask.values[[u, v]] == 1 {
                    hf[[k, u, v]] = z;
                } else {
                    lf[[k, u, v]] = z;
                }
            }
        }
    }
    let mut x_hf = idft2d(&Spectrum { values: hf })?;
    let mut x_lf = idft2d(&Spectrum { values: lf })?;
    for k in 0..c {
        let (wh, wl) = (params.hf_weights[k], params.lf_weights[k]);
        x_hf.index_axis_mut(ndarray::Axis(0), k).mapv_inplace(|v| v * wh);
        x_lf.index_axis_mut(ndarray::Axis(0), k).mapv_inplace(|v| v * wl);
    }
    Ok((x_hf, x_lf))
}

/// Spatial-mean pooling of per-instance HF maps and the context LF map,
/// projected to dimension `d` by one shared bias-free linear map `[C, d]`.
pub fn pool_prototypes<F: Real>(
    instance_hf_feats: &[Array3<F>],
    context_lf_feat: &Array3<F>,
    projection: &Array2<F>,
) -> Result<FrequencyPrototypes<F>> {
    let d = projection.ncols();
    let c = projection.nrows();
    let pool = |m: &Array3<F>| -> Result<Array1<F>> {
        let (mc, mh, mw) = m.dim();
        if mc != c {
            return Err(FicgenError::ShapeMismatch(format!(
                "feature map has {mc} channels, projection expects {c}"
            )));
        }
        let n = F::of((mh * mw) as f64);
        let mut v = Array1::<F>::zeros(c);
        for (k, ch) in m.outer_iter().enumerate() {
            v[k] = ch.sum() / n;
        }
        Ok(v.dot(projection))
    };
    let mut instance_protos = Array2::<F>::zeros((instance_hf_feats.len(), d));
    for (i, feat) in instance_hf_feats.iter().enumerate() {
        instance_protos.row_mut(i).assign(&pool(feat)?);
    }
    let context_proto = pool(context_lf_feat)?;
    Ok(FrequencyPrototypes {
        instance_protos,
        context_proto,
    })
}

/// Mean log-power per radial annulus of the centered spectrum, channels
/// averaged. Annuli have equal width `(H/2)/bins`; bins beyond the Nyquist
/// radius are excluded.
pub fn radial_spectrum<F: Real>(x: &Array3<F>, bins: usize) -> Result<Array1<F>> {
    let (_c, h, w) = x.dim();
    if h != w {
        return Err(FicgenError::InvalidInput(format!(
            "radial_spectrum needs a square map, got {h}x{w}"
        )));
    }
    if bins == 0 || bins > h / 2 {
        return Err(FicgenError::InvalidInput(format!(
            "bins must be in [1, H/2], got {bins} for H={h}"
        )));
    }
    let spec = dft2d(x)?;
    let (c, _, _) = spec.values.dim();
    let center = (h / 2) as f64;
    let width = (h as f64 / 2.0) / bins as f64;
    let eps = 1e-20f64;
    let mut sums = vec![0.0f64; bins];
    let mut counts = vec![0usize; bins];
    for k in 0..c {
        for u in 0..h {
            for v in 0..w {
                let r = ((u as f64 - center).powi(2) + (v as f64 - center).powi(2)).sqrt();
                let bin = (r / width).floor() as usize;
                if bin >= bins {
                    continue;
                }
                let p = spec.values[[k, u, v]].norm_sqr().as_f64();
                sums[bin] += (p + eps).ln();
                counts[bin] += 1;
            }
        }
    }
    Ok(Array1::from_iter(
        sums.iter()
            .zip(counts.iter())
            .map(|(s, &n)| F::of(s / n.max(1) as f64)),
    ))
}

/// HF-to-total spectral energy ratio of the channel-mean image, DC excluded.
/// The HF region is the complement of the central `gamma` box.
pub fn hf_energy_ratio<F: Real>(x: &Array3<F>, gamma: f64) -> Result<f64> {
    let (c, h, w) = x.dim();
    let inv_c = 1.0 / c as f64;
    let mut gray = Array3::<F>::zeros((1, h, w));
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                gray[[0, i, j]] = gray[[0, i, j]] + x[[k, i, j]];
            }
        }
    }
    gray.mapv_inplace(|v| v * F::of(inv_c));
    let spec = dft2d(&gray)?;
    let mask = hf_mask(h, w, gamma)?;
    let (ch, cw) = (h / 2, w / 2);
    let mut hf = 0.0f64;
    let mut total = 0.0f64;
    for u in 0..h {
        for v in 0..w {
            if u == ch && v == cw {
                continue; // DC excluded
            }
            let p = spec.values[[0, u, v]].norm_sqr().as_f64();
            total += p;
            if mask.values[[u, v]] == 1 {
                hf += p;
            }
        }
    }
    Ok(hf / total.max(1e-30))
}

/// In-graph (differentiable) counterparts, built from tape primitives so
/// gradients flow through the split into upstream encoders and the channel
/// weights.
pub mod graph {
    use super::*;
    use crate::tensor::Var;
    use ndarray::{ArrayD, IxDyn};

    /// Precomputed real/imaginary DFT matrices for one `(H, W)` site.
    /// Forward matrices absorb the `1/(H*W)` prefactor; right-side matrices
    /// are stored pre-transposed.
    #[derive(Debug, Clone)]
    pub struct DftConsts<F: Real> {
        pub h: usize,
        pub w: usize,
        ahr: ArrayD<F>,
        ahi: ArrayD<F>,
        awr_t: ArrayD<F>,
        awi_t: ArrayD<F>,
        bhr: ArrayD<F>,
        bhi: ArrayD<F>,
        bwr_t: ArrayD<F>,
        bwi_t: ArrayD<F>,
    }

    impl<F: Real> DftConsts<F> {
        pub fn new(h: usize, w: usize) -> Self {
            let scale = F::of(1.0 / (h * w) as f64);
            let ah = forward_matrix::<F>(h);
            let aw = forward_matrix::<F>(w);
            let bh = inverse_matrix::<F>(h);
            let bw = inverse_matrix::<F>(w);
            let re = |m: &Array2<Complex<F>>| m.mapv(|z| z.re).into_dyn();
            let im = |m: &Array2<Complex<F>>| m.mapv(|z| z.im).into_dyn();
            Self {
                h,
                w,
                ahr: ah.mapv(|z| z.re * scale).into_dyn(),
                ahi: ah.mapv(|z| z.im * scale).into_dyn(),
                awr_t: re(&aw).t().as_standard_layout().into_owned().into_dyn(),
                awi_t: im(&aw).t().as_standard_layout().into_owned().into_dyn(),
                bhr: re(&bh),
                bhi: im(&bh),
                bwr_t: re(&bw).t().as_standard_layout().into_owned().into_dyn(),
                bwi_t: im(&bw).t().as_standard_layout().into_owned().into_dyn(),
            }
        }
    }

    fn left_mul<'t, F: Real>(m: &ArrayD<F>, x: Var<'t, F>) -> Var<'t, F> {
        let s = x.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mc = x.tape.constant(m.clone());
        mc.matmul(x.permute(&[1, 0, 2]).reshape(&[h, c * w]))
            .reshape(&[h, c, w])
            .permute(&[1, 0, 2])
    }

    fn right_mul<'t, F: Real>(x: Var<'t, F>, mt: &ArrayD<F>) -> Var<'t, F> {
        let s = x.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mc = x.tape.constant(mt.clone());
        x.reshape(&[c * h, w]).matmul(mc).reshape(&[c, h, w])
    }

    /// Centered, normalized DFT of a `[C,H,W]` var: returns (re, im).
    pub fn dft_var<'t, F: Real>(
        k: &DftConsts<F>,
        x: Var<'t, F>,
    ) -> (Var<'t, F>, Var<'t, F>) {
        let tr = left_mul(&k.ahr, x);
        let ti = left_mul(&k.ahi, x);
        let yr = right_mul(tr, &k.awr_t).sub(right_mul(ti, &k.awi_t));
        let yi = right_mul(tr, &k.awi_t).add(right_mul(ti, &k.awr_t));
        (yr, yi)
    }

    /// Real part of the inverse DFT of a complex `[C,H,W]` var pair.
    pub fn idft_re_var<'t, F: Real>(
        k: &DftConsts<F>,
        re: Var<'t, F>,
        im: Var<'t, F>,
    ) -> Var<'t, F> {
        let ur = left_mul(&k.bhr, re).sub(left_mul(&k.bhi, im));
        let ui = left_mul(&k.bhr, im).add(left_mul(&k.bhi, re));
        right_mul(ur, &k.bwr_t).sub(right_mul(ui, &k.bwi_t))
    }

    /// Imaginary part of the inverse DFT (residue measurement).
    pub fn idft_im_var<'t, F: Real>(
        k: &DftConsts<F>,
        re: Var<'t, F>,
        im: Var<'t, F>,
    ) -> Var<'t, F> {
        let ur = left_mul(&k.bhr, re).sub(left_mul(&k.bhi, im));
        let ui = left_mul(&k.bhr, im).add(left_mul(&k.bhi, re));
        right_mul(ur, &k.bwi_t).add(right_mul(ui, &k.bwr_t))
    }

    /// Differentiable frequency split with learnable channel weights.
    pub fn split_frequency_var<'t, F: Real>(
        k: &DftConsts<F>,
        x: Var<'t, F>,
        gamma: f64,
        hf_w: Var<'t, F>,
        lf_w: Var<'t, F>,
    ) -> (Var<'t, F>, Var<'t, F>) {
        let s = x.shape();
        let c = s[0];
        let mask = hf_mask(k.h, k.w, gamma).expect("gamma validated upstream");
        let mut m_hf = ArrayD::<F>::zeros(IxDyn(&[c, k.h, k.w]));
        let mut m_lf = ArrayD::<F>::zeros(IxDyn(&[c, k.h, k.w]));
        for ci in 0..c {
            for u in 0..k.h {
                for v in 0..k.w {
                    if mask.values[[u, v]] == 1 {
                        m_hf[[ci, u, v]] = F::one();
                    } else {
                        m_lf[[ci, u, v]] = F::one();
                    }
                }
            }
        }
        let (re, im) = dft_var(k, x);
        let x_hf = idft_re_var(k, re.mul_const(&m_hf), im.mul_const(&m_hf))
            .mul_channel_first(hf_w);
        let x_lf = idft_re_var(k, re.mul_const(&m_lf), im.mul_const(&m_lf))
            .mul_channel_first(lf_w);
        (x_hf, x_lf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::{arr2, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Independent brute-force oracle: direct O(H^2 W^2) summation of the
    /// centered, normalized transform.
    fn dft2d_bruteforce(x: &Array3<f64>) -> Array3<Complex<f64>> {
        let (c, h, w) = x.dim();
        let (ch, cw) = ((h / 2) as isize, (w / 2) as isize);
        let mut out = Array3::<Complex<f64>>::zeros((c, h, w));
        for k in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let (fu, fv) = (u as isize - ch, v as isize - cw);
                    let mut acc = Complex::new(0.0, 0.0);
                    for hh in 0..h {
                        for ww in 0..w {
                            let theta = -2.0 * PI
                                * (fu as f64 * hh as f64 / h as f64
                                    + fv as f64 * ww as f64 / w as f64);
                            acc += Complex::new(theta.cos(), theta.sin()) * x[[k, hh, ww]];
                        }
                    }
                    out[[k, u, v]] = acc / (h * w) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn constant_map_has_only_dc() {
        let c = 3.25f64;
        let x = Array3::from_elem((1, 2, 2), c);
        let s = dft2d(&x).unwrap();
        assert!((s.values[[0, 1, 1]].re - c).abs() < 1e-12);
        for (idx, z) in s.values.indexed_iter() {
            if idx != (0, 1, 1) {
                assert!(z.norm() < 1e-12, "unexpected energy at {idx:?}");
            }
        }
    }

    #[test]
    fn alternating_map_single_nyquist_bin() {
        let x: Array3<f64> = arr2(&[[1.0, -1.0], [1.0, -1.0]])
            .into_shape_with_order((1, 2, 2))
            .unwrap();
        let s = dft2d(&x).unwrap();
        // Highest horizontal frequency: centered v = 0, vertical DC row u = 1.
        assert!((s.values[[0, 1, 0]].norm() - 1.0).abs() < 1e-12);
        let nonzero = s
            .values
            .iter()
            .filter(|z| z.norm() > 1e-9)
            .count();
        assert_eq!(nonzero, 1);
        // brute-force agreement
        let bf = dft2d_bruteforce(&x);
        for (idx, z) in s.values.indexed_iter() {
            assert!((z - bf[idx]).norm() < 1e-12);
        }
        // inverse recovers the map
        let back = idft2d(&s).unwrap();
        for (idx, v) in x.indexed_iter() {
            assert!((back[idx] - v).abs() < 1e-9);
        }
    }

    #[test]
    fn bruteforce_oracle_agreement_and_roundtrip() {
        for (i, (h, w)) in [(8, 8), (5, 7), (16, 16), (2, 3)].iter().enumerate() {
            let x = rand_map(2, *h, *w, 42 + i as u64);
            let s = dft2d(&x).unwrap();
            let bf = dft2d_bruteforce(&x);
            for (idx, z) in s.values.indexed_iter() {
                assert!((z - bf[idx]).norm() < 1e-9, "oracle mismatch at {idx:?}");
            }
            let back = idft2d(&s).unwrap();
            for (idx, v) in x.indexed_iter() {
                assert!((back[idx] - v).abs() < 1e-6);
            }
            assert!(s.conjugate_symmetry_residual() < 1e-6);
        }
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let mut vals = Array3::<Complex<f64>>::zeros((1, 4, 4));
        vals[[0, 2, 2]] = Complex::new(0.7, 0.0);
        let x = idft2d(&Spectrum { values: vals }).unwrap();
        for v in x.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn dft_rejects_non_finite_and_tiny() {
        let mut x = Array3::<f64>::zeros((1, 4, 4));
        x[[0, 0, 0]] = f64::NAN;
        assert!(matches!(dft2d(&x), Err(FicgenError::NonFinite(_))));
        let x1 = Array3::<f64>::zeros((1, 1, 4));
        assert!(dft2d(&x1).is_err());
    }

    #[test]
    fn mask_zero_counts_8x8() {
        assert_eq!(hf_mask(8, 8, 0.0).unwrap().zero_count(), 1);
        assert_eq!(hf_mask(8, 8, 0.25).unwrap().zero_count(), 25);
        assert_eq!(hf_mask(8, 8, 0.5).unwrap().zero_count(), 64);
    }

    #[test]
    fn mask_rejects_bad_gamma() {
        assert!(hf_mask(8, 8, -0.1).is_err());
        assert!(hf_mask(8, 8, 0.6).is_err());
    }

    #[test]
    fn split_partitions_and_scales() {
        let x = rand_map(2, 8, 8, 5);
        let unit = FreqSplitParams::unit(2);
        let (hf, lf) = split_frequency(&x, 0.25, &unit).unwrap();
        for (idx, v) in x.indexed_iter() {
            assert!((hf[idx] + lf[idx] - v).abs() < 1e-6);
        }
        // constant map: all energy is DC, which lives in the LF box
        let c: Array3<f64> = Array3::from_elem((1, 8, 8), 0.4);
        let (chf, clf) = split_frequency(&c, 0.25, &FreqSplitParams::unit(1)).unwrap();
        for v in chf.iter() {
            assert!(v.abs() < 1e-9);
        }
        for v in clf.iter() {
            assert!((v - 0.4).abs() < 1e-9);
        }
        // doubling hf weights doubles the hf branch
        let mut p2 = FreqSplitParams::unit(2);
        p2.hf_weights.fill(2.0);
        let (hf2, _) = split_frequency(&x, 0.25, &p2).unwrap();
        for (a, b) in hf2.iter().zip(hf.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
        assert!(split_frequency(&x, 0.7, &unit).is_err());
    }

    #[test]
    fn pool_prototypes_examples() {
        let eye = Array2::from_shape_fn((3, 3), |(i, j)| f64::from(u8::from(i == j)));
        let c = Array3::from_elem((3, 4, 4), 2.5);
        let p = pool_prototypes(&[c.clone()], &c, &eye).unwrap();
        for v in p.instance_protos.row(0).iter() {
            assert!((v - 2.5).abs() < 1e-12);
        }
        // N = 0
        let p0 = pool_prototypes::<f64>(&[], &c, &eye).unwrap();
        assert_eq!(p0.instance_protos.dim(), (0, 3));
        assert_eq!(p0.context_proto.len(), 3);
        // opposite maps give opposite prototypes
        let p2 = pool_prototypes(&[c.clone(), c.mapv(|v| -v)], &c, &eye).unwrap();
        for j in 0..3 {
            assert!((p2.instance_protos[[0, j]] + p2.instance_protos[[1, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn radial_spectrum_constant_and_bounds() {
        let c = Array3::from_elem((1, 16, 16), 0.9);
        let prof = radial_spectrum(&c, 8).unwrap();
        assert!(prof[0] > prof[1] + 10.0, "DC bin should dominate");
        for k in 1..8 {
            assert!(prof[k] < -40.0, "bin {k} should be at the floor");
        }
        assert!(radial_spectrum(&c, 9).is_err());
        assert!(radial_spectrum(&c, 0).is_err());
        let rect = Array3::<f64>::zeros((1, 8, 16));
        assert!(radial_spectrum(&rect, 4).is_err());
    }

    #[test]
    fn radial_spectrum_white_noise_flat() {
        // over many seeds the mean profile slope is near zero
        let bins = 8;
        let mut mean = vec![0.0f64; bins];
        let n = 100;
        for seed in 0..n {
            let x = rand_map(1, 32, 32, 1000 + seed);
            let p = radial_spectrum(&x, bins).unwrap();
            for (m, v) in mean.iter_mut().zip(p.iter()) {
                *m += v / n as f64;
            }
        }
        // least-squares slope over bins 1.. (skip DC bin)
        let xs: Vec<f64> = (1..bins).map(|i| i as f64).collect();
        let ys = &mean[1..];
        let xm = xs.iter().sum::<f64>() / xs.len() as f64;
        let ym = ys.iter().sum::<f64>() / ys.len() as f64;
        let slope = xs
            .iter()
            .zip(ys.iter())
            .map(|(x, y)| (x - xm) * (y - ym))
            .sum::<f64>()
            / xs.iter().map(|x| (x - xm).powi(2)).sum::<f64>();
        assert!(
            slope.abs() < 0.05,
            "white noise radial profile should be flat, slope {slope}"
        );
    }

    #[test]
    fn blur_attenuates_hf_tail() {
        let x = rand_map(1, 32, 32, 77);
        // separable 5-tap gaussian-ish blur, zero padded
        let kern = [0.0625, 0.25, 0.375, 0.25, 0.0625];
        let mut blurred = x.clone();
        for pass in 0..2 {
            let src = blurred.clone();
            for i in 0..32 {
                for j in 0..32 {
                    let mut acc = 0.0;
                    for (t, kv) in kern.iter().enumerate() {
                        let o = j as isize + t as isize - 2;
                        if o >= 0 && o < 32 {
                            let idx = if pass == 0 {
                                [0, i, o as usize]
                            } else {
                                [0, o as usize, i]
                            };
                            acc += kv * src[idx];
                        }
                    }
                    let idx = if pass == 0 { [0, i, j] } else { [0, j, i] };
                    blurred[idx] = acc;
                }
            }
        }
        let p0 = radial_spectrum(&x, 16).unwrap();
        let p1 = radial_spectrum(&blurred, 16).unwrap();
        let tail0: f64 = p0.iter().skip(8).sum();
        let tail1: f64 = p1.iter().skip(8).sum();
        assert!(tail1 < tail0, "blur must lower the HF tail: {tail1} vs {tail0}");
        let r0 = hf_energy_ratio(&x, 0.25).unwrap();
        let r1 = hf_energy_ratio(&blurred, 0.25).unwrap();
        assert!(r1 < r0);
    }

    #[test]
    fn graph_split_matches_pure_and_is_differentiable() {
        let x = rand_map(3, 8, 8, 9);
        let params = FreqSplitParams::unit(3);
        let (hf, lf) = split_frequency(&x, 0.25, &params).unwrap();

        let k = graph::DftConsts::<f64>::new(8, 8);
        let tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let hw = tape.leaf(params.hf_weights.clone().into_dyn());
        let lw = tape.leaf(params.lf_weights.clone().into_dyn());
        let (ghf, glf) = graph::split_frequency_var(&k, xv, 0.25, hw, lw);
        let gh = ghf.value();
        let gl = glf.value();
        for (idx, v) in hf.indexed_iter() {
            assert!((gh[[idx.0, idx.1, idx.2]] - v).abs() < 1e-9);
        }
        for (idx, v) in lf.indexed_iter() {
            assert!((gl[[idx.0, idx.1, idx.2]] - v).abs() < 1e-9);
        }
        // gradient flows to channel weights
        let loss = ghf.mul(ghf).mean_all();
        let grads = tape.backward(loss);
        assert!(grads.get(hw).is_some());
        assert!(grads.get(xv).is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_roundtrip(seed in 0u64..500, h in 2usize..11, w in 2usize..11) {
            let x = rand_map(1, h, w, seed);
            let back = idft2d(&dft2d(&x).unwrap()).unwrap();
            for (idx, v) in x.indexed_iter() {
                prop_assert!((back[idx] - v).abs() < 1e-6);
            }
        }

        #[test]
        fn prop_parseval(seed in 0u64..500, n in 2usize..12) {
            let x = rand_map(1, n, n, seed);
            let s = dft2d(&x).unwrap();
            let spatial: f64 = x.iter().map(|v| v * v).sum();
            let spectral: f64 = s.values.iter().map(|z| z.norm_sqr()).sum();
            let lhs = spatial;
            let rhs = (n * n) as f64 * spectral;
            prop_assert!((lhs - rhs).abs() / lhs.max(1e-12) < 1e-5);
        }

        #[test]
        fn prop_mask_complement_and_monotone(h in 2usize..17, w in 2usize..17,
                                             g1 in 0.0f64..0.5, g2 in 0.0f64..0.5) {
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let m_lo = hf_mask(h, w, lo).unwrap();
            let m_hi = hf_mask(h, w, hi).unwrap();
            for u in 0..h {
                for v in 0..w {
                    // complement partitions the grid
                    prop_assert_eq!(m_lo.values[[u, v]] + (1 - m_lo.values[[u, v]]), 1);
                    // zero-set grows with gamma
                    if m_lo.values[[u, v]] == 0 {
                        prop_assert_eq!(m_hi.values[[u, v]], 0);
                    }
                }
            }
        }

        #[test]
        fn prop_split_linearity(seed in 0u64..200, a in -3.0f64..3.0) {
            let x = rand_map(1, 8, 8, seed);
            let params = FreqSplitParams::unit(1);
            let (hf, _) = split_frequency(&x, 0.25, &params).unwrap();
            let xs = x.mapv(|v| v * a);
            let (hfs, _) = split_frequency(&xs, 0.25, &params).unwrap();
            for (i, v) in hf.indexed_iter() {
                prop_assert!((hfs[i] - a * v).abs() < 1e-6);
            }
        }
    }
}

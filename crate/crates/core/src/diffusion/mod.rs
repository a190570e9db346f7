//! Toy latent-diffusion backbone with the frequency-conditioning stack
//! injected at the 8x8 and 16x16 decoder resolutions: noise schedule,
//! lossless latent packing, training objective, and Euler sampling with
//! classifier-free guidance.

pub mod checkpoint;
pub mod cond;
pub mod sample;
pub mod train;
pub mod unet;

use crate::asfa::FusionKind;
use crate::error::{FicgenError, Result};
use crate::nn::ParamGroup;
use crate::num::Real;
use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

/// Variance-preserving cosine schedule over `[0, T]`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<F: Real> {
    pub alphas: Array1<F>,
    pub sigmas: Array1<F>,
    pub t_max: usize,
}

/// Cosine schedule: `alpha_t = cos(pi/2 * t/T)`, `sigma_t = sin(pi/2 * t/T)`.
pub fn make_schedule<F: Real>(t_max: usize) -> Result<NoiseSchedule<F>> {
    if t_max < 10 {
        return Err(FicgenError::InvalidInput(format!(
            "schedule needs T >= 10, got {t_max}"
        )));
    }
    let mut alphas = Array1::<F>::zeros(t_max + 1);
    let mut sigmas = Array1::<F>::zeros(t_max + 1);
    for t in 0..=t_max {
        let theta = std::f64::consts::FRAC_PI_2 * t as f64 / t_max as f64;
        alphas[t] = F::of(theta.cos());
        sigmas[t] = F::of(theta.sin());
    }
    Ok(NoiseSchedule {
        alphas,
        sigmas,
        t_max,
    })
}

impl<F: Real> NoiseSchedule<F> {
    pub fn alpha(&self, t: usize) -> F {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> F {
        self.sigmas[t]
    }
}

/// `z_t = alpha_t * z0 + sigma_t * eps`, exactly.
pub fn forward_diffuse<F: Real>(
    z0: &Array3<F>,
    t: usize,
    eps: &Array3<F>,
    sched: &NoiseSchedule<F>,
) -> Result<Array3<F>> {
    if t > sched.t_max {
        return Err(FicgenError::InvalidInput(format!(
            "t = {t} outside [0, {}]",
            sched.t_max
        )));
    }
    if z0.dim() != eps.dim() {
        return Err(FicgenError::ShapeMismatch(
            "noise shape must match the latent".into(),
        ));
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    Ok(z0.mapv(|v| v * a) + &eps.mapv(|v| v * s))
}

/// Lossless space-to-depth packing `[3, S, S] -> [12, S/2, S/2]`.
pub fn pack_image<F: Real>(img: &Array3<F>) -> Array3<F> {
    let (c, h, w) = img.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "packing needs even sides");
    let mut out = Array3::<F>::zeros((c * 4, h / 2, w / 2));
    for k in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        out[[k * 4 + dy * 2 + dx, i, j]] = img[[k, 2 * i + dy, 2 * j + dx]];
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of [`pack_image`].
pub fn unpack_latent<F: Real>(z: &Array3<F>) -> Array3<F> {
    let (c4, h, w) = z.dim();
    let c = c4 / 4;
    let mut out = Array3::<F>::zeros((c, h * 2, w * 2));
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                for dy in 0..2 {
                    for dx in 0..2 {
                        out[[k, 2 * i + dy, 2 * j + dx]] = z[[k * 4 + dy * 2 + dx, i, j]];
                    }
                }
            }
        }
    }
    out
}

/// Classifier-free guidance: `eps_u + s * (eps_c - eps_u)`. At `s = 1` the
/// combination is the conditional prediction itself, returned exactly.
pub fn cfg_combine<F: Real>(eps_cond: &Array3<F>, eps_uncond: &Array3<F>, s: F) -> Array3<F> {
    if s == F::one() {
        return eps_cond.clone();
    }
    let mut out = eps_uncond.clone();
    ndarray::Zip::from(&mut out).and(eps_cond).for_each(|u, &c| {
        *u = *u + s * (c - *u);
    });
    out
}

/// Training phase: which parameter group moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Pretrain the bare backbone with caption-only conditioning.
    PretrainBackbone,
    /// Backbone frozen; only the conditioning stack trains.
    FicgenOnly,
    /// Diagnostic mode: everything trains (used by the overfit check,
    /// never after a freeze).
    Joint,
}

impl Phase {
    pub fn trainable(&self, group: ParamGroup) -> bool {
        match self {
            Phase::PretrainBackbone => group == ParamGroup::Backbone,
            Phase::FicgenOnly => group == ParamGroup::Ficgen,
            Phase::Joint => true,
        }
    }
}

/// All model hyperparameters. Everything that affects parameter shapes or
/// the forward graph lives here and is serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Token dimension of the conditioning stack.
    pub d: usize,
    /// Queries per frequency resampler.
    pub m: usize,
    /// Resampler depth (transformer blocks).
    pub depth: usize,
    /// Fourier octaves for the box embedding.
    pub n_freqs: usize,
    pub heads: usize,
    /// HF mask half-width fraction.
    pub gamma: f64,
    /// U-Net channels at the 32/16/8 levels.
    pub unet_channels: [usize; 3],
    /// Exemplar encoder intermediate channels.
    pub feat_mid: [usize; 2],
    /// Exemplar encoder output channels.
    pub feat_channels: usize,
    pub t_max: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub crop_size: usize,
    pub caption_drop: f64,
    pub use_fpr: bool,
    pub use_vfea: bool,
    pub use_asfa: bool,
    pub fusion: FusionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            d: 64,
            m: 4,
            depth: 2,
            n_freqs: 8,
            heads: 1,
            gamma: 0.25,
            unet_channels: [32, 48, 64],
            feat_mid: [12, 24],
            feat_channels: 32,
            t_max: 1000,
            num_classes: 6,
            vocab_size: 12,
            crop_size: 32,
            caption_drop: 0.1,
            use_fpr: true,
            use_vfea: true,
            use_asfa: true,
            fusion: FusionKind::Depthwise,
        }
    }
}

impl ModelConfig {
    pub fn latent_channels(&self) -> usize {
        12
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 8 != 0 || self.image_size < 16 {
            return Err(FicgenError::Config("image_size must be a multiple of 8, >= 16".into()));
        }
        if !(0.0..=0.5).contains(&self.gamma) {
            return Err(FicgenError::Config("gamma must be in [0, 0.5]".into()));
        }
        if self.d % self.heads != 0 {
            return Err(FicgenError::Config("heads must divide d".into()));
        }
        if !(0.0..=1.0).contains(&self.caption_drop) {
            return Err(FicgenError::Config("caption_drop must be in [0, 1]".into()));
        }
        if self.crop_size % 8 != 0 {
            return Err(FicgenError::Config("crop_size must be a multiple of 8".into()));
        }
        Ok(())
    }
}

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use cond::{build_cond, cond_consts, CondArrays, FicgenCondVars};
pub use sample::{sample, sample_time_grid, SampleOpts};
pub use train::{training_step, ModelState};
pub use unet::{FicgenModel, UnetCond};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_invariants() {
        let s = make_schedule::<f64>(1000).unwrap();
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
        assert!(s.alpha(1000) < 1e-2);
        for t in 0..=1000 {
            let (a, g) = (s.alpha(t), s.sigma(t));
            assert!((a * a + g * g - 1.0).abs() < 1e-6);
            if t > 0 {
                assert!(s.alpha(t) <= s.alpha(t - 1));
                assert!(s.sigma(t) >= s.sigma(t - 1));
            }
        }
        assert!(make_schedule::<f64>(5).is_err());
    }

    #[test]
    fn forward_diffuse_endpoints() {
        let sched = make_schedule::<f64>(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = Array3::from_shape_fn((2, 3, 3), |_| randn::<f64, _>(&mut rng));
        let eps = Array3::from_shape_fn((2, 3, 3), |_| randn::<f64, _>(&mut rng));
        let z = forward_diffuse(&z0, 0, &eps, &sched).unwrap();
        assert_eq!(z, z0);
        let zt = forward_diffuse(&z0, 100, &eps, &sched).unwrap();
        for (a, b) in zt.iter().zip(eps.iter()) {
            assert!((a - b).abs() < 1e-9, "t = T should be pure noise");
        }
        assert!(forward_diffuse(&z0, 101, &eps, &sched).is_err());
    }

    #[test]
    fn forward_diffuse_moments_montecarlo() {
        let sched = make_schedule::<f64>(1000).unwrap();
        let t = 500;
        let z0 = Array3::from_elem((1, 2, 2), 0.7);
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for _ in 0..n {
            let eps = Array3::from_shape_fn((1, 2, 2), |_| randn::<f64, _>(&mut rng));
            let z = forward_diffuse(&z0, t, &eps, &sched).unwrap();
            let v = z[[0, 0, 0]];
            mean += v;
            m2 += v * v;
        }
        mean /= n as f64;
        let var = m2 / n as f64 - mean * mean;
        let expect_mean = sched.alpha(t) * 0.7;
        let expect_std = sched.sigma(t);
        let se = expect_std / (n as f64).sqrt();
        assert!(
            (mean - expect_mean).abs() < 3.0 * se,
            "mean {mean} vs {expect_mean} (3se = {})",
            3.0 * se
        );
        assert!((var.sqrt() - expect_std).abs() < 0.03);
    }

    #[test]
    fn pack_unpack_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Array3::from_shape_fn((3, 8, 8), |_| randn::<f32, _>(&mut rng));
        let z = pack_image(&img);
        assert_eq!(z.dim(), (12, 4, 4));
        assert_eq!(unpack_latent(&z), img);
    }

    #[test]
    fn cfg_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Array3::from_shape_fn((1, 2, 2), |_| randn::<f64, _>(&mut rng));
        let u = Array3::from_shape_fn((1, 2, 2), |_| randn::<f64, _>(&mut rng));
        assert_eq!(cfg_combine(&c, &u, 1.0), c);
        assert_eq!(cfg_combine(&c, &c, 7.5), c);
        let one_c = Array3::from_elem((1, 1, 1), 1.0);
        let zero_u = Array3::from_elem((1, 1, 1), 0.0);
        assert_eq!(cfg_combine(&one_c, &zero_u, 7.5)[[0, 0, 0]], 7.5);
    }
}

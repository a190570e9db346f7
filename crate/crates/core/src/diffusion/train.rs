//! Model state and the training step: sample a timestep and noise per
//! sample, build the conditioning graph, regress the noise, and update only
//! the parameter group the current phase designates trainable.

use super::cond::build_cond;
use super::unet::{FicgenModel, UnetCond};
use super::{forward_diffuse, make_schedule, pack_image, ModelConfig, NoiseSchedule, Phase};
use crate::error::{FicgenError, Result};
use crate::exemplar::ExemplarBank;
use crate::nn::{randn, AdamW, Ctx, ParamStore};
use crate::num::Real;
use crate::scenegen::SceneSample;
use crate::tensor::{ops, Tape};
use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Model weights, optimizer state, schedule, and phase.
#[derive(Clone)]
pub struct ModelState<F: Real> {
    pub model: FicgenModel,
    pub params: ParamStore<F>,
    pub sched: NoiseSchedule<F>,
    pub step: u64,
    pub phase: Phase,
}

impl<F: Real> ModelState<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let model = FicgenModel::new(cfg.clone());
        let mut params = ParamStore::new(seed);
        model.register(&mut params);
        Ok(Self {
            model,
            params,
            sched: make_schedule(cfg.t_max)?,
            step: 0,
            phase: Phase::PretrainBackbone,
        })
    }

    /// Enter the conditioning phase: the backbone is frozen from here on.
    pub fn freeze_backbone(&mut self) {
        self.phase = Phase::FicgenOnly;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.cfg
    }
}

fn sample_loss_and_grads<F: Real>(
    state: &ModelState<F>,
    sample: &SceneSample<F>,
    bank: &ExemplarBank,
    seed: u64,
) -> Result<(f64, BTreeMap<String, ArrayD<F>>)> {
    let cfg = state.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.gen_range(1..=cfg.t_max);
    let eps = Array3::<F>::from_shape_fn(
        (
            cfg.latent_channels(),
            cfg.latent_size(),
            cfg.latent_size(),
        ),
        |_| randn::<F, _>(&mut rng),
    );
    let drop_caption = rng.gen_bool(cfg.caption_drop);
    let z0 = pack_image(&sample.image);
    let z_t = forward_diffuse(&z0, t, &eps, &state.sched)?;

    let tape = Tape::<F>::new();
    let ctx = Ctx::new(&tape, &state.params);
    let z_var = tape.constant(z_t.into_dyn());
    let pred = if drop_caption {
        state.model.forward(&ctx, z_var, t, &UnetCond::Null)
    } else {
        match state.phase {
            Phase::PretrainBackbone => state.model.forward(
                &ctx,
                z_var,
                t,
                &UnetCond::CaptionOnly {
                    caption: &sample.layout.caption,
                },
            ),
            Phase::FicgenOnly | Phase::Joint => {
                let ficgen =
                    build_cond(&ctx, &state.model, &sample.layout, bank, Some(&sample.image), &mut rng)?;
                state.model.forward(
                    &ctx,
                    z_var,
                    t,
                    &UnetCond::Full {
                        caption: &sample.layout.caption,
                        ficgen: &ficgen,
                    },
                )
            }
        }
    };
    let loss = ops::mse_const(pred, &eps.into_dyn());
    let loss_val = loss.scalar().as_f64();
    let mut grads = tape.backward(loss);
    Ok((loss_val, ctx.param_grads(&mut grads)))
}

/// One optimizer step over a batch. Returns the mean per-element squared
/// error. Fails before any update if the bank is missing a class present in
/// the batch, if the loss is non-finite, or on any conditioning error.
pub fn training_step<F: Real>(
    state: &mut ModelState<F>,
    batch: &[SceneSample<F>],
    bank: &ExemplarBank,
    opt: &AdamW,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(FicgenError::InvalidInput("empty batch".into()));
    }
    for sample in batch {
        let missing = bank.missing_for(&sample.layout);
        if !missing.is_empty() {
            return Err(FicgenError::UnknownClass(format!(
                "bank lacks classes {:?} present in the batch",
                missing
                    .iter()
                    .map(|&c| bank.class_name(c).to_string())
                    .collect::<Vec<_>>()
            )));
        }
    }
    let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.gen()).collect();
    let results: Vec<Result<(f64, BTreeMap<String, ArrayD<F>>)>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(sample, &seed)| sample_loss_and_grads(state, sample, bank, seed))
        .collect();

    let inv_b = F::of(1.0 / batch.len() as f64);
    let mut total_loss = 0.0;
    let mut grads: BTreeMap<String, ArrayD<F>> = BTreeMap::new();
    for r in results {
        let (loss, g) = r?;
        total_loss += loss;
        for (name, arr) in g {
            grads
                .entry(name)
                .and_modify(|acc| acc.zip_mut_with(&arr, |a, b| *a += *b))
                .or_insert(arr);
        }
    }
    for g in grads.values_mut() {
        g.mapv_inplace(|v| v * inv_b);
    }
    let mean_loss = total_loss / batch.len() as f64;
    if !mean_loss.is_finite() {
        return Err(FicgenError::Diverged(format!(
            "non-finite loss at step {}",
            state.step
        )));
    }
    let phase = state.phase;
    opt.step(&mut state.params, &grads, state.step + 1, |g| {
        phase.trainable(g)
    })?;
    state.step += 1;
    Ok(mean_loss)
}

/// Run `steps` optimizer steps over preloaded samples, drawing batch
/// indices from `rng`. Invokes `on_step(step, loss)` after each update.
pub fn train_phase<F: Real>(
    state: &mut ModelState<F>,
    samples: &[SceneSample<F>],
    bank: &ExemplarBank,
    opt: &AdamW,
    steps: u64,
    batch: usize,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(u64, f64),
) -> Result<()> {
    if samples.is_empty() {
        return Err(FicgenError::Dataset("no training samples".into()));
    }
    for _ in 0..steps {
        let batch_samples: Vec<SceneSample<F>> = (0..batch)
            .map(|_| samples[rng.gen_range(0..samples.len())].clone())
            .collect();
        let loss = training_step(state, &batch_samples, bank, opt, rng)?;
        on_step(state.step, loss);
    }
    Ok(())
}

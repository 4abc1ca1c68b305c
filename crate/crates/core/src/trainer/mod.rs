//! Preference losses with closed-form gradients, LoRA-restricted optimizer
//! steps and a finite-difference gradient checker.

pub mod gradcheck;
pub mod optim;

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{grad_check, randomize_adapters, GradCheckReport, Probe};
pub use optim::{apply_update, OptimizerState};

use crate::learner::diffusion::NoiseDraw;
use crate::learner::Learner;
use crate::learner::{CategoricalLearner, DiffusionLearner, GradientSet, LearnerError, Model, ParameterSet};
use crate::pairgen::PreferencePair;
use crate::scalar::{neg_log_sigmoid, sigmoid, Scalar};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {0}")]
    Numerical(String),
    #[error("{variant:?} loss needs the {needs} learner")]
    Unsupported { variant: LossVariant, needs: &'static str },
    #[error("gradient does not conform to parameters: {0}")]
    Shape(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// `−ln σ(β·[log π(x⁺) − log π(x⁻)])`, no reference policy.
    DpoAsWritten,
    /// Log-ratios measured against a frozen reference copy.
    DpoReferenced,
    /// Mean of `L_denoise(x⁺) − L_denoise(x⁻)`; unbounded, so always clipped.
    DdpoRaw,
    /// `−ln σ(−β·[L_denoise(x⁺) − L_denoise(x⁻)])`.
    DdpoSigmoid,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::DpoAsWritten => "dpo_as_written",
            LossVariant::DpoReferenced => "dpo_referenced",
            LossVariant::DdpoRaw => "ddpo_raw",
            LossVariant::DdpoSigmoid => "ddpo_sigmoid",
        }
    }

    pub fn is_diffusion(self) -> bool {
        matches!(self, LossVariant::DdpoRaw | LossVariant::DdpoSigmoid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub loss: LossVariant,
    pub lora_only: bool,
    /// `None` disables clipping (refused for `ddpo_raw`).
    pub clip_norm: Option<f64>,
    /// `(t, ε)` draws per pair for the diffusion losses.
    pub noise_draws: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            learning_rate: 0.003,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            loss: LossVariant::DpoAsWritten,
            lora_only: true,
            clip_norm: Some(5.0),
            noise_draws: 4,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::Config(m.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
        {
            return bad("adam constants out of range");
        }
        match self.clip_norm {
            Some(c) if !(c > 0.0 && c.is_finite()) => return bad("clip_norm must be positive"),
            None if self.loss == LossVariant::DdpoRaw => return bad("ddpo_raw requires gradient clipping"),
            _ => {}
        }
        if self.loss.is_diffusion() && self.noise_draws == 0 {
            return bad("noise_draws must be at least 1");
        }
        Ok(())
    }
}

/// Loss value, gradients (already clipped) and the pre-clip norm.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grads: GradientSet<T>,
    pub grad_norm: T,
}

fn finish<T: Scalar>(
    loss: T,
    params: &ParameterSet<T>,
    effective: &BTreeMap<usize, crate::tensor::Matrix<T>>,
    config: &TrainingConfig,
) -> Result<LossOutput<T>, TrainerError> {
    let mut grads = GradientSet::from_effective(params, effective, config.lora_only);
    if !loss.is_finite() {
        return Err(TrainerError::Numerical("loss".into()));
    }
    if !grads.is_finite() {
        return Err(TrainerError::Numerical("gradient".into()));
    }
    let grad_norm = match config.clip_norm {
        Some(c) => grads.clip(T::of(c)),
        None => grads.norm(),
    };
    Ok(LossOutput { loss, grads, grad_norm })
}

/// Likelihood gap `log π(x⁺|p) − log π(x⁻|p)` under `params`.
pub fn likelihood_gap<T: Scalar>(learner: &CategoricalLearner, params: &ParameterSet<T>, pair: &PreferencePair) -> Result<T, TrainerError> {
    let up = learner.log_likelihood(params, &pair.prompt, &pair.chosen, None)?;
    let down = learner.log_likelihood(params, &pair.prompt, &pair.rejected, None)?;
    Ok(up - down)
}

/// Mean `−ln σ(β·Δ)` of precomputed gaps, accumulated as the trainer does.
pub fn dpo_objective<T: Scalar>(gaps: &[T], beta: f64) -> T {
    let n = T::of_usize(gaps.len());
    gaps.iter().fold(T::zero(), |acc, &d| acc + neg_log_sigmoid(T::of(beta) * d) / n)
}

/// Mean `−ln σ(β·Δ)` over the batch. `reference` is consulted only by the
/// referenced variant, where `Δ` subtracts the reference policy's gap.
pub fn dpo_loss_and_grad<T: Scalar>(
    learner: &CategoricalLearner,
    params: &ParameterSet<T>,
    reference: Option<&ParameterSet<T>>,
    batch: &[PreferencePair],
    config: &TrainingConfig,
) -> Result<LossOutput<T>, TrainerError> {
    if config.loss.is_diffusion() {
        return Err(TrainerError::Unsupported { variant: config.loss, needs: "diffusion" });
    }
    if batch.is_empty() {
        return Err(TrainerError::EmptyBatch);
    }
    let beta = T::of(config.beta);
    let n = T::of_usize(batch.len());
    let mut loss = T::zero();
    let mut effective = BTreeMap::new();
    for pair in batch {
        let mut delta = likelihood_gap(learner, params, pair)?;
        if config.loss == LossVariant::DpoReferenced {
            let r = reference.ok_or_else(|| TrainerError::Config("referenced loss without a reference copy".into()))?;
            delta -= likelihood_gap(learner, r, pair)?;
        }
        let z = beta * delta;
        loss += neg_log_sigmoid(z) / n;
        // d/dΔ of −ln σ(βΔ) is −β·σ(−βΔ)
        let dl = -beta * sigmoid(-z) / n;
        learner.accumulate_log_likelihood_grad(params, &pair.prompt, &pair.chosen, None, dl, &mut effective)?;
        learner.accumulate_log_likelihood_grad(params, &pair.prompt, &pair.rejected, None, -dl, &mut effective)?;
    }
    finish(loss, params, &effective, config)
}

/// One list of shared `(t, ε)` draws per pair.
pub fn sample_pair_draws<T: Scalar>(
    learner: &DiffusionLearner<T>,
    pairs: usize,
    per_pair: usize,
    rng: &mut dyn RngCore,
) -> Vec<Vec<NoiseDraw<T>>> {
    (0..pairs).map(|_| NoiseDraw::sample_many(rng, per_pair, learner.schedule.steps(), learner.scene_dim())).collect()
}

/// Diffusion surrogate: per pair, `d = L_denoise(x⁺) − L_denoise(x⁻)` on the
/// same draws; `ddpo_raw` averages `d`, `ddpo_sigmoid` averages `−ln σ(−β·d)`.
pub fn ddpo_loss_and_grad<T: Scalar>(
    learner: &DiffusionLearner<T>,
    params: &ParameterSet<T>,
    batch: &[PreferencePair],
    draws: &[Vec<NoiseDraw<T>>],
    config: &TrainingConfig,
) -> Result<LossOutput<T>, TrainerError> {
    if !config.loss.is_diffusion() {
        return Err(TrainerError::Unsupported { variant: config.loss, needs: "categorical" });
    }
    if batch.is_empty() {
        return Err(TrainerError::EmptyBatch);
    }
    if draws.len() != batch.len() {
        return Err(TrainerError::Config(format!("{} draw lists for {} pairs", draws.len(), batch.len())));
    }
    let beta = T::of(config.beta);
    let n = T::of_usize(batch.len());
    let mut loss = T::zero();
    let mut effective = BTreeMap::new();
    for (pair, d) in batch.iter().zip(draws) {
        let up = learner.denoise_loss(params, &pair.prompt, &pair.chosen, d)?;
        let down = learner.denoise_loss(params, &pair.prompt, &pair.rejected, d)?;
        let diff = up - down;
        let coef = match config.loss {
            LossVariant::DdpoRaw => {
                loss += diff / n;
                T::one() / n
            }
            _ => {
                loss += neg_log_sigmoid(-beta * diff) / n;
                beta * sigmoid(beta * diff) / n
            }
        };
        learner.accumulate_denoise_grad(params, &pair.prompt, &pair.chosen, d, coef, &mut effective)?;
        learner.accumulate_denoise_grad(params, &pair.prompt, &pair.rejected, d, -coef, &mut effective)?;
    }
    finish(loss, params, &effective, config)
}

/// Dispatches on the learner; diffusion draws come from `rng`.
pub fn loss_and_grad<T: Scalar>(
    model: &Model<T>,
    params: &ParameterSet<T>,
    reference: Option<&ParameterSet<T>>,
    batch: &[PreferencePair],
    config: &TrainingConfig,
    rng: &mut dyn RngCore,
) -> Result<LossOutput<T>, TrainerError> {
    match model {
        Model::Categorical(l) => dpo_loss_and_grad(l, params, reference, batch, config),
        Model::Diffusion(l) => {
            let draws = sample_pair_draws(l, batch.len(), config.noise_draws, rng);
            ddpo_loss_and_grad(l, params, batch, &draws, config)
        }
    }
}

/// Per-step record for the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub version: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub batch_size: usize,
    pub loss_variant: LossVariant,
    pub wall_ms: f64,
}

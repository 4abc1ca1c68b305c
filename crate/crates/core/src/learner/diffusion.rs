//! Toy Gaussian diffusion learner over scene vectors.
//!
//! The ε-predictor is a two-layer tanh perceptron on
//! `[x_t, t/S, prompt features, critique features]`; both weight matrices
//! carry LoRA adapters. Sampling runs the ancestral reverse chain with
//! `σ_t² = β_t` and decodes the result by nearest codeword.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::{LoraAdapter, ParameterSet};
use super::schedule::NoiseSchedule;
use super::{critique_features, Learner, LearnerError, CRITIQUE_DIM};
use crate::scalar::Scalar;
use crate::synthworld::{PromptEncoder, PromptSpec, Scene, SceneCodec, SceneVector, WorldConfig};
use crate::tensor::Matrix;
use crate::verifier::Critique;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub world: WorldConfig,
    pub hidden: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_init_scale: f64,
    /// Multiplier on the `1/√fan_in` scale of the random base weights.
    pub init_scale: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            hidden: 64,
            steps: 10,
            beta_start: 1e-3,
            beta_end: 0.2,
            lora_rank: 4,
            lora_alpha: 1.0,
            lora_init_scale: 0.1,
            init_scale: 1.0,
        }
    }
}

/// Predicts the noise that produced `x_t`.
pub trait EpsilonPredictor<T: Scalar> {
    /// `cond` is the prompt features followed by the critique features.
    fn predict(&self, x_t: &[T], t: usize, cond: &[T]) -> Result<Vec<T>, LearnerError>;
}

/// One `(t, ε)` draw of the denoising objective.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<T> {
    pub t: usize,
    pub eps: Vec<T>,
}

impl<T: Scalar> NoiseDraw<T> {
    pub fn sample(rng: &mut dyn RngCore, steps: usize, dim: usize) -> Self {
        let t = rng.random_range(1..=steps);
        let eps = (0..dim).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        Self { t, eps }
    }

    pub fn sample_many(rng: &mut dyn RngCore, count: usize, steps: usize, dim: usize) -> Vec<Self> {
        (0..count).map(|_| Self::sample(rng, steps, dim)).collect()
    }
}

pub const W1: usize = 0;
pub const B1: usize = 1;
pub const W2: usize = 2;
pub const B2: usize = 3;

#[derive(Debug, Clone)]
pub struct DiffusionLearner<T> {
    pub config: DiffusionConfig,
    pub schedule: NoiseSchedule<T>,
    codec: SceneCodec,
    encoder: PromptEncoder,
}

/// The perceptron bound to a parameter set.
pub struct Mlp<'a, T> {
    learner: &'a DiffusionLearner<T>,
    params: &'a ParameterSet<T>,
}

struct Cache<T> {
    z: Vec<T>,
    h: Vec<T>,
}

impl<T: Scalar> DiffusionLearner<T> {
    pub fn new(config: DiffusionConfig) -> Result<Self, LearnerError> {
        let schedule = NoiseSchedule::linear(config.steps, config.beta_start, config.beta_end)?;
        Ok(Self { schedule, codec: SceneCodec::new(config.world), encoder: PromptEncoder::new(config.world), config })
    }

    pub fn scene_dim(&self) -> usize {
        self.codec.dim()
    }

    pub fn codec(&self) -> &SceneCodec {
        &self.codec
    }

    pub fn cond_dim(&self) -> usize {
        self.encoder.dim() + CRITIQUE_DIM
    }

    pub fn input_dim(&self) -> usize {
        self.scene_dim() + 1 + self.cond_dim()
    }

    pub fn condition(&self, prompt: &PromptSpec, critique: Option<&Critique>) -> Vec<T> {
        let mut c = self.encoder.encode::<T>(prompt);
        c.extend(critique_features::<T>(critique));
        c
    }

    pub fn mlp<'a>(&'a self, params: &'a ParameterSet<T>) -> Mlp<'a, T> {
        Mlp { learner: self, params }
    }

    fn check_draws(&self, draws: &[NoiseDraw<T>]) -> Result<(), LearnerError> {
        if draws.is_empty() {
            return Err(LearnerError::Argument("denoising loss needs at least one noise draw".into()));
        }
        for d in draws {
            if d.t == 0 || d.t > self.schedule.steps() || d.eps.len() != self.scene_dim() {
                return Err(LearnerError::Argument(format!("bad noise draw at t={}", d.t)));
            }
        }
        Ok(())
    }

    /// Mean over draws of `‖ε_θ(x_t, t, p) − ε‖²` for the clean scene `scene`.
    pub fn denoise_loss(
        &self,
        params: &ParameterSet<T>,
        prompt: &PromptSpec,
        scene: &Scene,
        draws: &[NoiseDraw<T>],
    ) -> Result<T, LearnerError> {
        self.check_draws(draws)?;
        let x0 = self.codec.encode::<T>(scene)?.values;
        denoise_loss_with(&self.mlp(params), &self.schedule, &x0, &self.condition(prompt, None), draws)
    }

    /// Adds `coef · ∂L_denoise/∂W_eff` into `grads` and returns the loss value.
    pub fn accumulate_denoise_grad(
        &self,
        params: &ParameterSet<T>,
        prompt: &PromptSpec,
        scene: &Scene,
        draws: &[NoiseDraw<T>],
        coef: T,
        grads: &mut BTreeMap<usize, Matrix<T>>,
    ) -> Result<T, LearnerError> {
        self.check_draws(draws)?;
        let x0 = self.codec.encode::<T>(scene)?.values;
        let cond = self.condition(prompt, None);
        let mlp = self.mlp(params);
        let n = T::of_usize(draws.len());
        let mut loss = T::zero();
        for d in draws {
            let x_t = self.schedule.forward_noising(&x0, d.t, &d.eps)?;
            let (out, cache) = mlp.forward(&x_t, d.t, &cond)?;
            let resid: Vec<T> = out.iter().zip(&d.eps).map(|(&o, &e)| o - e).collect();
            loss += resid.iter().map(|&r| r * r).sum::<T>() / n;
            let dout: Vec<T> = resid.iter().map(|&r| T::of(2.0) * r * coef / n).collect();
            mlp.backward(&cache, &dout, grads);
        }
        Ok(loss)
    }

    /// Ancestral sampling from `x_S ~ N(0, I)`.
    pub fn sample_reverse(
        &self,
        params: &ParameterSet<T>,
        prompt: &PromptSpec,
        critique: Option<&Critique>,
        rng: &mut dyn RngCore,
    ) -> Result<SceneVector<T>, LearnerError> {
        let start: Vec<T> = (0..self.scene_dim()).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        let values = reverse_from(&self.mlp(params), &self.schedule, start, &self.condition(prompt, critique), rng)?;
        Ok(SceneVector { values })
    }
}

/// Mean over draws of `‖predictor(√ᾱ_t x0 + √(1-ᾱ_t) ε, t) − ε‖²`.
pub fn denoise_loss_with<T: Scalar, P: EpsilonPredictor<T> + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule<T>,
    x0: &[T],
    cond: &[T],
    draws: &[NoiseDraw<T>],
) -> Result<T, LearnerError> {
    if draws.is_empty() {
        return Err(LearnerError::Argument("denoising loss needs at least one noise draw".into()));
    }
    let mut total = T::zero();
    for d in draws {
        let x_t = schedule.forward_noising(x0, d.t, &d.eps)?;
        let pred = predictor.predict(&x_t, d.t, cond)?;
        total += pred.iter().zip(&d.eps).map(|(&p, &e)| (p - e) * (p - e)).sum::<T>();
    }
    Ok(total / T::of_usize(draws.len()))
}

/// Runs the reverse chain `t = S..1` from `start`:
/// `μ = (x_t − β_t/√(1−ᾱ_t)·ε̂) / √(1−β_t)`, plus `√β_t·z` for `t > 1`.
pub fn reverse_from<T: Scalar, P: EpsilonPredictor<T> + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule<T>,
    start: Vec<T>,
    cond: &[T],
    rng: &mut dyn RngCore,
) -> Result<Vec<T>, LearnerError> {
    let mut x = start;
    for t in (1..=schedule.steps()).rev() {
        let eps = predictor.predict(&x, t, cond)?;
        let beta = schedule.beta(t);
        let coef = beta / (T::one() - schedule.alpha_bar(t)).sqrt();
        let scale = T::one() / (T::one() - beta).sqrt();
        let sigma = beta.sqrt();
        for (xi, &e) in x.iter_mut().zip(&eps) {
            let mu = (*xi - coef * e) * scale;
            *xi = if t > 1 { mu + sigma * T::of(rng.sample::<f64, _>(StandardNormal)) } else { mu };
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::Numerical(format!("reverse step t={t}")));
        }
    }
    Ok(x)
}

impl<T: Scalar> Mlp<'_, T> {
    fn forward(&self, x_t: &[T], t: usize, cond: &[T]) -> Result<(Vec<T>, Cache<T>), LearnerError> {
        let mut z = Vec::with_capacity(self.learner.input_dim());
        z.extend_from_slice(x_t);
        z.push(T::of_usize(t) / T::of_usize(self.learner.schedule.steps()));
        z.extend_from_slice(cond);
        if z.len() != self.learner.input_dim() {
            return Err(LearnerError::Shape(format!("predictor input {} != {}", z.len(), self.learner.input_dim())));
        }
        let p = self.params;
        let b1 = p.tensor(B1).value.as_slice();
        let h: Vec<T> = p.tensor(W1).apply(&z).iter().zip(b1).map(|(&a, &b)| (a + b).tanh()).collect();
        let b2 = p.tensor(B2).value.as_slice();
        let out: Vec<T> = p.tensor(W2).apply(&h).iter().zip(b2).map(|(&a, &b)| a + b).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::Numerical("epsilon prediction".into()));
        }
        Ok((out, Cache { z, h }))
    }

    fn backward(&self, cache: &Cache<T>, dout: &[T], grads: &mut BTreeMap<usize, Matrix<T>>) {
        let p = self.params;
        let add = |grads: &mut BTreeMap<usize, Matrix<T>>, i: usize, u: &[T], v: &[T]| {
            let (r, c) = p.tensor(i).value.shape();
            grads.entry(i).or_insert_with(|| Matrix::zeros(r, c)).add_outer(T::one(), u, v);
        };
        add(grads, W2, dout, &cache.h);
        add(grads, B2, dout, &[T::one()]);
        let dh = p.tensor(W2).apply_transpose(dout);
        let dpre: Vec<T> = dh.iter().zip(&cache.h).map(|(&g, &h)| g * (T::one() - h * h)).collect();
        add(grads, W1, &dpre, &cache.z);
        add(grads, B1, &dpre, &[T::one()]);
    }
}

impl<T: Scalar> EpsilonPredictor<T> for Mlp<'_, T> {
    fn predict(&self, x_t: &[T], t: usize, cond: &[T]) -> Result<Vec<T>, LearnerError> {
        self.forward(x_t, t, cond).map(|(out, _)| out)
    }
}

impl<T: Scalar> Learner<T> for DiffusionLearner<T> {
    fn name(&self) -> &'static str {
        "diffusion"
    }

    fn world(&self) -> &WorldConfig {
        &self.config.world
    }

    fn init_params(&self, rng: &mut dyn RngCore) -> ParameterSet<T> {
        let c = &self.config;
        let (inp, hid, out) = (self.input_dim(), c.hidden, self.scene_dim());
        let n1 = Normal::new(0.0, c.init_scale / (inp as f64).sqrt()).expect("finite");
        let n2 = Normal::new(0.0, c.init_scale / (hid as f64).sqrt()).expect("finite");
        let mut params = ParameterSet::new();
        params.push("eps.w1", Matrix::from_fn(hid, inp, |_, _| T::of(n1.sample(rng))), false);
        params.push("eps.b1", Matrix::zeros(hid, 1), false);
        params.push("eps.w2", Matrix::from_fn(out, hid, |_, _| T::of(n2.sample(rng))), false);
        params.push("eps.b2", Matrix::zeros(out, 1), false);
        let alpha = T::of(c.lora_alpha);
        let a1 = LoraAdapter::init(hid, inp, c.lora_rank, alpha, c.lora_init_scale, rng);
        let a2 = LoraAdapter::init(out, hid, c.lora_rank, alpha, c.lora_init_scale, rng);
        params.attach(W1, a1).expect("host shape");
        params.attach(W2, a2).expect("host shape");
        params
    }

    fn generate(
        &self,
        params: &ParameterSet<T>,
        prompt: &PromptSpec,
        critique: Option<&Critique>,
        rng: &mut dyn RngCore,
    ) -> Result<Scene, LearnerError> {
        let v = self.sample_reverse(params, prompt, critique, rng)?;
        Ok(self.codec.decode(&v)?)
    }
}

//! Trainable learners. Two implementations share the [`Learner`] interface:
//! an explicit-likelihood categorical slot generator and a toy Gaussian
//! diffusion generator. Both condition on the prompt encoding concatenated
//! with a critique feature vector and carry LoRA adapters on their weights.

pub mod categorical;
pub mod checkpoint;
pub mod diffusion;
pub mod params;
pub mod schedule;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use categorical::{CategoricalConfig, CategoricalLearner, PriorConfig};
pub use diffusion::{DiffusionConfig, DiffusionLearner, EpsilonPredictor};
pub use params::{effective_weight, GradientSet, LoraAdapter, ParamKey, ParameterSet, Part, Tensor, VersionedParams};
pub use schedule::NoiseSchedule;

use crate::scalar::Scalar;
use crate::synthworld::{PromptSpec, Scene, WorldConfig, WorldError, PROMPT_SLOTS};
use crate::verifier::{ConditionKind, Critique};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("non-finite value in {0}")]
    Numerical(String),
    #[error("operation not supported by the {0} learner")]
    Unsupported(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    World(#[from] WorldError),
}

/// Width of the critique feature block.
pub const CRITIQUE_DIM: usize = ConditionKind::ALL.len() * PROMPT_SLOTS + ConditionKind::ALL.len();

/// Multi-hot critique features: one bit per (failed kind, prompt entity),
/// then one bit per failed kind. All zero when there is no critique.
pub fn critique_features<T: Scalar>(critique: Option<&Critique>) -> Vec<T> {
    let mut v = vec![T::zero(); CRITIQUE_DIM];
    if let Some(c) = critique {
        for h in &c.hints {
            let k = h.kind.index();
            v[k * PROMPT_SLOTS + h.entity.min(PROMPT_SLOTS - 1)] = T::one();
            v[ConditionKind::ALL.len() * PROMPT_SLOTS + k] = T::one();
        }
    }
    v
}

/// Offset of the `(kind, entity)` bit within [`critique_features`].
pub fn critique_bit(kind: ConditionKind, entity: usize) -> usize {
    kind.index() * PROMPT_SLOTS + entity
}

pub trait Learner<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn world(&self) -> &WorldConfig;

    /// Base weights plus freshly initialised adapters (`B = 0`).
    fn init_params(&self, rng: &mut dyn RngCore) -> ParameterSet<T>;

    fn generate(
        &self,
        params: &ParameterSet<T>,
        prompt: &PromptSpec,
        critique: Option<&Critique>,
        rng: &mut dyn RngCore,
    ) -> Result<Scene, LearnerError>;

    fn log_likelihood(
        &self,
        _params: &ParameterSet<T>,
        _prompt: &PromptSpec,
        _scene: &Scene,
        _critique: Option<&Critique>,
    ) -> Result<T, LearnerError> {
        Err(LearnerError::Unsupported(self.name()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Categorical,
    Diffusion,
}

/// Either learner behind one type, so orchestration code can stay agnostic.
#[derive(Debug, Clone)]
pub enum Model<T> {
    Categorical(CategoricalLearner),
    Diffusion(DiffusionLearner<T>),
}

impl<T: Scalar> Model<T> {
    pub fn kind(&self) -> LearnerKind {
        match self {
            Model::Categorical(_) => LearnerKind::Categorical,
            Model::Diffusion(_) => LearnerKind::Diffusion,
        }
    }

    fn inner(&self) -> &dyn Learner<T> {
        match self {
            Model::Categorical(l) => l,
            Model::Diffusion(l) => l,
        }
    }
}

impl<T: Scalar> Learner<T> for Model<T> {
    fn name(&self) -> &'static str {
        self.inner().name()
    }

    fn world(&self) -> &WorldConfig {
        self.inner().world()
    }

    fn init_params(&self, rng: &mut dyn RngCore) -> ParameterSet<T> {
        self.inner().init_params(rng)
    }

    fn generate(
        &self,
        params: &ParameterSet<T>,
        prompt: &PromptSpec,
        critique: Option<&Critique>,
        rng: &mut dyn RngCore,
    ) -> Result<Scene, LearnerError> {
        self.inner().generate(params, prompt, critique, rng)
    }

    fn log_likelihood(
        &self,
        params: &ParameterSet<T>,
        prompt: &PromptSpec,
        scene: &Scene,
        critique: Option<&Critique>,
    ) -> Result<T, LearnerError> {
        self.inner().log_likelihood(params, prompt, scene, critique)
    }
}

/// Anything that turns `(prompt, critique)` into a scene. The refinement loop
/// only needs this; tests plug in scripted generators.
pub trait SceneGenerator {
    fn generate(&self, prompt: &PromptSpec, critique: Option<&Critique>, rng: &mut dyn RngCore) -> Result<Scene, LearnerError>;
}

/// A learner bound to one parameter snapshot.
pub struct Policy<'a, T, L: ?Sized> {
    pub learner: &'a L,
    pub params: &'a ParameterSet<T>,
}

impl<'a, T: Scalar, L: Learner<T> + ?Sized> Policy<'a, T, L> {
    pub fn new(learner: &'a L, params: &'a ParameterSet<T>) -> Self {
        Self { learner, params }
    }
}

impl<T: Scalar, L: Learner<T> + ?Sized> SceneGenerator for Policy<'_, T, L> {
    fn generate(&self, prompt: &PromptSpec, critique: Option<&Critique>, rng: &mut dyn RngCore) -> Result<Scene, LearnerError> {
        self.learner.generate(self.params, prompt, critique, rng)
    }
}

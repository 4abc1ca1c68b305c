//! Verifier-driven continual preference optimisation on a synthetic
//! compositional world.
//!
//! Numeric building blocks are generic over [`Scalar`]; the orchestration
//! layers (pipeline, federation) run in `f64` and the aliases below name the
//! concrete types they use.

pub mod config;
pub mod federated;
pub mod learner;
pub mod pairgen;
pub mod pipeline;
pub mod replay;
pub mod rng;
pub mod scalar;
pub mod synthworld;
pub mod tensor;
pub mod trainer;
pub mod verifier;

pub use scalar::Scalar;

pub type Real = f64;
pub type Params = learner::ParameterSet<Real>;
pub type Adapter = learner::LoraAdapter<Real>;
pub type Grads = learner::GradientSet<Real>;
pub type Snapshot = learner::VersionedParams<Real>;
pub type Mat = tensor::Matrix<Real>;
pub type Schedule = learner::NoiseSchedule<Real>;
pub type Diffusion = learner::DiffusionLearner<Real>;
pub type AnyModel = learner::Model<Real>;

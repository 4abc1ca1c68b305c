//! Optimizer steps that publish a fresh immutable snapshot.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{OptimizerKind, TrainerError, TrainingConfig};
use crate::learner::{GradientSet, ParamKey, VersionedParams};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Adam moments keyed by parameter part; unused by SGD apart from the step count.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: BTreeMap<ParamKey, Matrix<T>>,
    pub v: BTreeMap<ParamKey, Matrix<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        Self { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

/// Applies `grads` to a copy of `snapshot.params` and returns it as version
/// `snapshot.version + 1`. Parts that are not trainable under the config
/// (frozen tensors, or base weights in LoRA-only mode) are never touched.
/// A non-finite result is refused and leaves `state` unchanged.
pub fn apply_update<T: Scalar>(
    snapshot: &VersionedParams<T>,
    grads: &GradientSet<T>,
    config: &TrainingConfig,
    state: &mut OptimizerState<T>,
) -> Result<VersionedParams<T>, TrainerError> {
    if !grads.is_finite() {
        return Err(TrainerError::Numerical("gradient".into()));
    }
    let mut params = (*snapshot.params).clone();
    let mut next = state.clone();
    next.step += 1;
    let lr = T::of(config.learning_rate);
    for (&key, g) in &grads.grads {
        if !params.is_trainable(key, config.lora_only) {
            continue;
        }
        let w = params.get_mut(key).ok_or_else(|| TrainerError::Shape(format!("no parameter for {key:?}")))?;
        if w.shape() != g.shape() {
            return Err(TrainerError::Shape(format!("{key:?}: {:?} vs {:?}", w.shape(), g.shape())));
        }
        match config.optimizer {
            OptimizerKind::Sgd => w.add_scaled_assign(-lr, g),
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (T::of(config.adam_beta1), T::of(config.adam_beta2), T::of(config.adam_eps));
                let (r, c) = g.shape();
                let m = next.m.entry(key).or_insert_with(|| Matrix::zeros(r, c));
                let v = next.v.entry(key).or_insert_with(|| Matrix::zeros(r, c));
                let t = next.step as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                let (ms, vs, ws, gs) = (m.as_mut_slice(), v.as_mut_slice(), w.as_mut_slice(), g.as_slice());
                for i in 0..gs.len() {
                    ms[i] = b1 * ms[i] + (T::one() - b1) * gs[i];
                    vs[i] = b2 * vs[i] + (T::one() - b2) * gs[i] * gs[i];
                    ws[i] -= lr * (ms[i] / c1) / ((vs[i] / c2).sqrt() + eps);
                }
            }
        }
    }
    if !params.is_finite() {
        return Err(TrainerError::Numerical(format!("parameters after update to version {}", snapshot.version + 1)));
    }
    *state = next;
    Ok(VersionedParams { version: snapshot.version + 1, params: Arc::new(params) })
}

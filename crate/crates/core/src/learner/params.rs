//! Parameter containers: named base tensors with optional low-rank adapters,
//! gradient sets keyed by trainable part, and versioned immutable snapshots.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LearnerError;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Low-rank update `ΔW = α · A·B` for a `d×k` host matrix, with `A: d×r`
/// and `B: r×k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
    pub alpha: T,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(a: Matrix<T>, b: Matrix<T>, alpha: T) -> Result<Self, LearnerError> {
        if a.cols() == 0 || a.cols() != b.rows() {
            return Err(LearnerError::Shape(format!("adapter factors {:?} and {:?} do not share a positive rank", a.shape(), b.shape())));
        }
        Ok(Self { a, b, alpha })
    }

    /// `A ~ N(0, scale²)`, `B = 0`, so the adapted matrix starts equal to the host.
    pub fn init(d: usize, k: usize, rank: usize, alpha: T, scale: f64, rng: &mut dyn RngCore) -> Self {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        let a = Matrix::from_fn(d, rank, |_, _| T::of(normal.sample(rng)));
        Self { a, b: Matrix::zeros(rank, k), alpha }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn host_shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    pub fn delta(&self) -> Matrix<T> {
        self.a.matmul(&self.b).expect("conforming factors").scale(self.alpha)
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// `W + α·A·B`, or `W` itself when no adapter is attached.
pub fn effective_weight<T: Scalar>(w: &Matrix<T>, adapter: Option<&LoraAdapter<T>>) -> Result<Matrix<T>, LearnerError> {
    match adapter {
        None => Ok(w.clone()),
        Some(ad) => {
            if ad.host_shape() != w.shape() {
                return Err(LearnerError::Shape(format!("adapter for {:?} attached to {:?}", ad.host_shape(), w.shape())));
            }
            Ok(w.add(&ad.delta()).expect("shapes checked"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub frozen: bool,
    pub adapter: Option<LoraAdapter<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// `(W + α·A·B)·u` without materialising the adapted matrix.
    pub fn apply(&self, u: &[T]) -> Vec<T> {
        let mut out = self.value.matvec(u);
        if let Some(ad) = &self.adapter {
            let bu = ad.b.matvec(u);
            if bu.iter().any(|&x| x != T::zero()) {
                for (o, d) in out.iter_mut().zip(ad.a.matvec(&bu)) {
                    *o += ad.alpha * d;
                }
            }
        }
        out
    }

    /// `(W + α·A·B)ᵀ·v`.
    pub fn apply_transpose(&self, v: &[T]) -> Vec<T> {
        let mut out = self.value.tmatvec(v);
        if let Some(ad) = &self.adapter {
            let atv = ad.a.tmatvec(v);
            for (o, d) in out.iter_mut().zip(ad.b.tmatvec(&atv)) {
                *o += ad.alpha * d;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Part {
    Base,
    LoraA,
    LoraB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub tensor: usize,
    pub part: Part,
}

impl ParamKey {
    pub fn base(tensor: usize) -> Self {
        Self { tensor, part: Part::Base }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self { tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix<T>, frozen: bool) -> usize {
        self.tensors.push(Tensor { name: name.into(), value, frozen, adapter: None });
        self.tensors.len() - 1
    }

    pub fn attach(&mut self, tensor: usize, adapter: LoraAdapter<T>) -> Result<(), LearnerError> {
        let t = self.tensors.get_mut(tensor).ok_or_else(|| LearnerError::Shape(format!("no tensor {tensor}")))?;
        if adapter.host_shape() != t.value.shape() {
            return Err(LearnerError::Shape(format!(
                "adapter for {:?} cannot attach to {} {:?}",
                adapter.host_shape(),
                t.name,
                t.value.shape()
            )));
        }
        t.adapter = Some(adapter);
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn effective(&self, i: usize) -> Matrix<T> {
        let t = &self.tensors[i];
        effective_weight(&t.value, t.adapter.as_ref()).expect("attached adapters conform")
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.is_finite() && t.adapter.as_ref().is_none_or(|a| a.a.is_finite() && a.b.is_finite()))
    }

    /// Whether the optimizer may touch `key` under the given mode.
    pub fn is_trainable(&self, key: ParamKey, lora_only: bool) -> bool {
        let Some(t) = self.tensors.get(key.tensor) else { return false };
        match key.part {
            Part::Base => !lora_only && !t.frozen,
            Part::LoraA | Part::LoraB => t.adapter.is_some(),
        }
    }

    /// Number of scalars the optimizer updates: `Σ r(d+k)` over adapters,
    /// plus every non-frozen base tensor unless `lora_only`.
    pub fn trainable_count(&self, lora_only: bool) -> usize {
        self.tensors
            .iter()
            .map(|t| {
                let lora = t.adapter.as_ref().map_or(0, LoraAdapter::parameter_count);
                let base = if !lora_only && !t.frozen { t.value.len() } else { 0 };
                lora + base
            })
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len() + t.adapter.as_ref().map_or(0, LoraAdapter::parameter_count)).sum()
    }

    pub fn keys(&self, lora_only: bool) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (i, _) in self.tensors.iter().enumerate() {
            for part in [Part::Base, Part::LoraA, Part::LoraB] {
                let key = ParamKey { tensor: i, part };
                if self.is_trainable(key, lora_only) {
                    keys.push(key);
                }
            }
        }
        keys
    }

    pub fn get(&self, key: ParamKey) -> Option<&Matrix<T>> {
        let t = self.tensors.get(key.tensor)?;
        match key.part {
            Part::Base => Some(&t.value),
            Part::LoraA => t.adapter.as_ref().map(|a| &a.a),
            Part::LoraB => t.adapter.as_ref().map(|a| &a.b),
        }
    }

    pub fn get_mut(&mut self, key: ParamKey) -> Option<&mut Matrix<T>> {
        let t = self.tensors.get_mut(key.tensor)?;
        match key.part {
            Part::Base => Some(&mut t.value),
            Part::LoraA => t.adapter.as_mut().map(|a| &mut a.a),
            Part::LoraB => t.adapter.as_mut().map(|a| &mut a.b),
        }
    }

    pub fn key_name(&self, key: ParamKey) -> String {
        let name = self.tensors.get(key.tensor).map_or("?", |t| t.name.as_str());
        match key.part {
            Part::Base => name.to_string(),
            Part::LoraA => format!("{name}.lora_a"),
            Part::LoraB => format!("{name}.lora_b"),
        }
    }

    /// Bitwise equality of every base tensor (adapters ignored).
    pub fn base_bitwise_eq(&self, other: &ParameterSet<T>) -> bool {
        self.tensors.len() == other.tensors.len() && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.value.bitwise_eq(&b.value))
    }

    /// Bitwise equality of every adapter factor.
    pub fn adapters_bitwise_eq(&self, other: &ParameterSet<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| match (&a.adapter, &b.adapter) {
                (None, None) => true,
                (Some(x), Some(y)) => x.a.bitwise_eq(&y.a) && x.b.bitwise_eq(&y.b) && x.alpha == y.alpha,
                _ => false,
            })
    }
}

/// Gradients keyed by trainable part.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet<T> {
    pub grads: BTreeMap<ParamKey, Matrix<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    /// Zero gradients for every trainable part of `params`.
    pub fn zeros_like(params: &ParameterSet<T>, lora_only: bool) -> Self {
        let grads = params
            .keys(lora_only)
            .into_iter()
            .map(|k| {
                let (r, c) = params.get(k).expect("trainable key exists").shape();
                (k, Matrix::zeros(r, c))
            })
            .collect();
        Self { grads }
    }

    /// Chains gradients with respect to effective (adapted) weights into
    /// gradients of the trainable parts: `∂W = G`, `∂A = α·G·Bᵀ`, `∂B = α·Aᵀ·G`.
    pub fn from_effective(params: &ParameterSet<T>, effective: &BTreeMap<usize, Matrix<T>>, lora_only: bool) -> Self {
        let mut out = Self::zeros_like(params, lora_only);
        for (&i, g) in effective {
            let t = &params.tensors[i];
            if let Some(slot) = out.grads.get_mut(&ParamKey::base(i)) {
                *slot = g.clone();
            }
            if let Some(ad) = &t.adapter {
                let ga = g.matmul(&ad.b.transpose()).expect("conforming").scale(ad.alpha);
                let gb = ad.a.transpose().matmul(g).expect("conforming").scale(ad.alpha);
                out.grads.insert(ParamKey { tensor: i, part: Part::LoraA }, ga);
                out.grads.insert(ParamKey { tensor: i, part: Part::LoraB }, gb);
            }
        }
        out
    }

    pub fn norm(&self) -> T {
        self.grads.values().map(Matrix::sum_sq).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Matrix::is_finite)
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            *g = g.scale(s);
        }
    }

    /// Rescales to at most `max_norm`; returns the pre-clip norm.
    pub fn clip(&mut self, max_norm: T) -> T {
        let n = self.norm();
        if n > max_norm && n > T::zero() {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn get(&self, key: ParamKey) -> Option<&Matrix<T>> {
        self.grads.get(&key)
    }
}

/// Immutable published snapshot.
#[derive(Debug, Clone)]
pub struct VersionedParams<T> {
    pub version: u64,
    pub params: Arc<ParameterSet<T>>,
}

impl<T> VersionedParams<T> {
    pub fn new(version: u64, params: ParameterSet<T>) -> Self {
        Self { version, params: Arc::new(params) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    #[test]
    fn zero_a_leaves_weight_unchanged() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ad = LoraAdapter::new(Matrix::zeros(2, 1), Matrix::from_rows(&[&[5.0, 6.0]]), 1.0).unwrap();
        assert_eq!(effective_weight(&w, Some(&ad)).unwrap(), w);
        assert_eq!(effective_weight(&w, None).unwrap(), w);
    }

    #[test]
    fn rank_one_delta_matches_hand_product() {
        let w = Matrix::<f64>::zeros(2, 2);
        let ad = LoraAdapter::new(Matrix::from_rows(&[&[1.0], &[0.0]]), Matrix::from_rows(&[&[0.0, 1.0]]), 1.0).unwrap();
        assert_eq!(effective_weight(&w, Some(&ad)).unwrap(), Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]));
    }

    #[test]
    fn merge_then_subtract_recovers_base() {
        let mut rng = stream(3, Domain::Init, 0);
        let w = Matrix::from_fn(5, 7, |i, j| (i as f64 * 0.37 - j as f64 * 0.11).sin());
        let mut ad = LoraAdapter::<f64>::init(5, 7, 2, 0.5, 1.0, &mut rng);
        ad.b = Matrix::from_fn(2, 7, |i, j| (i + j) as f64 * 0.3 - 1.0);
        let merged = effective_weight(&w, Some(&ad)).unwrap();
        let back = merged.sub(&ad.delta()).unwrap();
        for (a, b) in back.as_slice().iter().zip(w.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let w = Matrix::<f64>::zeros(3, 3);
        let ad = LoraAdapter::new(Matrix::zeros(2, 1), Matrix::zeros(1, 3), 1.0).unwrap();
        assert!(matches!(effective_weight(&w, Some(&ad)), Err(LearnerError::Shape(_))));
        assert!(LoraAdapter::new(Matrix::<f64>::zeros(2, 0), Matrix::zeros(0, 3), 1.0).is_err());
    }

    #[test]
    fn trainable_count_modes() {
        let mut p = ParameterSet::<f64>::new();
        let i = p.push("w", Matrix::zeros(4, 6), false);
        let frozen = p.push("emb", Matrix::zeros(3, 3), true);
        assert_eq!(p.trainable_count(true), 0);
        assert_eq!(p.trainable_count(false), 24);
        let mut rng = stream(0, Domain::Init, 0);
        p.attach(i, LoraAdapter::init(4, 6, 2, 1.0, 0.1, &mut rng)).unwrap();
        assert_eq!(p.trainable_count(true), 2 * (4 + 6));
        assert_eq!(p.trainable_count(false), 24 + 20);
        assert!(!p.is_trainable(ParamKey::base(frozen), false));
        assert!(p.attach(frozen, LoraAdapter::init(4, 6, 2, 1.0, 0.1, &mut rng)).is_err());
    }

    #[test]
    fn apply_matches_materialised_weight() {
        let mut rng = stream(1, Domain::Init, 0);
        let mut p = ParameterSet::<f64>::new();
        let i = p.push("w", Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.1), false);
        let mut ad = LoraAdapter::init(3, 4, 2, 0.7, 1.0, &mut rng);
        ad.b = Matrix::from_fn(2, 4, |r, c| r as f64 - c as f64 * 0.2);
        p.attach(i, ad).unwrap();
        let u = [0.3, -1.0, 2.0, 0.5];
        let direct = p.effective(i).matvec(&u);
        for (a, b) in p.tensor(i).apply(&u).iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        let v = [1.0, -2.0, 0.5];
        let direct_t = p.effective(i).tmatvec(&v);
        for (a, b) in p.tensor(i).apply_transpose(&v).iter().zip(&direct_t) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

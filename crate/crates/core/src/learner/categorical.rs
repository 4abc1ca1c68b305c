//! Explicit-likelihood slot generator.
//!
//! A scene is emitted slot by slot. Each slot first draws an object token
//! from `objects + 1` choices, the last being STOP; a non-STOP slot then
//! draws colour, x and y tokens. Every head is a linear softmax over the input
//! `[1, prompt features, critique features]`, so `log π(x | p)` is an exact
//! sum of log-softmax terms and the token sequence of a scene is unique.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::params::{LoraAdapter, ParameterSet};
use super::{critique_bit, critique_features, Learner, LearnerError, CRITIQUE_DIM};
use crate::scalar::Scalar;
use crate::synthworld::{PromptEncoder, PromptSpec, Scene, SceneEntity, WorldConfig};
use crate::tensor::Matrix;
use crate::verifier::{ConditionKind, Critique};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Object,
    Color,
    X,
    Y,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::Object, Head::Color, Head::X, Head::Y];

    fn name(self) -> &'static str {
        match self {
            Head::Object => "object",
            Head::Color => "color",
            Head::X => "x",
            Head::Y => "y",
        }
    }
}

/// Strengths of the hand-built base weights: a "pretrained" model that knows
/// object identity and colour binding but under-generates multi-entity
/// scenes. The critique block reacts to failed existence/count checks by
/// suppressing STOP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Slot-0 logit bonus for the first prompt entity's object.
    pub first_object: f64,
    /// Later-slot bonus for the first entity's object.
    pub repeat_object: f64,
    /// Later-slot bonus for the second entity's object.
    pub second_object: f64,
    /// STOP bias at slot 0.
    pub stop_first: f64,
    /// STOP bias at later slots.
    pub stop_later: f64,
    /// Colour head bonus for the entity's requested colour.
    pub color: f64,
    /// STOP suppression when the critique reports a failed count or a missing second entity.
    pub critique: f64,
    /// Share of the first entity's colour bonus given to later slots.
    pub echo_color: f64,
    /// Bias on every object token, making objects the prompt does not mention unlikely.
    pub distractor: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            first_object: 4.0,
            repeat_object: 2.0,
            second_object: 3.0,
            stop_first: -4.0,
            stop_later: 1.0,
            color: 2.5,
            critique: 2.5,
            echo_color: 1.0,
            distractor: -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoricalConfig {
    pub world: WorldConfig,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_init_scale: f64,
    pub prior: PriorConfig,
}

impl Default for CategoricalConfig {
    fn default() -> Self {
        Self { world: WorldConfig::default(), lora_rank: 4, lora_alpha: 1.0, lora_init_scale: 0.5, prior: PriorConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct CategoricalLearner {
    pub config: CategoricalConfig,
    encoder: PromptEncoder,
}

impl CategoricalLearner {
    pub fn new(config: CategoricalConfig) -> Self {
        Self { encoder: PromptEncoder::new(config.world), config }
    }

    pub fn slots(&self) -> usize {
        self.config.world.max_entities
    }

    pub fn stop_token(&self) -> usize {
        self.config.world.objects
    }

    pub fn input_dim(&self) -> usize {
        1 + self.encoder.dim() + CRITIQUE_DIM
    }

    fn prompt_offset(&self) -> usize {
        1
    }

    fn critique_offset(&self) -> usize {
        1 + self.encoder.dim()
    }

    pub fn choices(&self, head: Head) -> usize {
        let w = &self.config.world;
        match head {
            Head::Object => w.objects + 1,
            Head::Color => w.colors,
            Head::X | Head::Y => w.grid,
        }
    }

    /// Tensor index of `head` at `slot`.
    pub fn head_index(&self, slot: usize, head: Head) -> usize {
        slot * Head::ALL.len() + Head::ALL.iter().position(|&h| h == head).unwrap()
    }

    pub fn input<T: Scalar>(&self, prompt: &PromptSpec, critique: Option<&Critique>) -> Vec<T> {
        let mut u = Vec::with_capacity(self.input_dim());
        u.push(T::one());
        u.extend(self.encoder.encode::<T>(prompt));
        u.extend(critique_features::<T>(critique));
        u
    }

    /// `(tensor index, token)` for every head a scene touches, in emission order.
    pub fn tokens(&self, scene: &Scene) -> Result<Vec<(usize, usize)>, LearnerError> {
        scene.validate(&self.config.world)?;
        let mut out = Vec::with_capacity(scene.entities.len() * 4 + 1);
        for (slot, e) in scene.entities.iter().enumerate() {
            out.push((self.head_index(slot, Head::Object), e.object_id));
            out.push((self.head_index(slot, Head::Color), e.color_id));
            out.push((self.head_index(slot, Head::X), e.x));
            out.push((self.head_index(slot, Head::Y), e.y));
        }
        if scene.entities.len() < self.slots() {
            out.push((self.head_index(scene.entities.len(), Head::Object), self.stop_token()));
        }
        Ok(out)
    }

    fn logits<T: Scalar>(&self, params: &ParameterSet<T>, tensor: usize, u: &[T]) -> Result<Vec<T>, LearnerError> {
        let l = params.tensor(tensor).apply(u);
        if l.iter().any(|x| !x.is_finite()) {
            return Err(LearnerError::Numerical(format!("logits of {}", params.tensor(tensor).name)));
        }
        Ok(l)
    }

    /// Adds `coef · ∂ log π(scene | prompt, critique) / ∂W_eff` for every
    /// touched head into `grads` (keyed by tensor index).
    pub fn accumulate_log_likelihood_grad<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        prompt: &PromptSpec,
        scene: &Scene,
        critique: Option<&Critique>,
        coef: T,
        grads: &mut BTreeMap<usize, Matrix<T>>,
    ) -> Result<(), LearnerError> {
        let u = self.input::<T>(prompt, critique);
        for (tensor, token) in self.tokens(scene)? {
            let logits = self.logits(params, tensor, &u)?;
            let mut g: Vec<T> = softmax(&logits).into_iter().map(|p| -p).collect();
            g[token] += T::one();
            grads.entry(tensor).or_insert_with(|| Matrix::zeros(logits.len(), u.len())).add_outer(coef, &g, &u);
        }
        Ok(())
    }

    /// Hand-built base weights described by [`PriorConfig`].
    pub fn prior_weights<T: Scalar>(&self) -> Vec<(String, Matrix<T>)> {
        let world = &self.config.world;
        let prior = &self.config.prior;
        let k = self.input_dim();
        let p0 = self.prompt_offset();
        let c0 = self.critique_offset();
        let mut out = Vec::new();
        for slot in 0..self.slots() {
            for head in Head::ALL {
                let mut w = Matrix::<T>::zeros(self.choices(head), k);
                match head {
                    Head::Object => {
                        let stop = self.stop_token();
                        for o in 0..world.objects {
                            w.set(o, 0, T::of(prior.distractor));
                            let first = if slot == 0 { prior.first_object } else { prior.repeat_object };
                            w.set(o, p0 + self.encoder.object_offset(0) + o, T::of(first));
                            if slot > 0 {
                                w.set(o, p0 + self.encoder.object_offset(1) + o, T::of(prior.second_object));
                            }
                        }
                        if slot == 0 {
                            w.set(stop, 0, T::of(prior.stop_first));
                        } else {
                            w.set(stop, 0, T::of(prior.stop_later));
                            w.set(stop, c0 + critique_bit(ConditionKind::Count, 0), T::of(-prior.critique));
                            w.set(stop, c0 + critique_bit(ConditionKind::Exists, 1), T::of(-prior.critique));
                        }
                    }
                    Head::Color => {
                        let sources = if slot == 0 { [(0, 1.0), (1, 0.0)] } else { [(0, prior.echo_color), (1, 1.0)] };
                        for (e, share) in sources {
                            for c in 0..world.colors {
                                w.set(c, p0 + self.encoder.color_offset(e) + 1 + c, T::of(prior.color * share));
                            }
                        }
                    }
                    Head::X | Head::Y => {}
                }
                out.push((format!("slot{slot}.{}", head.name()), w));
            }
        }
        out
    }
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: T = e.iter().cloned().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn log_softmax_at<T: Scalar>(logits: &[T], index: usize) -> T {
    let m = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let z: T = logits.iter().map(|&l| (l - m).exp()).sum();
    logits[index] - m - z.ln()
}

fn sample_index<T: Scalar>(logits: &[T], rng: &mut dyn RngCore) -> usize {
    let probs = softmax(logits);
    let mut u: f64 = rng.random();
    for (i, p) in probs.iter().enumerate() {
        u -= p.as_f64();
        if u < 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

impl<T: Scalar> Learner<T> for CategoricalLearner {
    fn name(&self) -> &'static str {
        "categorical"
    }

    fn world(&self) -> &WorldConfig {
        &self.config.world
    }

    fn init_params(&self, rng: &mut dyn RngCore) -> ParameterSet<T> {
        let mut params = ParameterSet::new();
        for (name, w) in self.prior_weights::<T>() {
            let (d, k) = w.shape();
            let i = params.push(name, w, false);
            let adapter = LoraAdapter::init(d, k, self.config.lora_rank, T::of(self.config.lora_alpha), self.config.lora_init_scale, rng);
            params.attach(i, adapter).expect("adapter built for host shape");
        }
        params
    }

    fn generate(
        &self,
        params: &ParameterSet<T>,
        prompt: &PromptSpec,
        critique: Option<&Critique>,
        rng: &mut dyn RngCore,
    ) -> Result<Scene, LearnerError> {
        let u = self.input::<T>(prompt, critique);
        let mut entities = Vec::new();
        for slot in 0..self.slots() {
            let object = sample_index(&self.logits(params, self.head_index(slot, Head::Object), &u)?, rng);
            if object == self.stop_token() {
                break;
            }
            let mut draw =
                |head| -> Result<usize, LearnerError> { Ok(sample_index(&self.logits(params, self.head_index(slot, head), &u)?, rng)) };
            let color_id = draw(Head::Color)?;
            let x = draw(Head::X)?;
            let y = draw(Head::Y)?;
            entities.push(SceneEntity { object_id: object, color_id, x, y });
        }
        Ok(Scene { entities })
    }

    fn log_likelihood(
        &self,
        params: &ParameterSet<T>,
        prompt: &PromptSpec,
        scene: &Scene,
        critique: Option<&Critique>,
    ) -> Result<T, LearnerError> {
        let u = self.input::<T>(prompt, critique);
        let mut total = T::zero();
        for (tensor, token) in self.tokens(scene)? {
            total += log_softmax_at(&self.logits(params, tensor, &u)?, token);
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use crate::synthworld::{gen_prompt, perfect_scene, Category};

    fn toy() -> CategoricalLearner {
        // 2 slots, 3 object choices (2 objects + STOP), single colour and cell
        CategoricalLearner::new(CategoricalConfig {
            world: WorldConfig { grid: 1, objects: 2, colors: 1, max_entities: 2 },
            ..Default::default()
        })
    }

    fn all_toy_scenes() -> Vec<Scene> {
        let e = |o| SceneEntity { object_id: o, color_id: 0, x: 0, y: 0 };
        let mut v = vec![Scene::default(), Scene::new(vec![e(0)]), Scene::new(vec![e(1)])];
        for a in 0..2 {
            for b in 0..2 {
                v.push(Scene::new(vec![e(a), e(b)]));
            }
        }
        v
    }

    fn random_params(learner: &CategoricalLearner, seed: u64) -> ParameterSet<f64> {
        let mut rng = stream(seed, Domain::Init, 0);
        let mut p: ParameterSet<f64> = learner.init_params(&mut rng);
        for (i, t) in p.tensors.iter_mut().enumerate() {
            t.value =
                Matrix::from_fn(t.value.rows(), t.value.cols(), |r, c| ((r * 31 + c * 7 + i * 13 + seed as usize) as f64).sin() * 2.0);
        }
        p
    }

    #[test]
    fn exhaustive_likelihood_sums_to_one() {
        let learner = toy();
        let prompt = gen_prompt(&learner.config.world, &mut stream(0, Domain::Prompt, 0), Category::SingleObject, 0).unwrap();
        for seed in 0..5 {
            let params = random_params(&learner, seed);
            let total: f64 = all_toy_scenes().iter().map(|s| learner.log_likelihood(&params, &prompt, s, None).unwrap().exp()).sum();
            assert!((total - 1.0).abs() <= 1e-10, "sum {total}");
        }
    }

    #[test]
    fn uniform_logits_give_uniform_likelihood() {
        let learner = toy();
        let mut p: ParameterSet<f64> = learner.init_params(&mut stream(0, Domain::Init, 0));
        for t in &mut p.tensors {
            t.value = Matrix::zeros(t.value.rows(), t.value.cols());
        }
        let prompt = gen_prompt(&learner.config.world, &mut stream(0, Domain::Prompt, 0), Category::SingleObject, 0).unwrap();
        // two entities: two object heads with 3 choices; colour/x/y heads have one choice
        let s = &all_toy_scenes()[3];
        let ll: f64 = learner.log_likelihood(&p, &prompt, s, None).unwrap();
        assert!((ll - 2.0 * (1.0f64 / 3.0).ln()).abs() < 1e-14);
    }

    /// Params whose bias column favours `target`'s tokens by `margin` nats.
    fn dominant_params(learner: &CategoricalLearner, target: &Scene, margin: f64) -> ParameterSet<f64> {
        let mut p: ParameterSet<f64> = learner.init_params(&mut stream(0, Domain::Init, 0));
        for t in &mut p.tensors {
            t.value = Matrix::zeros(t.value.rows(), t.value.cols());
        }
        for slot in 0..learner.slots() {
            // default every object head to STOP so later slots close the scene
            p.tensors[learner.head_index(slot, Head::Object)].value.set(learner.stop_token(), 0, margin);
        }
        for (tensor, token) in learner.tokens(target).unwrap() {
            let w = &mut p.tensors[tensor].value;
            for r in 0..w.rows() {
                w.set(r, 0, 0.0);
            }
            w.set(token, 0, margin);
        }
        p
    }

    #[test]
    fn dominant_logits_generate_the_target_scene() {
        let learner = CategoricalLearner::new(CategoricalConfig::default());
        let world = learner.config.world;
        let prompt = gen_prompt(&world, &mut stream(5, Domain::Prompt, 0), Category::SingleObject, 0).unwrap();
        let target = perfect_scene(&prompt, &world);
        let p = dominant_params(&learner, &target, 20.0);
        // independent tail bound: each touched head misses with probability (V-1)e^-20/(1+(V-1)e^-20)
        let miss: f64 = learner
            .tokens(&target)
            .unwrap()
            .iter()
            .map(|&(tensor, _)| {
                let v = p.tensors[tensor].value.rows() as f64;
                let tail = (v - 1.0) * (-20.0f64).exp();
                tail / (1.0 + tail)
            })
            .sum();
        assert!(miss <= 1e-6, "tail bound {miss}");
        let ll: f64 = learner.log_likelihood(&p, &prompt, &target, None).unwrap();
        assert!(ll.exp() >= 1.0 - 1e-6);
        assert!(ll >= -1e-6);
        for i in 0..50 {
            let s = learner.generate(&p, &prompt, None, &mut stream(1, Domain::Trajectory, i)).unwrap();
            assert_eq!(s, target);
        }
    }

    #[test]
    fn generate_is_deterministic_and_total() {
        let learner = CategoricalLearner::new(CategoricalConfig::default());
        let world = learner.config.world;
        let params: ParameterSet<f64> = learner.init_params(&mut stream(0, Domain::Init, 0));
        for c in Category::ALL {
            let prompt = gen_prompt(&world, &mut stream(1, Domain::Prompt, 3), c, 3).unwrap();
            let a = learner.generate(&params, &prompt, None, &mut stream(7, Domain::Trajectory, 0)).unwrap();
            let b = learner.generate(&params, &prompt, None, &mut stream(7, Domain::Trajectory, 0)).unwrap();
            assert_eq!(a, b);
            a.validate(&world).unwrap();
            assert!(learner.log_likelihood(&params, &prompt, &a, None).unwrap() <= 0.0);
        }
    }

    #[test]
    fn log_likelihood_rejects_invalid_scene() {
        let learner = toy();
        let params: ParameterSet<f64> = learner.init_params(&mut stream(0, Domain::Init, 0));
        let prompt = gen_prompt(&learner.config.world, &mut stream(0, Domain::Prompt, 0), Category::SingleObject, 0).unwrap();
        let too_many = Scene::new(vec![SceneEntity { object_id: 0, color_id: 0, x: 0, y: 0 }; 3]);
        assert!(learner.log_likelihood(&params, &prompt, &too_many, None).is_err());
    }

    #[test]
    fn shift_invariance_of_likelihood() {
        let learner = CategoricalLearner::new(CategoricalConfig::default());
        let world = learner.config.world;
        let params = random_params(&learner, 3);
        let prompt = gen_prompt(&world, &mut stream(2, Domain::Prompt, 0), Category::TwoObject, 0).unwrap();
        let scene = perfect_scene(&prompt, &world);
        let before: f64 = learner.log_likelihood(&params, &prompt, &scene, None).unwrap();
        let mut shifted = params.clone();
        // adding a constant to every logit of a head = adding it to every row's bias entry
        let t = &mut shifted.tensors[learner.head_index(1, Head::Object)].value;
        for r in 0..t.rows() {
            let v = t.get(r, 0);
            t.set(r, 0, v + 3.25);
        }
        let after: f64 = learner.log_likelihood(&shifted, &prompt, &scene, None).unwrap();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn analytic_grad_matches_finite_difference_of_log_likelihood() {
        let learner = toy();
        let params = random_params(&learner, 1);
        let prompt = gen_prompt(&learner.config.world, &mut stream(0, Domain::Prompt, 0), Category::TwoObject, 0).unwrap();
        let scene = all_toy_scenes()[5].clone();
        let mut grads = BTreeMap::new();
        learner.accumulate_log_likelihood_grad(&params, &prompt, &scene, None, 1.0, &mut grads).unwrap();
        let h = 1e-6;
        for (&tensor, g) in &grads {
            for (r, c) in [(0, 0), (1, 0), (2, 0), (1, 3)] {
                if r >= g.rows() || c >= g.cols() {
                    continue;
                }
                let mut plus = params.clone();
                let v = plus.tensors[tensor].value.get(r, c);
                plus.tensors[tensor].value.set(r, c, v + h);
                let mut minus = params.clone();
                minus.tensors[tensor].value.set(r, c, v - h);
                let fd = (learner.log_likelihood(&plus, &prompt, &scene, None).unwrap()
                    - learner.log_likelihood(&minus, &prompt, &scene, None).unwrap())
                    / (2.0 * h);
                assert!((fd - g.get(r, c)).abs() < 1e-7, "tensor {tensor} ({r},{c}): {fd} vs {}", g.get(r, c));
            }
        }
    }
}

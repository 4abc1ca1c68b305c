//! The frozen verifier: condition formulation, per-condition scoring, the pass
//! test and structured critiques. [`remote`] speaks the JSON verdict protocol
//! of an external judge.

pub mod remote;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::synthworld::{evaluate_predicate, Predicate, PromptSpec, Scene, WorldConfig};

/// Default pass threshold, matching the remote judge's `average score > 0.95` rule.
pub const DEFAULT_TAU: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Exists,
    Count,
    Color,
    Relation,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 4] = [ConditionKind::Exists, ConditionKind::Count, ConditionKind::Color, ConditionKind::Relation];

    pub fn index(self) -> usize {
        ConditionKind::ALL.iter().position(|&k| k == self).unwrap()
    }
}

/// One sub-goal of a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    /// 1-based position within its [`ConditionSet`].
    pub index: usize,
    /// Prompt entity the condition was derived from.
    pub entity: usize,
    pub predicate: Predicate,
}

impl Condition {
    pub fn kind(&self) -> ConditionKind {
        match self.predicate {
            Predicate::Exists { .. } => ConditionKind::Exists,
            Predicate::Count { .. } => ConditionKind::Count,
            Predicate::Color { .. } => ConditionKind::Color,
            Predicate::Relation { .. } => ConditionKind::Relation,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.predicate {
            Predicate::Exists { object_id } => write!(f, "Is there object {object_id}?"),
            Predicate::Count { object_id, count } => write!(f, "Are there exactly {count} of object {object_id}?"),
            Predicate::Color { object_id, color_id } => write!(f, "Is object {object_id} color {color_id}?"),
            Predicate::Relation { relation, subject, target } => {
                write!(f, "Is object {subject} {} object {target}?", relation.name().replace('_', " "))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSet {
    pub prompt_id: u64,
    pub conditions: Vec<Condition>,
}

impl ConditionSet {
    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    /// Condition with 1-based index `i`.
    pub fn get(&self, i: usize) -> Option<&Condition> {
        i.checked_sub(1).and_then(|k| self.conditions.get(k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub step: usize,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>, step: usize) -> Self {
        Self { scores, step }
    }

    pub fn aggregate(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.scores.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Structured hint for one failed condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hint {
    pub index: usize,
    pub entity: usize,
    pub kind: ConditionKind,
    pub predicate: Predicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Critique {
    /// 1-based indices of conditions scoring below the threshold.
    pub failed: Vec<usize>,
    pub hints: Vec<Hint>,
    pub step: usize,
}

impl Critique {
    pub fn is_empty(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Deterministic rule-based verifier over the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleVerifier {
    pub tau: f64,
}

impl Default for OracleVerifier {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

impl OracleVerifier {
    pub fn new(tau: f64) -> Self {
        Self { tau }
    }

    pub fn formulate(&self, prompt: &PromptSpec) -> ConditionSet {
        formulate(prompt)
    }

    pub fn evaluate(&self, conditions: &ConditionSet, scene: &Scene, step: usize) -> ScoreVector {
        evaluate(conditions, scene, step)
    }

    pub fn passed(&self, scores: &ScoreVector) -> bool {
        passed(scores, self.tau)
    }

    pub fn critique(&self, conditions: &ConditionSet, scores: &ScoreVector) -> Critique {
        critique(conditions, scores, self.tau)
    }
}

/// Splits a prompt into conditions: per entity, existence, then colour (if
/// specified), count (if more than one is required) and each relation.
pub fn formulate(prompt: &PromptSpec) -> ConditionSet {
    let mut conditions = Vec::new();
    let mut push = |entity: usize, predicate: Predicate| {
        conditions.push(Condition { index: conditions.len() + 1, entity, predicate });
    };
    for (i, e) in prompt.entities.iter().enumerate() {
        push(i, Predicate::Exists { object_id: e.object_id });
        if let Some(color_id) = e.color_id {
            push(i, Predicate::Color { object_id: e.object_id, color_id });
        }
        if e.required_count > 1 {
            push(i, Predicate::Count { object_id: e.object_id, count: e.required_count });
        }
        if let Some(r) = e.relation {
            if let Some(target) = prompt.entities.get(r.target) {
                push(i, Predicate::Relation { relation: r.kind, subject: e.object_id, target: target.object_id });
            }
        }
    }
    ConditionSet { prompt_id: prompt.id, conditions }
}

pub fn evaluate(conditions: &ConditionSet, scene: &Scene, step: usize) -> ScoreVector {
    ScoreVector { scores: conditions.conditions.iter().map(|c| evaluate_predicate(&c.predicate, scene)).collect(), step }
}

/// `min_i s_i >= tau`, boundary inclusive.
pub fn passed(scores: &ScoreVector, tau: f64) -> bool {
    !scores.scores.is_empty() && scores.min() >= tau
}

pub fn critique(conditions: &ConditionSet, scores: &ScoreVector, tau: f64) -> Critique {
    debug_assert_eq!(conditions.len(), scores.scores.len());
    let mut failed = Vec::new();
    let mut hints = Vec::new();
    for (c, &s) in conditions.conditions.iter().zip(&scores.scores) {
        if s < tau {
            failed.push(c.index);
            hints.push(Hint { index: c.index, entity: c.entity, kind: c.kind(), predicate: c.predicate });
        }
    }
    Critique { failed, hints, step: scores.step }
}

/// Whether every condition only references vocabulary inside `world`.
pub fn world_is_compatible(conditions: &ConditionSet, world: &WorldConfig) -> bool {
    conditions.conditions.iter().all(|c| match c.predicate {
        Predicate::Exists { object_id } | Predicate::Count { object_id, .. } => object_id < world.objects,
        Predicate::Color { object_id, color_id } => object_id < world.objects && color_id < world.colors,
        Predicate::Relation { subject, target, .. } => subject < world.objects && target < world.objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use crate::synthworld::{gen_prompt, perfect_scene, Category, EntitySpec, SceneEntity};

    fn prompt(entities: Vec<EntitySpec>, category: Category) -> PromptSpec {
        PromptSpec { id: 1, category, entities }
    }

    const BANANA: usize = 3;
    const GREEN: usize = 2;
    const KEY: usize = 5;

    #[test]
    fn green_banana_formulates_two_conditions() {
        let p = prompt(vec![EntitySpec { object_id: BANANA, color_id: Some(GREEN), required_count: 1, relation: None }], Category::Colors);
        let cs = formulate(&p);
        let preds: Vec<_> = cs.conditions.iter().map(|c| c.predicate).collect();
        assert_eq!(preds, vec![Predicate::Exists { object_id: BANANA }, Predicate::Color { object_id: BANANA, color_id: GREEN }]);
        assert_eq!(cs.conditions.iter().map(|c| c.index).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn single_object_and_counting() {
        let p = prompt(vec![EntitySpec { object_id: 1, color_id: None, required_count: 1, relation: None }], Category::SingleObject);
        assert_eq!(formulate(&p).len(), 1);
        let p = prompt(vec![EntitySpec { object_id: KEY, color_id: None, required_count: 3, relation: None }], Category::Counting);
        let preds: Vec<_> = formulate(&p).conditions.iter().map(|c| c.predicate).collect();
        assert_eq!(preds, vec![Predicate::Exists { object_id: KEY }, Predicate::Count { object_id: KEY, count: 3 }]);
    }

    #[test]
    fn evaluate_examples() {
        let p = prompt(vec![EntitySpec { object_id: BANANA, color_id: Some(GREEN), required_count: 1, relation: None }], Category::Colors);
        let cs = formulate(&p);
        let exact = Scene::new(vec![SceneEntity { object_id: BANANA, color_id: GREEN, x: 0, y: 0 }]);
        let sv = evaluate(&cs, &exact, 0);
        assert_eq!(sv.scores, vec![1.0, 1.0]);
        assert_eq!(sv.aggregate(), 1.0);
        let wrong_color = Scene::new(vec![SceneEntity { object_id: BANANA, color_id: 0, x: 0, y: 0 }]);
        let sv = evaluate(&cs, &wrong_color, 0);
        assert_eq!(sv.scores, vec![1.0, 0.0]);
        assert_eq!(sv.aggregate(), 0.5);
        assert_eq!(evaluate(&cs, &Scene::default(), 0).scores[0], 0.0);
    }

    #[test]
    fn pass_rule() {
        assert!(passed(&ScoreVector::new(vec![1.0, 1.0, 1.0], 0), 0.95));
        assert!(!passed(&ScoreVector::new(vec![1.0, 0.94], 0), 0.95));
        for tau in [0.1, 0.5, 0.95, 1.0] {
            assert!(passed(&ScoreVector::new(vec![tau, tau], 0), tau));
        }
    }

    #[test]
    fn critique_partitions_by_threshold() {
        let p = prompt(vec![EntitySpec { object_id: BANANA, color_id: Some(GREEN), required_count: 1, relation: None }], Category::Colors);
        let cs = formulate(&p);
        assert!(critique(&cs, &ScoreVector::new(vec![1.0, 1.0], 0), 0.95).is_empty());
        let c = critique(&cs, &ScoreVector::new(vec![1.0, 0.2], 3), 0.95);
        assert_eq!(c.failed, vec![2]);
        assert_eq!(c.hints[0].predicate, cs.conditions[1].predicate);
        assert_eq!(c.step, 3);
        assert_eq!(critique(&cs, &ScoreVector::new(vec![0.0, 0.0], 0), 0.95).failed, vec![1, 2]);
    }

    #[test]
    fn perfect_scene_scores_one_and_formulate_is_stable() {
        let world = WorldConfig::default();
        for c in Category::ALL {
            for i in 0..100 {
                let p = gen_prompt(&world, &mut stream(3, Domain::Prompt, i), c, i).unwrap();
                let cs = formulate(&p);
                assert_eq!(cs, formulate(&p));
                assert!(world_is_compatible(&cs, &world));
                let sv = evaluate(&cs, &perfect_scene(&p, &world), 0);
                assert_eq!(sv.aggregate(), 1.0, "{p:?}");
                let unique: std::collections::HashSet<_> = cs.conditions.iter().map(|c| c.predicate).collect();
                assert_eq!(unique.len(), cs.len());
            }
        }
    }
}

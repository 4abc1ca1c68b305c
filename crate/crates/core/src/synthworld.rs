//! The synthetic compositional world: structured prompts, symbolic scenes,
//! ground-truth predicate semantics and the continuous encodings used by the
//! learners.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Maximum number of entities a prompt mentions.
pub const PROMPT_SLOTS: usize = 2;

/// Largest count a counting prompt asks for (further capped by `max_entities`).
pub const MAX_PROMPT_COUNT: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("world configuration cannot host category {category}: {reason}")]
    Unsupported { category: Category, reason: &'static str },
    #[error("invalid world configuration: {0}")]
    Config(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("scene vector has {got} entries, expected {expected}")]
    VectorLength { got: usize, expected: usize },
    #[error("scene vector entry {0} is not finite")]
    NonFinite(usize),
    #[error("cannot parse scene line `{0}`")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub grid: usize,
    pub objects: usize,
    pub colors: usize,
    pub max_entities: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { grid: 8, objects: 16, colors: 8, max_entities: 6 }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        for (name, v) in [("grid", self.grid), ("objects", self.objects), ("colors", self.colors), ("max_entities", self.max_entities)] {
            if v == 0 {
                return Err(WorldError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SingleObject,
    TwoObject,
    Counting,
    Colors,
    Position,
    ColorAttr,
}

impl Category {
    pub const ALL: [Category; 6] =
        [Category::SingleObject, Category::TwoObject, Category::Counting, Category::Colors, Category::Position, Category::ColorAttr];

    pub fn name(self) -> &'static str {
        match self {
            Category::SingleObject => "single_object",
            Category::TwoObject => "two_object",
            Category::Counting => "counting",
            Category::Colors => "colors",
            Category::Position => "position",
            Category::ColorAttr => "color_attr",
        }
    }

    pub fn index(self) -> usize {
        Category::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn entity_count(self) -> usize {
        match self {
            Category::SingleObject | Category::Counting | Category::Colors => 1,
            Category::TwoObject | Category::Position | Category::ColorAttr => 2,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| WorldError::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl RelationKind {
    pub const ALL: [RelationKind; 4] = [RelationKind::LeftOf, RelationKind::RightOf, RelationKind::Above, RelationKind::Below];

    pub fn index(self) -> usize {
        RelationKind::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::LeftOf => "left_of",
            RelationKind::RightOf => "right_of",
            RelationKind::Above => "above",
            RelationKind::Below => "below",
        }
    }

    /// Grid semantics: x grows rightwards, y grows downwards.
    pub fn holds(self, subject: (usize, usize), target: (usize, usize)) -> bool {
        match self {
            RelationKind::LeftOf => subject.0 < target.0,
            RelationKind::RightOf => subject.0 > target.0,
            RelationKind::Above => subject.1 < target.1,
            RelationKind::Below => subject.1 > target.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub kind: RelationKind,
    /// Index of the related entity within the prompt.
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpec {
    pub object_id: usize,
    pub color_id: Option<usize>,
    pub required_count: usize,
    pub relation: Option<Relation>,
}

impl EntitySpec {
    fn plain(object_id: usize) -> Self {
        Self { object_id, color_id: None, required_count: 1, relation: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: u64,
    pub category: Category,
    pub entities: Vec<EntitySpec>,
}

impl PromptSpec {
    pub fn validate(&self, world: &WorldConfig) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidPrompt(m));
        if self.entities.len() != self.category.entity_count() {
            return bad(format!("{} prompt needs {} entities, has {}", self.category, self.category.entity_count(), self.entities.len()));
        }
        let total: usize = self.entities.iter().map(|e| e.required_count).sum();
        if total > world.max_entities {
            return bad(format!("prompt requires {total} entities, world allows {}", world.max_entities));
        }
        for (i, e) in self.entities.iter().enumerate() {
            if e.object_id >= world.objects {
                return bad(format!("entity {i} object {} out of range", e.object_id));
            }
            if e.color_id.is_some_and(|c| c >= world.colors) {
                return bad(format!("entity {i} color out of range"));
            }
            if e.required_count == 0 {
                return bad(format!("entity {i} has zero required count"));
            }
            let wants_count = self.category == Category::Counting;
            if wants_count != (e.required_count > 1) {
                return bad(format!("entity {i} count {} inconsistent with {}", e.required_count, self.category));
            }
            let wants_color = matches!(self.category, Category::Colors | Category::ColorAttr);
            if wants_color != e.color_id.is_some() {
                return bad(format!("entity {i} color presence inconsistent with {}", self.category));
            }
            if let Some(r) = e.relation {
                if self.category != Category::Position {
                    return bad(format!("entity {i} carries a relation outside a position prompt"));
                }
                if r.target == i || r.target >= self.entities.len() {
                    return bad(format!("entity {i} relation target {} invalid", r.target));
                }
            }
        }
        if self.category == Category::Position && self.entities.iter().all(|e| e.relation.is_none()) {
            return bad("position prompt without a relation".into());
        }
        if self.entities.len() == 2 && self.entities[0].object_id == self.entities[1].object_id {
            return bad("two-entity prompt repeats an object".into());
        }
        Ok(())
    }
}

/// Draws one prompt of the given category. The result depends only on the
/// state of `rng`, so a stream seeded from `(seed, index)` is reproducible.
pub fn gen_prompt<R: Rng + ?Sized>(world: &WorldConfig, rng: &mut R, category: Category, id: u64) -> Result<PromptSpec, WorldError> {
    world.validate()?;
    let unsupported = |reason| Err(WorldError::Unsupported { category, reason });
    if category.entity_count() == 2 {
        if world.objects < 2 {
            return unsupported("needs at least 2 objects");
        }
        if world.max_entities < 2 {
            return unsupported("needs max_entities >= 2");
        }
    }
    if category == Category::Counting && world.max_entities < 2 {
        return unsupported("needs max_entities >= 2");
    }
    if category == Category::Position && world.grid < 2 {
        return unsupported("needs a grid of at least 2");
    }

    let first = rng.random_range(0..world.objects);
    let mut second = || {
        let mut o = rng.random_range(0..world.objects - 1);
        if o >= first {
            o += 1;
        }
        o
    };
    let entities = match category {
        Category::SingleObject => vec![EntitySpec::plain(first)],
        Category::TwoObject => {
            let b = second();
            vec![EntitySpec::plain(first), EntitySpec::plain(b)]
        }
        Category::Counting => {
            let hi = MAX_PROMPT_COUNT.min(world.max_entities);
            let n = rng.random_range(2..=hi);
            vec![EntitySpec { required_count: n, ..EntitySpec::plain(first) }]
        }
        Category::Colors => {
            let c = rng.random_range(0..world.colors);
            vec![EntitySpec { color_id: Some(c), ..EntitySpec::plain(first) }]
        }
        Category::Position => {
            let b = second();
            let kind = RelationKind::ALL[rng.random_range(0..4)];
            vec![EntitySpec { relation: Some(Relation { kind, target: 1 }), ..EntitySpec::plain(first) }, EntitySpec::plain(b)]
        }
        Category::ColorAttr => {
            let b = second();
            let ca = rng.random_range(0..world.colors);
            let cb = rng.random_range(0..world.colors);
            vec![EntitySpec { color_id: Some(ca), ..EntitySpec::plain(first) }, EntitySpec { color_id: Some(cb), ..EntitySpec::plain(b) }]
        }
    };
    Ok(PromptSpec { id, category, entities })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneEntity {
    pub object_id: usize,
    pub color_id: usize,
    pub x: usize,
    pub y: usize,
}

/// A generated "image": an ordered list of placed, coloured objects.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub entities: Vec<SceneEntity>,
}

impl Scene {
    pub fn new(entities: Vec<SceneEntity>) -> Self {
        Self { entities }
    }

    pub fn validate(&self, world: &WorldConfig) -> Result<(), WorldError> {
        if self.entities.len() > world.max_entities {
            return Err(WorldError::InvalidScene(format!("{} entities exceeds max {}", self.entities.len(), world.max_entities)));
        }
        for e in &self.entities {
            if e.object_id >= world.objects || e.color_id >= world.colors || e.x >= world.grid || e.y >= world.grid {
                return Err(WorldError::InvalidScene(format!("entity {e:?} out of range")));
            }
        }
        Ok(())
    }

    pub fn count_of(&self, object_id: usize) -> usize {
        self.entities.iter().filter(|e| e.object_id == object_id).count()
    }
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.entities.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "obj:{} color:{} at:({},{})", e.object_id, e.color_id, e.x, e.y)?;
        }
        Ok(())
    }
}

impl FromStr for Scene {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut entities = Vec::new();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty()) {
            entities.push(parse_entity_line(line).ok_or_else(|| WorldError::Parse(line.to_string()))?);
        }
        Ok(Scene { entities })
    }
}

fn parse_entity_line(line: &str) -> Option<SceneEntity> {
    let mut parts = line.split_whitespace();
    let object_id = parts.next()?.strip_prefix("obj:")?.parse().ok()?;
    let color_id = parts.next()?.strip_prefix("color:")?.parse().ok()?;
    let at = parts.next()?.strip_prefix("at:(")?.strip_suffix(')')?;
    let (x, y) = at.split_once(',')?;
    if parts.next().is_some() {
        return None;
    }
    Some(SceneEntity { object_id, color_id, x: x.trim().parse().ok()?, y: y.trim().parse().ok()? })
}

/// Atomic, independently checkable statement about a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    Exists { object_id: usize },
    Count { object_id: usize, count: usize },
    Color { object_id: usize, color_id: usize },
    Relation { relation: RelationKind, subject: usize, target: usize },
}

/// Ground-truth score of a predicate on a scene, in `[0, 1]`.
///
/// Counts earn partial credit `min(m, n) / max(m, n)`. A colour predicate
/// needs at least one instance of the object and every instance coloured.
/// A relation holds if some subject instance and some target instance
/// satisfy it.
pub fn evaluate_predicate(predicate: &Predicate, scene: &Scene) -> f64 {
    let of = |o: usize| scene.entities.iter().filter(move |e| e.object_id == o);
    let indicator = |b: bool| if b { 1.0 } else { 0.0 };
    match *predicate {
        Predicate::Exists { object_id } => indicator(of(object_id).next().is_some()),
        Predicate::Count { object_id, count } => {
            let found = of(object_id).count();
            if found == 0 || count == 0 {
                0.0
            } else {
                found.min(count) as f64 / found.max(count) as f64
            }
        }
        Predicate::Color { object_id, color_id } => {
            let mut any = false;
            let all = of(object_id).all(|e| {
                any = true;
                e.color_id == color_id
            });
            indicator(any && all)
        }
        Predicate::Relation { relation, subject, target } => {
            indicator(of(subject).any(|s| of(target).any(|t| relation.holds((s.x, s.y), (t.x, t.y)))))
        }
    }
}

/// A scene that realizes the prompt exactly.
pub fn perfect_scene(prompt: &PromptSpec, world: &WorldConfig) -> Scene {
    let last = world.grid.saturating_sub(1);
    let mid = world.grid / 2;
    let mut placed: Vec<Option<(usize, usize)>> = vec![None; prompt.entities.len()];
    for (i, e) in prompt.entities.iter().enumerate() {
        if let Some(r) = e.relation {
            let (s, t) = match r.kind {
                RelationKind::LeftOf => ((0, mid), (last, mid)),
                RelationKind::RightOf => ((last, mid), (0, mid)),
                RelationKind::Above => ((mid, 0), (mid, last)),
                RelationKind::Below => ((mid, last), (mid, 0)),
            };
            placed[i] = Some(s);
            placed[r.target] = Some(t);
        }
    }
    let mut entities = Vec::new();
    let mut cursor = 0usize;
    for (i, e) in prompt.entities.iter().enumerate() {
        for _ in 0..e.required_count {
            let (x, y) = placed[i].unwrap_or_else(|| {
                let p = (cursor % world.grid, (cursor / world.grid) % world.grid);
                cursor += 1;
                p
            });
            entities.push(SceneEntity { object_id: e.object_id, color_id: e.color_id.unwrap_or(0), x, y });
        }
    }
    Scene { entities }
}

/// Continuous carrier of a scene: `max_entities` slots of
/// `(object, color, x, y)` codewords.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneVector<T = f64> {
    pub values: Vec<T>,
}

pub const SLOT_WIDTH: usize = 4;

/// Codebook for one scalar field with `n` evenly spaced codewords in `[-1, 1]`.
#[derive(Debug, Clone, Copy)]
struct FieldCodebook {
    n: usize,
}

impl FieldCodebook {
    fn gap(self) -> f64 {
        if self.n <= 1 {
            f64::INFINITY
        } else {
            2.0 / (self.n - 1) as f64
        }
    }

    fn value(self, k: usize) -> f64 {
        if self.n <= 1 {
            -1.0
        } else {
            -1.0 + 2.0 * k as f64 / (self.n - 1) as f64
        }
    }

    fn nearest(self, v: f64) -> usize {
        if self.n <= 1 {
            return 0;
        }
        let k = ((v + 1.0) / self.gap()).round();
        k.clamp(0.0, (self.n - 1) as f64) as usize
    }
}

/// Slot codec for scenes. Codeword 0 of the object field is the empty-slot
/// sentinel; an empty slot encodes as all `-1`.
#[derive(Debug, Clone, Copy)]
pub struct SceneCodec {
    world: WorldConfig,
}

impl SceneCodec {
    pub fn new(world: WorldConfig) -> Self {
        Self { world }
    }

    pub fn dim(&self) -> usize {
        self.world.max_entities * SLOT_WIDTH
    }

    fn books(&self) -> [FieldCodebook; SLOT_WIDTH] {
        [
            FieldCodebook { n: self.world.objects + 1 },
            FieldCodebook { n: self.world.colors },
            FieldCodebook { n: self.world.grid },
            FieldCodebook { n: self.world.grid },
        ]
    }

    /// Smallest distance between two codewords of any field.
    pub fn min_codeword_gap(&self) -> f64 {
        self.books().iter().map(|b| b.gap()).fold(f64::INFINITY, f64::min)
    }

    pub fn encode<T: Scalar>(&self, scene: &Scene) -> Result<SceneVector<T>, WorldError> {
        scene.validate(&self.world)?;
        let books = self.books();
        let mut values = Vec::with_capacity(self.dim());
        for slot in 0..self.world.max_entities {
            let codes = match scene.entities.get(slot) {
                Some(e) => [e.object_id + 1, e.color_id, e.x, e.y],
                None => [0, 0, 0, 0],
            };
            values.extend(codes.iter().zip(books).map(|(&k, b)| T::of(b.value(k))));
        }
        Ok(SceneVector { values })
    }

    /// Nearest-codeword decode. Empty slots are skipped, so occupied slots
    /// after an empty one compact towards the front.
    pub fn decode<T: Scalar>(&self, v: &SceneVector<T>) -> Result<Scene, WorldError> {
        if v.values.len() != self.dim() {
            return Err(WorldError::VectorLength { got: v.values.len(), expected: self.dim() });
        }
        if let Some(i) = v.values.iter().position(|x| !x.is_finite()) {
            return Err(WorldError::NonFinite(i));
        }
        let books = self.books();
        let mut entities = Vec::new();
        for slot in v.values.chunks(SLOT_WIDTH) {
            let k: Vec<usize> = slot.iter().zip(books).map(|(&x, b)| b.nearest(x.as_f64())).collect();
            if k[0] == 0 {
                continue;
            }
            entities.push(SceneEntity { object_id: k[0] - 1, color_id: k[1], x: k[2], y: k[3] });
        }
        Ok(Scene { entities })
    }
}

/// Block one-hot prompt features: category, then per prompt slot the object,
/// colour (with a "none" code), count, relation kind (with "none") and
/// relation target.
#[derive(Debug, Clone, Copy)]
pub struct PromptEncoder {
    world: WorldConfig,
}

impl PromptEncoder {
    pub fn new(world: WorldConfig) -> Self {
        Self { world }
    }

    pub fn slot_width(&self) -> usize {
        self.world.objects + (self.world.colors + 1) + self.world.max_entities + 5 + PROMPT_SLOTS
    }

    pub fn dim(&self) -> usize {
        Category::ALL.len() + PROMPT_SLOTS * self.slot_width()
    }

    /// Offset of prompt slot `e`'s object block.
    pub fn object_offset(&self, e: usize) -> usize {
        Category::ALL.len() + e * self.slot_width()
    }

    pub fn color_offset(&self, e: usize) -> usize {
        self.object_offset(e) + self.world.objects
    }

    pub fn count_offset(&self, e: usize) -> usize {
        self.color_offset(e) + self.world.colors + 1
    }

    pub fn relation_offset(&self, e: usize) -> usize {
        self.count_offset(e) + self.world.max_entities
    }

    pub fn target_offset(&self, e: usize) -> usize {
        self.relation_offset(e) + 5
    }

    pub fn encode<T: Scalar>(&self, prompt: &PromptSpec) -> Vec<T> {
        let mut v = vec![T::zero(); self.dim()];
        v[prompt.category.index()] = T::one();
        for (e, spec) in prompt.entities.iter().take(PROMPT_SLOTS).enumerate() {
            v[self.object_offset(e) + spec.object_id] = T::one();
            v[self.color_offset(e) + spec.color_id.map_or(0, |c| c + 1)] = T::one();
            let count = spec.required_count.clamp(1, self.world.max_entities);
            v[self.count_offset(e) + count - 1] = T::one();
            match spec.relation {
                Some(r) => {
                    v[self.relation_offset(e) + 1 + r.kind.index()] = T::one();
                    v[self.target_offset(e) + r.target.min(PROMPT_SLOTS - 1)] = T::one();
                }
                None => v[self.relation_offset(e)] = T::one(),
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use std::collections::HashSet;

    fn w() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn category_shapes() {
        let mut rng = stream(1, Domain::Prompt, 0);
        let p = gen_prompt(&w(), &mut rng, Category::SingleObject, 0).unwrap();
        assert_eq!(p.entities.len(), 1);
        assert_eq!(p.entities[0].required_count, 1);
        assert!(p.entities[0].relation.is_none());
        let mut rng = stream(1, Domain::Prompt, 0);
        let p = gen_prompt(&w(), &mut rng, Category::TwoObject, 0).unwrap();
        assert_eq!(p.entities.len(), 2);
        for c in Category::ALL {
            for i in 0..200 {
                let p = gen_prompt(&w(), &mut stream(9, Domain::Prompt, i), c, i).unwrap();
                p.validate(&w()).unwrap();
                if c == Category::Counting {
                    assert!(p.entities[0].required_count >= 2);
                }
            }
        }
    }

    #[test]
    fn gen_prompt_is_deterministic() {
        for c in Category::ALL {
            let a = gen_prompt(&w(), &mut stream(1, Domain::Prompt, 5), c, 5).unwrap();
            let b = gen_prompt(&w(), &mut stream(1, Domain::Prompt, 5), c, 5).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn unknown_category_is_config_error() {
        assert_eq!("triple_object".parse::<Category>(), Err(WorldError::UnknownCategory("triple_object".into())));
        assert_eq!("color_attr".parse::<Category>(), Ok(Category::ColorAttr));
        let tiny = WorldConfig { objects: 1, ..w() };
        assert!(matches!(
            gen_prompt(&tiny, &mut stream(0, Domain::Prompt, 0), Category::TwoObject, 0),
            Err(WorldError::Unsupported { .. })
        ));
    }

    fn ent(o: usize, c: usize, x: usize, y: usize) -> SceneEntity {
        SceneEntity { object_id: o, color_id: c, x, y }
    }

    #[test]
    fn predicate_examples() {
        let banana = 3;
        let scene = Scene::new(vec![ent(banana, 2, 1, 1), ent(banana, 2, 4, 1), ent(7, 0, 4, 6)]);
        assert_eq!(evaluate_predicate(&Predicate::Exists { object_id: banana }, &scene), 1.0);
        assert_eq!(evaluate_predicate(&Predicate::Exists { object_id: 9 }, &scene), 0.0);
        // 2 bananas against a requirement of 3
        let c = evaluate_predicate(&Predicate::Count { object_id: banana, count: 3 }, &scene);
        assert!((c - 2.0 / 3.0).abs() < 1e-15);
        // 2 bananas against a requirement of 1: over-generation also loses credit
        assert_eq!(evaluate_predicate(&Predicate::Count { object_id: banana, count: 1 }, &scene), 0.5);
        assert_eq!(evaluate_predicate(&Predicate::Count { object_id: 9, count: 2 }, &scene), 0.0);
        assert_eq!(evaluate_predicate(&Predicate::Color { object_id: banana, color_id: 2 }, &scene), 1.0);
        assert_eq!(evaluate_predicate(&Predicate::Color { object_id: banana, color_id: 1 }, &scene), 0.0);
        assert_eq!(evaluate_predicate(&Predicate::Color { object_id: 9, color_id: 1 }, &scene), 0.0);
    }

    #[test]
    fn relation_matches_coordinate_oracle() {
        let (a, b) = (0, 1);
        let scene = Scene::new(vec![ent(a, 0, 1, 3), ent(b, 0, 4, 5)]);
        let rel = |k| evaluate_predicate(&Predicate::Relation { relation: k, subject: a, target: b }, &scene);
        assert_eq!(rel(RelationKind::LeftOf), 1.0);
        assert_eq!(rel(RelationKind::RightOf), 0.0);
        assert_eq!(rel(RelationKind::Above), 1.0);
        assert_eq!(rel(RelationKind::Below), 0.0);
        // exhaustive small grid against the raw comparison
        for (sx, sy, tx, ty) in (0..3).flat_map(|i| (0..3).flat_map(move |j| (0..3).flat_map(move |k| (0..3).map(move |l| (i, j, k, l))))) {
            let s = Scene::new(vec![ent(a, 0, sx, sy), ent(b, 0, tx, ty)]);
            let left = evaluate_predicate(&Predicate::Relation { relation: RelationKind::LeftOf, subject: a, target: b }, &s);
            assert_eq!(left == 1.0, sx < tx);
            let below = evaluate_predicate(&Predicate::Relation { relation: RelationKind::Below, subject: a, target: b }, &s);
            assert_eq!(below == 1.0, sy > ty);
        }
    }

    #[test]
    fn empty_scene_roundtrip_is_all_sentinel() {
        let codec = SceneCodec::new(w());
        let v: SceneVector = codec.encode(&Scene::default()).unwrap();
        assert_eq!(v.values.len(), codec.dim());
        assert!(v.values.iter().all(|&x| x == -1.0));
        assert_eq!(codec.decode(&v).unwrap(), Scene::default());
    }

    #[test]
    fn exhaustive_roundtrip_on_small_world() {
        let small = WorldConfig { grid: 2, objects: 2, colors: 2, max_entities: 2 };
        let codec = SceneCodec::new(small);
        let mut singles = Vec::new();
        for o in 0..2 {
            for c in 0..2 {
                for x in 0..2 {
                    for y in 0..2 {
                        singles.push(ent(o, c, x, y));
                    }
                }
            }
        }
        let mut scenes = vec![Scene::default()];
        scenes.extend(singles.iter().map(|&e| Scene::new(vec![e])));
        for &a in &singles {
            for &b in &singles {
                scenes.push(Scene::new(vec![a, b]));
            }
        }
        assert_eq!(scenes.len(), 1 + 16 + 256);
        for s in &scenes {
            let v: SceneVector<f64> = codec.encode(s).unwrap();
            assert_eq!(&codec.decode(&v).unwrap(), s);
            let v32: SceneVector<f32> = codec.encode(s).unwrap();
            assert_eq!(&codec.decode(&v32).unwrap(), s);
        }
    }

    #[test]
    fn perturbation_below_half_gap_still_decodes() {
        let codec = SceneCodec::new(w());
        // independent gap computation: object field has objects+1 codewords over [-1,1]
        let gaps = [2.0 / 16.0, 2.0 / 7.0, 2.0 / 7.0, 2.0 / 7.0];
        let min_gap = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((codec.min_codeword_gap() - min_gap).abs() < 1e-15);
        let radius = 0.49 * min_gap;
        let scene = Scene::new(vec![ent(15, 7, 7, 0), ent(0, 0, 0, 7), ent(8, 3, 4, 4)]);
        let v: SceneVector = codec.encode(&scene).unwrap();
        for sign in [-1.0, 1.0] {
            let shifted = SceneVector {
                values: v.values.iter().enumerate().map(|(i, x)| x + sign * radius * if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            };
            assert_eq!(codec.decode(&shifted).unwrap(), scene);
        }
    }

    #[test]
    fn decode_rejects_non_finite() {
        let codec = SceneCodec::new(w());
        let mut v: SceneVector = codec.encode(&Scene::default()).unwrap();
        v.values[3] = f64::NAN;
        assert_eq!(codec.decode(&v), Err(WorldError::NonFinite(3)));
    }

    #[test]
    fn scene_text_form() {
        let s = Scene::new(vec![ent(3, 1, 2, 5), ent(0, 0, 0, 0)]);
        let text = s.to_string();
        assert_eq!(text, "obj:3 color:1 at:(2,5)\nobj:0 color:0 at:(0,0)");
        assert_eq!(text.parse::<Scene>().unwrap(), s);
        assert_eq!("".parse::<Scene>().unwrap(), Scene::default());
        assert!("obj:3 colour:1 at:(2,5)".parse::<Scene>().is_err());
    }

    #[test]
    fn prompt_encoding_blocks_and_injectivity() {
        let enc = PromptEncoder::new(w());
        let p = gen_prompt(&w(), &mut stream(4, Domain::Prompt, 0), Category::Colors, 0).unwrap();
        let a: Vec<f64> = enc.encode(&p);
        assert_eq!(a, enc.encode::<f64>(&p.clone()));
        let mut q = p.clone();
        q.entities[0].color_id = Some((p.entities[0].color_id.unwrap() + 1) % 8);
        let b: Vec<f64> = enc.encode(&q);
        let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        let color_block = enc.color_offset(0)..enc.color_offset(0) + 9;
        assert!(!diff.is_empty() && diff.iter().all(|i| color_block.contains(i)));

        let mut seen = HashSet::new();
        let mut prompts = HashSet::new();
        for i in 0..1000u64 {
            let c = Category::ALL[(i % 6) as usize];
            let mut p = gen_prompt(&w(), &mut stream(11, Domain::Prompt, i), c, 0).unwrap();
            p.id = 0;
            let bits: Vec<u64> = enc.encode::<f64>(&p).iter().map(|x| x.to_bits()).collect();
            // distinct prompts must map to distinct vectors
            assert_eq!(prompts.insert(p), seen.insert(bits));
        }
    }

    #[test]
    fn perfect_scene_satisfies_all_categories() {
        for c in Category::ALL {
            for i in 0..50 {
                let p = gen_prompt(&w(), &mut stream(2, Domain::Prompt, i), c, i).unwrap();
                let s = perfect_scene(&p, &w());
                s.validate(&w()).unwrap();
                for e in &p.entities {
                    assert_eq!(s.count_of(e.object_id), e.required_count);
                }
            }
        }
    }
}

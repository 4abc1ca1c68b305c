//! Run configuration: one TOML file holding every setting of a run.
//!
//! Loading happens in three passes, each reporting every problem it finds
//! with the dotted path of the offending key: a schema pass (missing,
//! unknown and mistyped keys), a typed parse, and semantic range checks.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federated::FederatedConfig;
use crate::learner::{
    CategoricalConfig, CategoricalLearner, DiffusionConfig, DiffusionLearner, Learner, LearnerKind, Model, PriorConfig, VersionedParams,
};
use crate::pairgen::PairRule;
use crate::pipeline::{Mode, PipelineConfig, StreamSettings};
use crate::rng::{stream, Domain};
use crate::synthworld::{gen_prompt, Category, WorldConfig};
use crate::trainer::{LossVariant, OptimizerKind, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not valid TOML: {0}")]
    Syntax(String),
    #[error("{} configuration problem(s):\n{}", .0.len(), .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Issue>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    Str,
    Table,
}

/// Every key of the file. Order only matters for error listings.
const SCHEMA: &[(&str, Kind)] = &[
    ("seed", Kind::Int),
    ("output_dir", Kind::Str),
    ("world", Kind::Table),
    ("world.grid", Kind::Int),
    ("world.objects", Kind::Int),
    ("world.colors", Kind::Int),
    ("world.max_entities", Kind::Int),
    ("verifier", Kind::Table),
    ("verifier.tau", Kind::Float),
    ("learner", Kind::Table),
    ("learner.kind", Kind::Str),
    ("learner.lora_rank", Kind::Int),
    ("learner.lora_alpha", Kind::Float),
    ("learner.lora_init_scale", Kind::Float),
    ("learner.prior", Kind::Table),
    ("learner.prior.first_object", Kind::Float),
    ("learner.prior.repeat_object", Kind::Float),
    ("learner.prior.second_object", Kind::Float),
    ("learner.prior.stop_first", Kind::Float),
    ("learner.prior.stop_later", Kind::Float),
    ("learner.prior.color", Kind::Float),
    ("learner.prior.critique", Kind::Float),
    ("learner.prior.echo_color", Kind::Float),
    ("learner.prior.distractor", Kind::Float),
    ("learner.diffusion", Kind::Table),
    ("learner.diffusion.hidden", Kind::Int),
    ("learner.diffusion.steps", Kind::Int),
    ("learner.diffusion.beta_start", Kind::Float),
    ("learner.diffusion.beta_end", Kind::Float),
    ("learner.diffusion.init_scale", Kind::Float),
    ("training", Kind::Table),
    ("training.beta", Kind::Float),
    ("training.learning_rate", Kind::Float),
    ("training.optimizer", Kind::Str),
    ("training.adam_beta1", Kind::Float),
    ("training.adam_beta2", Kind::Float),
    ("training.adam_eps", Kind::Float),
    ("training.batch_size", Kind::Int),
    ("training.loss", Kind::Str),
    ("training.lora_only", Kind::Bool),
    ("training.clip_norm", Kind::Float),
    ("training.noise_draws", Kind::Int),
    ("pairs", Kind::Table),
    ("pairs.max_steps", Kind::Int),
    ("pairs.min_margin", Kind::Float),
    ("pairs.intermediate_chosen", Kind::Bool),
    ("replay", Kind::Table),
    ("replay.capacity", Kind::Int),
    ("pipeline", Kind::Table),
    ("pipeline.train_frequency", Kind::Int),
    ("pipeline.burst_steps", Kind::Int),
    ("pipeline.lag_bound", Kind::Int),
    ("pipeline.mode", Kind::Str),
    ("pipeline.prompt_budget", Kind::Int),
    ("pipeline.heldout_per_category", Kind::Int),
    ("pipeline.queue_capacity", Kind::Int),
    ("pipeline.category_mix", Kind::Table),
    ("pipeline.category_mix.single_object", Kind::Float),
    ("pipeline.category_mix.two_object", Kind::Float),
    ("pipeline.category_mix.counting", Kind::Float),
    ("pipeline.category_mix.colors", Kind::Float),
    ("pipeline.category_mix.position", Kind::Float),
    ("pipeline.category_mix.color_attr", Kind::Float),
    ("federated", Kind::Table),
    ("federated.clients", Kind::Int),
    ("federated.rounds", Kind::Int),
    ("federated.prompts_per_round", Kind::Int),
    ("federated.identical_clients", Kind::Bool),
    ("federated.skew", Kind::Float),
    ("federated.check_equivalence", Kind::Bool),
    ("gradcheck", Kind::Table),
    ("gradcheck.probes", Kind::Int),
    ("gradcheck.step", Kind::Float),
    ("gradcheck.tolerance", Kind::Float),
    ("gradcheck.inject_sign_flip", Kind::Bool),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifierSection {
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSection {
    pub hidden: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub init_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerSection {
    pub kind: LearnerKind,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_init_scale: f64,
    pub prior: PriorConfig,
    pub diffusion: DiffusionSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSection {
    pub beta: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub loss: LossVariant,
    pub lora_only: bool,
    /// `0` disables clipping.
    pub clip_norm: f64,
    pub noise_draws: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairsSection {
    pub max_steps: usize,
    pub min_margin: f64,
    pub intermediate_chosen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplaySection {
    pub capacity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryMix {
    pub single_object: f64,
    pub two_object: f64,
    pub counting: f64,
    pub colors: f64,
    pub position: f64,
    pub color_attr: f64,
}

impl CategoryMix {
    pub fn weights(&self) -> [f64; 6] {
        [self.single_object, self.two_object, self.counting, self.colors, self.position, self.color_attr]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineSection {
    pub train_frequency: usize,
    pub burst_steps: usize,
    pub lag_bound: u64,
    pub mode: Mode,
    pub prompt_budget: u64,
    pub heldout_per_category: usize,
    pub queue_capacity: usize,
    pub category_mix: CategoryMix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub probes: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Negative control: flips the analytic gradient's sign.
    pub inject_sign_flip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub verifier: VerifierSection,
    pub learner: LearnerSection,
    pub training: TrainingSection,
    pub pairs: PairsSection,
    pub replay: ReplaySection,
    pub pipeline: PipelineSection,
    pub federated: FederatedConfig,
    pub gradcheck: GradcheckConfig,
}

fn kind_of(v: &toml::Value) -> Kind {
    match v {
        toml::Value::Integer(_) => Kind::Int,
        toml::Value::Float(_) => Kind::Float,
        toml::Value::Boolean(_) => Kind::Bool,
        toml::Value::String(_) => Kind::Str,
        toml::Value::Table(_) => Kind::Table,
        _ => Kind::Str,
    }
}

fn walk(prefix: &str, table: &toml::Table, issues: &mut Vec<Issue>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match SCHEMA.iter().find(|(p, _)| *p == path) {
            None => issues.push(Issue { path, message: "unknown key".into() }),
            Some(&(_, expected)) => {
                let got = kind_of(v);
                let ok = got == expected || (expected == Kind::Float && got == Kind::Int);
                if !ok || matches!(v, toml::Value::Array(_) | toml::Value::Datetime(_)) {
                    issues.push(Issue { path: path.clone(), message: format!("expected {expected:?}, found {}", v.type_str()) });
                } else if let toml::Value::Table(t) = v {
                    walk(&path, t, issues);
                }
            }
        }
    }
}

fn lookup<'a>(table: &'a toml::Table, path: &str) -> Option<&'a toml::Value> {
    let mut parts = path.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn schema_issues(table: &toml::Table) -> Vec<Issue> {
    let mut issues = Vec::new();
    for (path, _) in SCHEMA {
        let parent_present = match path.rsplit_once('.') {
            Some((parent, _)) => lookup(table, parent).is_some_and(toml::Value::is_table),
            None => true,
        };
        if parent_present && lookup(table, path).is_none() {
            issues.push(Issue { path: path.to_string(), message: "missing key".into() });
        }
    }
    walk("", table, &mut issues);
    issues
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let issues = schema_issues(&table);
        if !issues.is_empty() {
            return Err(ConfigError::Invalid(issues));
        }
        let config: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(vec![Issue { path: "(value)".into(), message: e.message().to_string() }]))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Semantic checks; every violation is reported.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let mut check = |ok: bool, path: &str, message: &str| {
            if !ok {
                issues.push(Issue { path: path.to_string(), message: message.to_string() });
            }
        };
        let pos = |x: f64| x > 0.0 && x.is_finite();
        let w = &self.world;
        check(w.grid >= 1, "world.grid", "must be at least 1");
        check(w.objects >= 1, "world.objects", "must be at least 1");
        check(w.colors >= 1, "world.colors", "must be at least 1");
        check(w.max_entities >= 1, "world.max_entities", "must be at least 1");
        check(self.verifier.tau > 0.0 && self.verifier.tau <= 1.0, "verifier.tau", "must lie in (0, 1]");

        let l = &self.learner;
        check(l.lora_rank >= 1, "learner.lora_rank", "must be at least 1");
        let min_dim = match l.kind {
            LearnerKind::Categorical => w.colors.min(w.grid).min(w.objects + 1),
            LearnerKind::Diffusion => l.diffusion.hidden.min(crate::synthworld::SceneCodec::new(*w).dim()),
        };
        check(l.lora_rank <= min_dim.max(1), "learner.lora_rank", "must not exceed the smallest adapted dimension");
        check(pos(l.lora_alpha), "learner.lora_alpha", "must be positive");
        check(pos(l.lora_init_scale), "learner.lora_init_scale", "must be positive");
        let p = &l.prior;
        for (name, v) in [
            ("first_object", p.first_object),
            ("repeat_object", p.repeat_object),
            ("second_object", p.second_object),
            ("stop_first", p.stop_first),
            ("stop_later", p.stop_later),
            ("color", p.color),
            ("critique", p.critique),
            ("echo_color", p.echo_color),
            ("distractor", p.distractor),
        ] {
            check(v.is_finite(), &format!("learner.prior.{name}"), "must be finite");
        }
        let d = &l.diffusion;
        check(d.hidden >= 1, "learner.diffusion.hidden", "must be at least 1");
        check(d.steps >= 1, "learner.diffusion.steps", "must be at least 1");
        check(d.beta_start > 0.0 && d.beta_start < 1.0, "learner.diffusion.beta_start", "must lie in (0, 1)");
        check(d.beta_end >= d.beta_start && d.beta_end < 1.0, "learner.diffusion.beta_end", "must lie in [beta_start, 1)");
        check(pos(d.init_scale), "learner.diffusion.init_scale", "must be positive");

        let t = &self.training;
        check(pos(t.beta), "training.beta", "must be positive");
        check(pos(t.learning_rate), "training.learning_rate", "must be positive");
        check((0.0..1.0).contains(&t.adam_beta1), "training.adam_beta1", "must lie in [0, 1)");
        check((0.0..1.0).contains(&t.adam_beta2), "training.adam_beta2", "must lie in [0, 1)");
        check(pos(t.adam_eps), "training.adam_eps", "must be positive");
        check(t.batch_size >= 1, "training.batch_size", "must be at least 1");
        check(t.clip_norm >= 0.0 && t.clip_norm.is_finite(), "training.clip_norm", "must be non-negative (0 disables)");
        check(!(t.loss == LossVariant::DdpoRaw && t.clip_norm == 0.0), "training.clip_norm", "ddpo_raw requires clipping");
        check(t.noise_draws >= 1, "training.noise_draws", "must be at least 1");
        let matches = t.loss.is_diffusion() == (l.kind == LearnerKind::Diffusion);
        check(matches, "training.loss", "does not fit learner.kind (dpo_* for categorical, ddpo_* for diffusion)");

        check(self.pairs.max_steps >= 1, "pairs.max_steps", "must be at least 1");
        check((0.0..=1.0).contains(&self.pairs.min_margin), "pairs.min_margin", "must lie in [0, 1]");
        check(self.replay.capacity >= 1, "replay.capacity", "must be at least 1");

        let q = &self.pipeline;
        check(q.train_frequency >= 1, "pipeline.train_frequency", "must be at least 1");
        check(q.burst_steps >= 1, "pipeline.burst_steps", "must be at least 1");
        check(q.prompt_budget >= 1, "pipeline.prompt_budget", "must be at least 1");
        check(q.heldout_per_category >= 1, "pipeline.heldout_per_category", "must be at least 1");
        check(q.queue_capacity >= 1, "pipeline.queue_capacity", "must be at least 1");
        let mix = q.category_mix.weights();
        for (c, wgt) in Category::ALL.iter().zip(mix) {
            let path = format!("pipeline.category_mix.{}", c.name());
            check(wgt >= 0.0 && wgt.is_finite(), &path, "must be a non-negative weight");
            if wgt > 0.0 && w.validate().is_ok() {
                check(gen_prompt(w, &mut stream(0, Domain::Prompt, 0), *c, 0).is_ok(), &path, "category not supported by the world");
            }
        }
        check(mix.iter().sum::<f64>() > 0.0, "pipeline.category_mix", "needs at least one positive weight");

        let f = &self.federated;
        check(f.clients >= 1, "federated.clients", "must be at least 1");
        check(f.rounds >= 1, "federated.rounds", "must be at least 1");
        check(
            f.prompts_per_round >= 1 && q.train_frequency >= 1 && f.prompts_per_round.is_multiple_of(q.train_frequency as u64),
            "federated.prompts_per_round",
            "must be a positive multiple of pipeline.train_frequency",
        );
        check((0.0..1.0).contains(&f.skew), "federated.skew", "must lie in [0, 1)");
        check(!(f.identical_clients && f.skew > 0.0), "federated.skew", "must be 0 when identical_clients is set");

        let g = &self.gradcheck;
        check(g.probes >= 1, "gradcheck.probes", "must be at least 1");
        check(pos(g.step), "gradcheck.step", "must be positive");
        check(pos(g.tolerance), "gradcheck.tolerance", "must be positive");

        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        let t = &self.training;
        TrainingConfig {
            beta: t.beta,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            batch_size: t.batch_size,
            loss: t.loss,
            lora_only: t.lora_only,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            noise_draws: t.noise_draws,
        }
    }

    pub fn stream_settings(&self) -> StreamSettings {
        let q = &self.pipeline;
        StreamSettings {
            seed: self.seed,
            world: self.world,
            tau: self.verifier.tau,
            max_steps: self.pairs.max_steps,
            rule: PairRule { min_margin: self.pairs.min_margin, intermediate_chosen: self.pairs.intermediate_chosen },
            replay_capacity: self.replay.capacity,
            training: self.training_config(),
            pipeline: PipelineConfig {
                train_frequency: q.train_frequency,
                burst_steps: q.burst_steps,
                lag_bound: q.lag_bound,
                mode: q.mode,
                prompt_budget: q.prompt_budget,
                category_mix: q.category_mix.weights(),
                heldout_per_category: q.heldout_per_category,
                queue_capacity: q.queue_capacity,
            },
        }
    }

    pub fn categorical_config(&self) -> CategoricalConfig {
        let l = &self.learner;
        CategoricalConfig {
            world: self.world,
            lora_rank: l.lora_rank,
            lora_alpha: l.lora_alpha,
            lora_init_scale: l.lora_init_scale,
            prior: l.prior,
        }
    }

    pub fn diffusion_config(&self) -> DiffusionConfig {
        let l = &self.learner;
        let d = &l.diffusion;
        DiffusionConfig {
            world: self.world,
            hidden: d.hidden,
            steps: d.steps,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
            lora_rank: l.lora_rank,
            lora_alpha: l.lora_alpha,
            lora_init_scale: l.lora_init_scale,
            init_scale: d.init_scale,
        }
    }

    pub fn model(&self) -> Result<Model<f64>, crate::learner::LearnerError> {
        Ok(match self.learner.kind {
            LearnerKind::Categorical => Model::Categorical(CategoricalLearner::new(self.categorical_config())),
            LearnerKind::Diffusion => Model::Diffusion(DiffusionLearner::new(self.diffusion_config())?),
        })
    }

    /// Version-0 weights drawn from the run seed.
    pub fn initial_snapshot(&self, model: &Model<f64>) -> VersionedParams<f64> {
        VersionedParams::new(0, model.init_params(&mut stream(self.seed, Domain::Init, 0)))
    }
}

/// The documented default configuration.
pub const DEFAULT_TOML: &str = include_str!("../../../configs/default.toml");

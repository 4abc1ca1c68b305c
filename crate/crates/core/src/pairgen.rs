//! Verify-refine trajectories and No→Yes preference pair mining.

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::{LearnerError, SceneGenerator};
use crate::synthworld::{PromptSpec, Scene};
use crate::verifier::{Critique, OracleVerifier, ScoreVector};

pub const DEFAULT_MIN_MARGIN: f64 = 0.15;
pub const DEFAULT_MAX_STEPS: usize = 5;

#[derive(Debug, Error)]
pub enum PairgenError {
    #[error("prompt {prompt_id}, step {step}: {source}")]
    Learner {
        prompt_id: u64,
        step: usize,
        #[source]
        source: LearnerError,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub scene: Scene,
    pub scores: ScoreVector,
    /// Present on every failed step; the next attempt conditions on it.
    pub critique: Option<Critique>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "step")]
pub enum Status {
    SatisfiedAt(usize),
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: PromptSpec,
    pub steps: Vec<TrajectoryStep>,
    pub status: Status,
}

impl Trajectory {
    /// Passed on the first attempt: nothing to learn from.
    pub fn is_skipped(&self) -> bool {
        self.status == Status::SatisfiedAt(0)
    }

    pub fn is_exhausted(&self) -> bool {
        self.status == Status::Exhausted
    }

    /// Aggregate gain from the first attempt to the positive, if any.
    pub fn progress(&self) -> Option<f64> {
        match self.status {
            Status::SatisfiedAt(t) => Some(self.steps[t].scores.aggregate() - self.steps[0].scores.aggregate()),
            Status::Exhausted => None,
        }
    }

    /// One JSON object per step for audit logs.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.steps.iter().enumerate() {
            let line = serde_json::json!({
                "prompt_id": self.prompt.id,
                "step": i,
                "scene": s.scene.to_string(),
                "scores": s.scores.scores,
                "failed": s.critique.as_ref().map(|c| c.failed.clone()).unwrap_or_default(),
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: PromptSpec,
    pub rejected: Scene,
    pub chosen: Scene,
    pub margin: f64,
    /// Trajectory step the rejected scene came from.
    pub step: usize,
}

/// Generates up to `max_steps` attempts, feeding each failure's critique into
/// the next attempt, and stops at the first pass.
pub fn run_trajectory<G: SceneGenerator + ?Sized>(
    generator: &G,
    verifier: &OracleVerifier,
    prompt: &PromptSpec,
    max_steps: usize,
    rng: &mut dyn RngCore,
) -> Result<Trajectory, PairgenError> {
    if max_steps == 0 {
        return Err(PairgenError::Argument("trajectory needs at least one step".into()));
    }
    if !(verifier.tau > 0.0 && verifier.tau <= 1.0) {
        return Err(PairgenError::Argument(format!("tau {} outside (0, 1]", verifier.tau)));
    }
    let conditions = verifier.formulate(prompt);
    let mut steps: Vec<TrajectoryStep> = Vec::with_capacity(max_steps);
    for t in 0..max_steps {
        let feedback = steps.last().and_then(|s| s.critique.as_ref());
        let scene =
            generator.generate(prompt, feedback, rng).map_err(|source| PairgenError::Learner { prompt_id: prompt.id, step: t, source })?;
        let scores = verifier.evaluate(&conditions, &scene, t);
        if verifier.passed(&scores) {
            steps.push(TrajectoryStep { scene, scores, critique: None });
            return Ok(Trajectory { prompt: prompt.clone(), steps, status: Status::SatisfiedAt(t) });
        }
        let critique = verifier.critique(&conditions, &scores);
        steps.push(TrajectoryStep { scene, scores, critique: Some(critique) });
    }
    Ok(Trajectory { prompt: prompt.clone(), steps, status: Status::Exhausted })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRule {
    pub min_margin: f64,
    /// Also pair each failed attempt with every later, higher-scoring
    /// intermediate revision, not just the final positive.
    pub intermediate_chosen: bool,
}

impl Default for PairRule {
    fn default() -> Self {
        Self { min_margin: DEFAULT_MIN_MARGIN, intermediate_chosen: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairYield {
    pub kept: Vec<PreferencePair>,
    /// Candidates dropped by the margin filter.
    pub filtered: usize,
}

impl PairYield {
    pub fn candidates(&self) -> usize {
        self.kept.len() + self.filtered
    }
}

/// Every earlier attempt becomes a negative against the shared positive;
/// candidates below `min_margin` (or with no positive gap) are dropped.
pub fn extract_pairs(traj: &Trajectory, min_margin: f64) -> Vec<PreferencePair> {
    extract_pairs_with(traj, &PairRule { min_margin, intermediate_chosen: false }).kept
}

pub fn extract_pairs_with(traj: &Trajectory, rule: &PairRule) -> PairYield {
    let Status::SatisfiedAt(t) = traj.status else {
        return PairYield::default();
    };
    let mut out = PairYield::default();
    let agg: Vec<f64> = traj.steps.iter().map(|s| s.scores.aggregate()).collect();
    for k in 0..t {
        let chosen_steps: Vec<usize> =
            if rule.intermediate_chosen { (k + 1..=t).filter(|&j| j == t || agg[j] > agg[k]).collect() } else { vec![t] };
        for j in chosen_steps {
            let margin = agg[j] - agg[k];
            if margin >= rule.min_margin && margin > 0.0 {
                out.kept.push(PreferencePair {
                    prompt: traj.prompt.clone(),
                    rejected: traj.steps[k].scene.clone(),
                    chosen: traj.steps[j].scene.clone(),
                    margin,
                    step: k,
                });
            } else {
                out.filtered += 1;
            }
        }
    }
    out
}

/// Uniformly permutes `items` and cuts them into chunks of at most `batch`.
pub fn shuffle_into_batches<P>(mut items: Vec<P>, batch: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<P>>, PairgenError> {
    if batch == 0 {
        return Err(PairgenError::Argument("batch size must be at least 1".into()));
    }
    items.shuffle(rng);
    let mut out = Vec::with_capacity(items.len().div_ceil(batch));
    let mut iter = items.into_iter().peekable();
    while iter.peek().is_some() {
        out.push(iter.by_ref().take(batch).collect());
    }
    Ok(out)
}

/// Test double that replays a fixed list of scenes, one per call.
pub struct Scripted {
    scenes: Vec<Scene>,
    calls: std::cell::Cell<usize>,
}

impl Scripted {
    pub fn new(scenes: Vec<Scene>) -> Self {
        Self { scenes, calls: std::cell::Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl SceneGenerator for Scripted {
    fn generate(&self, _p: &PromptSpec, _c: Option<&Critique>, _rng: &mut dyn RngCore) -> Result<Scene, LearnerError> {
        let i = self.calls.get();
        self.calls.set(i + 1);
        self.scenes.get(i.min(self.scenes.len().saturating_sub(1))).cloned().ok_or_else(|| LearnerError::Argument("empty script".into()))
    }
}

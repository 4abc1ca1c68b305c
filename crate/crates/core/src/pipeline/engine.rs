//! Building blocks shared by the streaming runs and the federated clients:
//! a seeded prompt source, the generation side (verify-refine plus pair
//! mining) and the training side (replay buffer plus optimizer bursts).

use std::cell::RefCell;
use std::sync::Arc;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::RngCore;

use super::metrics::{BurstRecord, MetricsLog, PromptOutcome, PromptRecord};
use super::registry::SnapshotRegistry;
use super::{PipelineError, StreamSettings};
use crate::learner::{LearnerError, Model, ParameterSet, Policy, SceneGenerator, VersionedParams};
use crate::pairgen::{extract_pairs_with, run_trajectory, PairRule, PairYield, Trajectory};
use crate::replay::ReplayBuffer;
use crate::rng::{stream, Domain};
use crate::synthworld::{gen_prompt, Category, PromptSpec, Scene, WorldConfig};
use crate::trainer::{apply_update, loss_and_grad, OptimizerState, StepRecord, TrainingConfig};
use crate::verifier::{Critique, OracleVerifier};

/// Prompt `i` of a seeded stream: category from the mix, then the prompt.
#[derive(Debug, Clone)]
pub struct PromptSource {
    pub seed: u64,
    pub world: WorldConfig,
    weights: WeightedIndex<f64>,
}

impl PromptSource {
    pub fn new(seed: u64, world: WorldConfig, mix: &[f64; 6]) -> Result<Self, PipelineError> {
        let weights = WeightedIndex::new(mix.iter().copied()).map_err(|e| PipelineError::Config(format!("category mix: {e}")))?;
        Ok(Self { seed, world, weights })
    }

    pub fn prompt(&self, index: u64) -> Result<PromptSpec, PipelineError> {
        let category = Category::ALL[self.weights.sample(&mut stream(self.seed, Domain::Category, index))];
        Ok(gen_prompt(&self.world, &mut stream(self.seed, Domain::Prompt, index), category, index)?)
    }
}

/// Generation side of a stream.
#[derive(Debug, Clone)]
pub struct Explorer {
    pub source: PromptSource,
    pub verifier: OracleVerifier,
    pub max_steps: usize,
    pub rule: PairRule,
}

impl Explorer {
    pub fn new(seed: u64, settings: &StreamSettings, mix: &[f64; 6]) -> Result<Self, PipelineError> {
        Ok(Self {
            source: PromptSource::new(seed, settings.world, mix)?,
            verifier: OracleVerifier::new(settings.tau),
            max_steps: settings.max_steps,
            rule: settings.rule,
        })
    }

    pub fn explore<G: SceneGenerator + ?Sized>(&self, index: u64, generator: &G) -> Result<(Trajectory, PairYield), PipelineError> {
        let prompt = self.source.prompt(index)?;
        let mut rng = stream(self.source.seed, Domain::Trajectory, index);
        let traj = run_trajectory(generator, &self.verifier, &prompt, self.max_steps, &mut rng)?;
        let pairs = extract_pairs_with(&traj, &self.rule);
        Ok((traj, pairs))
    }
}

pub fn prompt_record(traj: &Trajectory, pairs: &PairYield, admitted: usize, version: u64, max_lag: u64) -> PromptRecord {
    PromptRecord {
        prompt_id: traj.prompt.id,
        category: traj.prompt.category,
        steps: traj.steps.len(),
        outcome: PromptOutcome::of(traj),
        pairs: pairs.candidates(),
        kept: pairs.kept.len(),
        filtered: pairs.filtered,
        admitted,
        version,
        max_lag,
    }
}

/// Training side of a stream: sole owner of the replay buffer and optimizer.
#[derive(Debug, Clone)]
pub struct TrainerCore {
    pub seed: u64,
    pub training: TrainingConfig,
    pub burst_steps: usize,
    pub buffer: ReplayBuffer,
    pub optimizer: OptimizerState<f64>,
    /// Frozen copy for the referenced loss variant.
    pub reference: Arc<ParameterSet<f64>>,
    pub bursts: u64,
}

impl TrainerCore {
    pub fn new(seed: u64, settings: &StreamSettings, reference: Arc<ParameterSet<f64>>) -> Self {
        Self {
            seed,
            training: settings.training,
            burst_steps: settings.pipeline.burst_steps,
            buffer: ReplayBuffer::new(settings.replay_capacity),
            optimizer: OptimizerState::new(),
            reference,
            bursts: 0,
        }
    }

    pub fn admit(&mut self, traj: &Trajectory, pairs: &PairYield) -> usize {
        self.buffer.admit(traj, &pairs.kept)
    }

    /// Up to `burst_steps` updates on replay samples, stopping early if the
    /// buffer is empty. Each new version is handed to `publish`.
    pub fn burst(
        &mut self,
        model: &Model<f64>,
        start: VersionedParams<f64>,
        after_prompts: u64,
        steps: &mut Vec<StepRecord>,
        publish: &mut dyn FnMut(&VersionedParams<f64>) -> Result<(), PipelineError>,
    ) -> Result<(BurstRecord, VersionedParams<f64>), PipelineError> {
        let index = self.bursts;
        self.bursts += 1;
        let mut rng = stream(self.seed, Domain::Burst, index);
        let version_before = start.version;
        let mut current = start;
        let mut losses = Vec::new();
        for _ in 0..self.burst_steps {
            let batch = self.buffer.sample_batch(self.training.batch_size, &mut rng);
            if batch.is_empty() {
                break;
            }
            let clock = Instant::now();
            let out = loss_and_grad(model, &current.params, Some(&self.reference), &batch, &self.training, &mut rng)?;
            current = apply_update(&current, &out.grads, &self.training, &mut self.optimizer)?;
            publish(&current)?;
            losses.push(out.loss);
            steps.push(StepRecord {
                version: current.version,
                loss: out.loss,
                grad_norm: out.grad_norm,
                batch_size: batch.len(),
                loss_variant: self.training.loss,
                wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            });
        }
        let record = BurstRecord {
            burst: index,
            after_prompts,
            version_before,
            version_after: current.version,
            updates: losses.len(),
            mean_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            buffer_size: self.buffer.len(),
        };
        Ok((record, current))
    }
}

/// A single-threaded stream that interleaves generation and bursts. Its
/// cursor and burst counter persist, so a stream can be advanced in chunks
/// (federated rounds) with the same result as one long call.
#[derive(Debug, Clone)]
pub struct StreamEngine {
    pub explorer: Explorer,
    pub trainer: TrainerCore,
    pub train_frequency: usize,
    pub cursor: u64,
    pub snapshot: VersionedParams<f64>,
}

impl StreamEngine {
    pub fn new(seed: u64, settings: &StreamSettings, mix: &[f64; 6], initial: VersionedParams<f64>) -> Result<Self, PipelineError> {
        Ok(Self {
            explorer: Explorer::new(seed, settings, mix)?,
            trainer: TrainerCore::new(seed, settings, initial.params.clone()),
            train_frequency: settings.pipeline.train_frequency,
            cursor: 0,
            snapshot: initial,
        })
    }

    /// Streams the next `count` prompts; a burst follows every
    /// `train_frequency`-th prompt of the overall stream.
    pub fn advance(
        &mut self,
        model: &Model<f64>,
        count: u64,
        log: &mut MetricsLog,
        steps: &mut Vec<StepRecord>,
    ) -> Result<(), PipelineError> {
        for _ in 0..count {
            let index = self.cursor;
            let (traj, pairs) = self.explorer.explore(index, &Policy::new(model, &self.snapshot.params))?;
            let admitted = self.trainer.admit(&traj, &pairs);
            log.prompts.push(prompt_record(&traj, &pairs, admitted, self.snapshot.version, 0));
            self.cursor += 1;
            if self.cursor.is_multiple_of(self.train_frequency as u64) {
                let (record, next) = self.trainer.burst(model, self.snapshot.clone(), self.cursor, steps, &mut |_| Ok(()))?;
                log.bursts.push(record);
                self.snapshot = next;
            }
        }
        Ok(())
    }
}

/// Generator that re-acquires its snapshot before every generation and
/// tracks the staleness it observed.
pub struct StalenessBound<'a> {
    pub model: &'a Model<f64>,
    pub registry: &'a SnapshotRegistry<f64>,
    pub lag_bound: u64,
    held: RefCell<Option<Arc<VersionedParams<f64>>>>,
    max_lag: RefCell<u64>,
}

impl<'a> StalenessBound<'a> {
    pub fn new(model: &'a Model<f64>, registry: &'a SnapshotRegistry<f64>, lag_bound: u64) -> Self {
        Self { model, registry, lag_bound, held: RefCell::new(None), max_lag: RefCell::new(0) }
    }

    /// Version of the last snapshot used, and the largest lag since the last call.
    pub fn take_stats(&self) -> (u64, u64) {
        let v = self.held.borrow().as_ref().map_or(0, |s| s.version);
        (v, std::mem::take(&mut *self.max_lag.borrow_mut()))
    }
}

impl SceneGenerator for StalenessBound<'_> {
    fn generate(&self, prompt: &PromptSpec, critique: Option<&Critique>, rng: &mut dyn RngCore) -> Result<Scene, LearnerError> {
        let (snap, sample) = self.registry.acquire(self.held.borrow().as_ref(), self.lag_bound);
        {
            let mut m = self.max_lag.borrow_mut();
            *m = (*m).max(sample.lag());
        }
        *self.held.borrow_mut() = Some(snap.clone());
        Policy::new(self.model, &snap.params).generate(prompt, critique, rng)
    }
}

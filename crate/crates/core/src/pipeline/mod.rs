//! Streaming orchestration: prompts flow through verify-refine, mined pairs
//! flow into the replay buffer, and training bursts publish new snapshots.
//!
//! Synchronous mode runs everything on one thread and is bit-reproducible.
//! Asynchronous mode moves the replay buffer and optimizer to a training
//! thread fed by an ordered bounded queue; generation keeps going on its
//! current snapshot as long as it is at most `lag_bound` versions stale.

// Failures carry the partial log by value so callers can still flush it.
#![allow(clippy::result_large_err)]

pub mod engine;
pub mod eval;
pub mod metrics;
pub mod registry;

use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use engine::{Explorer, PromptSource, StalenessBound, StreamEngine, TrainerCore};
pub use eval::{heldout_prompts, measure_rates};
pub use metrics::{summary_csv, BurstRecord, CategoryRates, LogLine, MetricsLog, PromptOutcome, PromptRecord, Summary};
pub use registry::{LagSample, RegistryError, SnapshotRegistry};

use crate::learner::{LearnerError, Model, Policy, VersionedParams};
use crate::pairgen::{PairRule, PairYield, PairgenError, Trajectory};
use crate::synthworld::{WorldConfig, WorldError};
use crate::trainer::{StepRecord, TrainerError, TrainingConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Pairgen(#[from] PairgenError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("worker failed: {0}")]
    Worker(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sync,
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Prompts between training bursts.
    pub train_frequency: usize,
    pub burst_steps: usize,
    /// Largest allowed `latest − used` version gap at a generation.
    pub lag_bound: u64,
    pub mode: Mode,
    pub prompt_budget: u64,
    /// Sampling weights in [`crate::synthworld::Category::ALL`] order.
    pub category_mix: [f64; 6],
    pub heldout_per_category: usize,
    /// Bound of the generation → training queue.
    pub queue_capacity: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_frequency: 32,
            burst_steps: 8,
            lag_bound: 2,
            mode: Mode::Sync,
            prompt_budget: 500,
            category_mix: [1.0; 6],
            heldout_per_category: 300,
            queue_capacity: 64,
        }
    }
}

/// Everything a stream needs apart from the model and its initial weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSettings {
    pub seed: u64,
    pub world: WorldConfig,
    pub tau: f64,
    pub max_steps: usize,
    pub rule: PairRule,
    pub replay_capacity: usize,
    pub training: TrainingConfig,
    pub pipeline: PipelineConfig,
}

impl Default for StreamSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            tau: crate::verifier::DEFAULT_TAU,
            max_steps: crate::pairgen::DEFAULT_MAX_STEPS,
            rule: PairRule::default(),
            replay_capacity: crate::replay::DEFAULT_CAPACITY,
            training: TrainingConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl StreamSettings {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.world.validate()?;
        self.training.validate()?;
        let p = &self.pipeline;
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if p.train_frequency == 0 || p.burst_steps == 0 {
            return bad("train_frequency and burst_steps must be at least 1");
        }
        if p.queue_capacity == 0 {
            return bad("queue_capacity must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.max_steps == 0 || self.replay_capacity == 0 {
            return bad("max_steps and replay capacity must be at least 1");
        }
        PromptSource::new(self.seed, self.world, &p.category_mix)?;
        Ok(())
    }
}

/// Log, per-step training records and the final snapshot of a stream.
#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub log: MetricsLog,
    pub steps: Vec<StepRecord>,
    pub final_snapshot: VersionedParams<f64>,
    pub trace: Vec<LagSample>,
}

/// A failed run with whatever was logged before the failure.
#[derive(Debug)]
pub struct StreamFailure {
    pub error: PipelineError,
    pub log: MetricsLog,
    pub steps: Vec<StepRecord>,
}

impl From<PipelineError> for StreamFailure {
    fn from(error: PipelineError) -> Self {
        Self { error, log: MetricsLog::default(), steps: Vec::new() }
    }
}

/// Streams `settings.pipeline.prompt_budget` prompts once each.
pub fn run_stream(settings: &StreamSettings, model: &Model<f64>, initial: VersionedParams<f64>) -> Result<StreamOutcome, StreamFailure> {
    settings.validate()?;
    match settings.pipeline.mode {
        Mode::Sync => run_sync(settings, model, initial),
        Mode::Async => run_async(settings, model, initial),
    }
}

fn finish(mut log: MetricsLog, engine_buffer: crate::replay::ReplayStats, max_lag: u64, events: u64) -> MetricsLog {
    let mut summary = Summary::from_records(&log.prompts, &log.bursts, engine_buffer);
    summary.max_lag = max_lag;
    summary.generation_events = events;
    log.summary = Some(summary);
    log
}

fn run_sync(settings: &StreamSettings, model: &Model<f64>, initial: VersionedParams<f64>) -> Result<StreamOutcome, StreamFailure> {
    let mut engine = StreamEngine::new(settings.seed, settings, &settings.pipeline.category_mix, initial)?;
    let mut log = MetricsLog::default();
    let mut steps = Vec::new();
    if let Err(error) = engine.advance(model, settings.pipeline.prompt_budget, &mut log, &mut steps) {
        return Err(StreamFailure { error, log, steps });
    }
    let events = log.prompts.iter().map(|r| r.steps as u64).sum();
    let log = finish(log, engine.trainer.buffer.stats(), 0, events);
    Ok(StreamOutcome { log, steps, final_snapshot: engine.snapshot, trace: Vec::new() })
}

enum Message {
    Admit { index: usize, traj: Box<Trajectory>, pairs: PairYield },
    Burst { after_prompts: u64 },
}

struct TrainerReport {
    admitted: Vec<(usize, usize)>,
    bursts: Vec<BurstRecord>,
    steps: Vec<StepRecord>,
    final_snapshot: VersionedParams<f64>,
    buffer: crate::replay::ReplayStats,
    error: Option<PipelineError>,
}

fn trainer_loop(
    mut core: TrainerCore,
    model: &Model<f64>,
    registry: &SnapshotRegistry<f64>,
    initial: VersionedParams<f64>,
    inbox: mpsc::Receiver<Message>,
) -> TrainerReport {
    let mut report = TrainerReport {
        admitted: Vec::new(),
        bursts: Vec::new(),
        steps: Vec::new(),
        final_snapshot: initial,
        buffer: core.buffer.stats(),
        error: None,
    };
    for message in inbox {
        match message {
            Message::Admit { index, traj, pairs } => report.admitted.push((index, core.admit(&traj, &pairs))),
            Message::Burst { after_prompts } => {
                let start = report.final_snapshot.clone();
                let mut publish = |s: &VersionedParams<f64>| registry.publish(s.clone()).map_err(PipelineError::from);
                match core.burst(model, start, after_prompts, &mut report.steps, &mut publish) {
                    Ok((record, next)) => {
                        report.bursts.push(record);
                        report.final_snapshot = next;
                    }
                    Err(e) => {
                        report.error = Some(e);
                        break;
                    }
                }
            }
        }
    }
    registry.close();
    report.buffer = core.buffer.stats();
    report
}

fn run_async(settings: &StreamSettings, model: &Model<f64>, initial: VersionedParams<f64>) -> Result<StreamOutcome, StreamFailure> {
    let p = &settings.pipeline;
    let explorer = Explorer::new(settings.seed, settings, &p.category_mix)?;
    let core = TrainerCore::new(settings.seed, settings, initial.params.clone());
    let registry = SnapshotRegistry::new(initial.clone());
    let (tx, rx) = mpsc::sync_channel(p.queue_capacity);

    let mut prompts: Vec<PromptRecord> = Vec::new();
    let (gen_error, report) = thread::scope(|scope| {
        let trainer = scope.spawn(|| trainer_loop(core, model, &registry, initial, rx));
        let generator = StalenessBound::new(model, &registry, p.lag_bound);
        let mut gen_error = None;
        for index in 0..p.prompt_budget {
            let (traj, pairs) = match explorer.explore(index, &generator) {
                Ok(x) => x,
                Err(e) => {
                    gen_error = Some(e);
                    break;
                }
            };
            let (version, lag) = generator.take_stats();
            prompts.push(engine::prompt_record(&traj, &pairs, 0, version, lag));
            let slot = prompts.len() - 1;
            if tx.send(Message::Admit { index: slot, traj: Box::new(traj), pairs }).is_err() {
                break;
            }
            if (index + 1) % p.train_frequency as u64 == 0 && tx.send(Message::Burst { after_prompts: index + 1 }).is_err() {
                break;
            }
        }
        drop(tx);
        let report = trainer.join().map_err(|_| PipelineError::Worker("training thread panicked".into()));
        (gen_error, report)
    });
    let report = report?;
    for &(slot, admitted) in &report.admitted {
        prompts[slot].admitted = admitted;
    }
    let trace = registry.trace();
    let max_lag = trace.iter().map(LagSample::lag).max().unwrap_or(0);
    let log = MetricsLog { prompts, bursts: report.bursts, summary: None };
    if let Some(error) = report.error.or(gen_error) {
        return Err(StreamFailure { error, log, steps: report.steps });
    }
    let log = finish(log, report.buffer, max_lag, trace.len() as u64);
    Ok(StreamOutcome { log, steps: report.steps, final_snapshot: report.final_snapshot, trace })
}

/// Frozen baseline on a held-out set, the stream, then the same held-out
/// set (same prompts, same random streams) on the trained snapshot.
pub fn run_benchmark(settings: &StreamSettings, model: &Model<f64>, initial: VersionedParams<f64>) -> Result<StreamOutcome, StreamFailure> {
    settings.validate()?;
    let verifier = crate::verifier::OracleVerifier::new(settings.tau);
    let heldout = heldout_prompts(settings.seed, &settings.world, settings.pipeline.heldout_per_category).map_err(PipelineError::from)?;
    let baseline = measure_rates(&Policy::new(model, &initial.params), &verifier, &heldout, settings.seed).map_err(PipelineError::from)?;
    let mut outcome = run_stream(settings, model, initial)?;
    let trained = measure_rates(&Policy::new(model, &outcome.final_snapshot.params), &verifier, &heldout, settings.seed)
        .map_err(PipelineError::from)?;
    let summary = outcome.log.summary.as_mut().expect("finished run has a summary");
    summary.baseline = Some(baseline);
    summary.trained = Some(trained);
    Ok(outcome)
}

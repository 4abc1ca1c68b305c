//! Simulated federation: clients run local streams and upload adapter
//! deltas only; a coordinator averages them into the global adapters.
//!
//! Deltas travel as a compensated pair `(hi, lo)` with `hi + lo = local -
//! global` exactly, and the coordinator re-applies them with error-free
//! addition. A single client, or several identical ones, therefore
//! reproduces the local adapters bit for bit.

use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::{Model, ParamKey, ParameterSet, Part, Policy, VersionedParams};
use crate::pipeline::engine::StreamEngine;
use crate::pipeline::eval::{heldout_prompts, measure_rates};
use crate::pipeline::metrics::{CategoryRates, MetricsLog, PromptOutcome};
use crate::pipeline::{PipelineError, StreamSettings};
use crate::rng::{mix, Domain};
use crate::synthworld::Category;
use crate::tensor::Matrix;
use crate::verifier::OracleVerifier;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FederatedConfig {
    pub clients: usize,
    pub rounds: usize,
    pub prompts_per_round: u64,
    /// Every client replays the base seed and mix.
    pub identical_clients: bool,
    /// Share of each client's mix moved onto one favoured category.
    pub skew: f64,
    pub check_equivalence: bool,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self { clients: 4, rounds: 4, prompts_per_round: 64, identical_clients: false, skew: 0.0, check_equivalence: false }
    }
}

#[derive(Debug, Error)]
pub enum FederatedError {
    #[error("invalid federation configuration: {0}")]
    Config(String),
    #[error("adapter shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// One adapter factor's change.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaPart {
    pub key: ParamKey,
    pub hi: Matrix<f64>,
    pub lo: Matrix<f64>,
}

/// Post-round minus pre-round adapter factors. Carries no base weights,
/// pairs or scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterDelta {
    pub parts: Vec<DeltaPart>,
}

fn adapter_keys(params: &ParameterSet<f64>) -> Vec<ParamKey> {
    params.keys(true).into_iter().filter(|k| k.part != Part::Base).collect()
}

impl AdapterDelta {
    pub fn between(global: &ParameterSet<f64>, local: &ParameterSet<f64>) -> Result<Self, FederatedError> {
        let mut parts = Vec::new();
        for key in adapter_keys(global) {
            let g = global.get(key).expect("key from global");
            let l = local.get(key).ok_or_else(|| FederatedError::Shape(format!("local lacks {}", global.key_name(key))))?;
            if g.shape() != l.shape() {
                return Err(FederatedError::Shape(global.key_name(key)));
            }
            let (r, c) = g.shape();
            let (mut hi, mut lo) = (Matrix::zeros(r, c), Matrix::zeros(r, c));
            for i in 0..g.len() {
                let (h, e) = two_sum(l.as_slice()[i], -g.as_slice()[i]);
                hi.as_mut_slice()[i] = h;
                lo.as_mut_slice()[i] = e;
            }
            parts.push(DeltaPart { key, hi, lo });
        }
        Ok(Self { parts })
    }

    pub fn zero_like(global: &ParameterSet<f64>) -> Self {
        let parts = adapter_keys(global)
            .into_iter()
            .map(|key| {
                let (r, c) = global.get(key).expect("key from global").shape();
                DeltaPart { key, hi: Matrix::zeros(r, c), lo: Matrix::zeros(r, c) }
            })
            .collect();
        Self { parts }
    }

    /// Rounded value of the delta for one factor.
    pub fn value(&self, key: ParamKey) -> Option<Matrix<f64>> {
        let p = self.parts.iter().find(|p| p.key == key)?;
        p.hi.add(&p.lo)
    }

    pub fn norm(&self) -> f64 {
        self.parts.iter().map(|p| p.hi.add(&p.lo).expect("same shape").sum_sq()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.parts.iter().all(|p| p.hi.is_finite() && p.lo.is_finite())
    }

    fn conforms(&self, other: &AdapterDelta) -> bool {
        self.parts.len() == other.parts.len()
            && self
                .parts
                .iter()
                .zip(&other.parts)
                .all(|(a, b)| a.key == b.key && a.hi.shape() == b.hi.shape() && a.lo.shape() == b.lo.shape())
    }

    /// `global + delta` on the adapter factors; base weights untouched.
    pub fn apply_to(&self, global: &ParameterSet<f64>) -> Result<ParameterSet<f64>, FederatedError> {
        let mut out = global.clone();
        for p in &self.parts {
            let w = out.get_mut(p.key).ok_or_else(|| FederatedError::Shape(format!("global lacks {:?}", p.key)))?;
            if w.shape() != p.hi.shape() {
                return Err(FederatedError::Shape(global.key_name(p.key)));
            }
            for (i, x) in w.as_mut_slice().iter_mut().enumerate() {
                let (s, e) = two_sum(*x, p.hi.as_slice()[i]);
                *x = s + (e + p.lo.as_slice()[i]);
            }
        }
        Ok(out)
    }
}

/// Order-free mean: sorted values, then `min + sum(v - min) / M`. Equal
/// inputs come back unchanged and client order cannot matter.
fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let min = values[0];
    let spread: f64 = values.iter().map(|v| v - min).sum();
    min + spread / values.len() as f64
}

/// Elementwise mean of client deltas, `1/M` weighting.
pub fn aggregate(deltas: &[AdapterDelta]) -> Result<AdapterDelta, FederatedError> {
    let first = deltas.first().ok_or_else(|| FederatedError::Config("aggregate needs at least one delta".into()))?;
    if let Some(i) = deltas.iter().position(|d| !d.conforms(first)) {
        return Err(FederatedError::Shape(format!("delta {i} does not match delta 0")));
    }
    let mut out = first.clone();
    let mut column = vec![0.0; deltas.len()];
    for (pi, part) in out.parts.iter_mut().enumerate() {
        for i in 0..part.hi.len() {
            for (slot, d) in column.iter_mut().zip(deltas) {
                *slot = d.parts[pi].hi.as_slice()[i];
            }
            part.hi.as_mut_slice()[i] = order_free_mean(&mut column);
            for (slot, d) in column.iter_mut().zip(deltas) {
                *slot = d.parts[pi].lo.as_slice()[i];
            }
            part.lo.as_mut_slice()[i] = order_free_mean(&mut column);
        }
    }
    Ok(out)
}

/// Category weights of client `m`: the base mix with `skew` of its mass
/// moved onto the `m`-th category the base mix uses.
pub fn client_mix(base: &[f64; 6], skew: f64, m: usize) -> [f64; 6] {
    if skew == 0.0 {
        return *base;
    }
    let total: f64 = base.iter().sum();
    let used: Vec<usize> = (0..6).filter(|&c| base[c] > 0.0).collect();
    let favoured = used[m % used.len()];
    let mut out = [0.0; 6];
    for c in 0..6 {
        out[c] = (1.0 - skew) * base[c] / total + if c == favoured { skew } else { 0.0 };
    }
    out
}

/// One client: its own prompt stream, replay buffer and optimizer.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub seed: u64,
    pub mix: [f64; 6],
    pub engine: StreamEngine,
    /// Pairs kept locally so far.
    pub pairs_total: u64,
}

impl ClientState {
    pub fn new(
        id: usize,
        settings: &StreamSettings,
        fed: &FederatedConfig,
        initial: &VersionedParams<f64>,
    ) -> Result<Self, FederatedError> {
        let (seed, mix_m) = if fed.identical_clients || id == 0 {
            (
                settings.seed,
                if fed.identical_clients {
                    settings.pipeline.category_mix
                } else {
                    client_mix(&settings.pipeline.category_mix, fed.skew, id)
                },
            )
        } else {
            (mix(settings.seed, Domain::Client, id as u64), client_mix(&settings.pipeline.category_mix, fed.skew, id))
        };
        let engine = StreamEngine::new(seed, settings, &mix_m, initial.clone())?;
        Ok(Self { id, seed, mix: mix_m, engine, pairs_total: 0 })
    }
}

/// What a client reports to the coordinator.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub delta: AdapterDelta,
    pub prompts: usize,
    pub pairs: usize,
    pub admitted: usize,
    /// Share of this round's prompts satisfied within the step budget.
    pub local_rate: f64,
}

/// Local stream from the global snapshot, returning the adapter delta.
pub fn client_round(
    state: &mut ClientState,
    model: &Model<f64>,
    global: &ParameterSet<f64>,
    prompts: u64,
) -> Result<ClientUpdate, FederatedError> {
    let version = state.engine.snapshot.version;
    state.engine.snapshot = VersionedParams::new(version, global.clone());
    let mut log = MetricsLog::default();
    let mut steps = Vec::new();
    state.engine.advance(model, prompts, &mut log, &mut steps)?;
    let local = &state.engine.snapshot.params;
    if !local.base_bitwise_eq(global) {
        return Err(FederatedError::Config("local training changed base weights; lora_only is required".into()));
    }
    let delta = AdapterDelta::between(global, local)?;
    let kept: usize = log.prompts.iter().map(|r| r.kept).sum();
    state.pairs_total += kept as u64;
    let satisfied = log.prompts.iter().filter(|r| r.outcome != PromptOutcome::Exhausted).count();
    Ok(ClientUpdate {
        delta,
        prompts: log.prompts.len(),
        pairs: kept,
        admitted: log.prompts.iter().map(|r| r.admitted).sum(),
        local_rate: if log.prompts.is_empty() { 0.0 } else { satisfied as f64 / log.prompts.len() as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLedger {
    pub client: usize,
    pub prompts: usize,
    pub pairs: usize,
    pub admitted: usize,
    pub pairs_total: u64,
    pub local_rate: f64,
    pub delta_norm: f64,
    /// Set when the client failed and contributed a zero delta.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientLedger>,
    pub aggregate_norm: f64,
    pub global_rate: Option<f64>,
    pub global_rates: CategoryRates,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub baseline: CategoryRates,
    pub ledger: Vec<RoundRecord>,
    pub global: ParameterSet<f64>,
    /// Client deltas of the last round, in client order.
    pub last_deltas: Vec<AdapterDelta>,
}

impl FederationOutcome {
    pub fn ledger_jsonl(&self) -> String {
        self.ledger.iter().map(|r| serde_json::to_string(r).expect("ledger serializes") + "\n").collect()
    }
}

/// Rounds of distribute, local streams (one thread per client),
/// aggregate and broadcast. The global rate is measured after every round.
pub fn run_federation(
    settings: &StreamSettings,
    fed: &FederatedConfig,
    model: &Model<f64>,
    initial: VersionedParams<f64>,
) -> Result<FederationOutcome, FederatedError> {
    settings.validate()?;
    if fed.clients == 0 || fed.rounds == 0 {
        return Err(FederatedError::Config("clients and rounds must be at least 1".into()));
    }
    if !settings.training.lora_only {
        return Err(FederatedError::Config("federated clients train adapters only; set lora_only".into()));
    }
    if fed.identical_clients && fed.skew != 0.0 {
        return Err(FederatedError::Config("identical clients cannot be skewed".into()));
    }
    let verifier = OracleVerifier::new(settings.tau);
    let heldout = heldout_prompts(settings.seed, &settings.world, settings.pipeline.heldout_per_category).map_err(PipelineError::from)?;
    let rates = |params: &ParameterSet<f64>| measure_rates(&Policy::new(model, params), &verifier, &heldout, settings.seed);
    let baseline = rates(&initial.params).map_err(PipelineError::from)?;

    let mut clients = (0..fed.clients).map(|m| ClientState::new(m, settings, fed, &initial)).collect::<Result<Vec<_>, _>>()?;
    let mut global = (*initial.params).clone();
    let mut ledger = Vec::new();
    let mut last_deltas = Vec::new();
    for round in 0..fed.rounds {
        let shared = &global;
        let results: Vec<Result<ClientUpdate, FederatedError>> = thread::scope(|s| {
            let handles: Vec<_> =
                clients.iter_mut().map(|c| s.spawn(move || client_round(c, model, shared, fed.prompts_per_round))).collect();
            handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(FederatedError::Config("client thread panicked".into())))).collect()
        });
        let mut deltas = Vec::new();
        let mut entries = Vec::new();
        for (c, result) in clients.iter().zip(results) {
            let (delta, entry) = match result {
                Ok(u) if u.delta.is_finite() => {
                    let entry = ClientLedger {
                        client: c.id,
                        prompts: u.prompts,
                        pairs: u.pairs,
                        admitted: u.admitted,
                        pairs_total: c.pairs_total,
                        local_rate: u.local_rate,
                        delta_norm: u.delta.norm(),
                        error: None,
                    };
                    (u.delta, entry)
                }
                other => {
                    let error = match other {
                        Err(e) => e.to_string(),
                        Ok(_) => "non-finite delta".to_string(),
                    };
                    let entry = ClientLedger {
                        client: c.id,
                        prompts: 0,
                        pairs: 0,
                        admitted: 0,
                        pairs_total: c.pairs_total,
                        local_rate: 0.0,
                        delta_norm: 0.0,
                        error: Some(error),
                    };
                    (AdapterDelta::zero_like(&global), entry)
                }
            };
            deltas.push(delta);
            entries.push(entry);
        }
        let mean = aggregate(&deltas)?;
        global = mean.apply_to(&global)?;
        let global_rates = rates(&global).map_err(PipelineError::from)?;
        ledger.push(RoundRecord {
            round,
            clients: entries,
            aggregate_norm: mean.norm(),
            global_rate: global_rates.overall(),
            global_rates,
        });
        last_deltas = deltas;
    }
    Ok(FederationOutcome { baseline, ledger, global, last_deltas })
}

/// Verdicts of the run-pair comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// One client equals the centralized stream with the same seed.
    pub single_matches_central: bool,
    /// `identical_clients` copies equal the single client.
    pub identical_match_single: bool,
    pub identical_clients: usize,
    /// Aggregating the configured clients' deltas in reversed order changes nothing.
    pub permutation_invariant: bool,
}

impl EquivalenceReport {
    pub fn all_hold(&self) -> bool {
        self.single_matches_central && self.identical_match_single && self.permutation_invariant
    }
}

pub fn check_equivalence(
    settings: &StreamSettings,
    fed: &FederatedConfig,
    model: &Model<f64>,
    initial: VersionedParams<f64>,
) -> Result<EquivalenceReport, FederatedError> {
    let n = settings.pipeline.train_frequency as u64;
    if !fed.prompts_per_round.is_multiple_of(n) {
        return Err(FederatedError::Config("prompts_per_round must be a multiple of train_frequency".into()));
    }
    let mut central = StreamEngine::new(settings.seed, settings, &settings.pipeline.category_mix, initial.clone())?;
    central.advance(model, fed.prompts_per_round * fed.rounds as u64, &mut MetricsLog::default(), &mut Vec::new())?;

    let single_cfg = FederatedConfig { clients: 1, identical_clients: true, skew: 0.0, ..*fed };
    let single = run_federation(settings, &single_cfg, model, initial.clone())?;
    let copies = fed.clients.max(2);
    let identical = run_federation(settings, &FederatedConfig { clients: copies, ..single_cfg }, model, initial.clone())?;
    let spread = run_federation(settings, fed, model, initial)?;
    let forward = aggregate(&spread.last_deltas)?;
    let mut reversed = spread.last_deltas.clone();
    reversed.reverse();
    let backward = aggregate(&reversed)?;

    let same = |a: &ParameterSet<f64>, b: &ParameterSet<f64>| a.adapters_bitwise_eq(b) && a.base_bitwise_eq(b);
    Ok(EquivalenceReport {
        single_matches_central: same(&single.global, &central.snapshot.params),
        identical_match_single: same(&identical.global, &single.global),
        identical_clients: copies,
        permutation_invariant: forward == backward
            && forward.parts.iter().zip(&backward.parts).all(|(a, b)| a.hi.bitwise_eq(&b.hi) && a.lo.bitwise_eq(&b.lo)),
    })
}

/// Categories a client's mix favours, for logging.
pub fn favoured_category(mix_m: &[f64; 6]) -> Category {
    let best = (0..6).max_by(|&a, &b| mix_m[a].total_cmp(&mix_m[b])).unwrap_or(0);
    Category::ALL[best]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{CategoricalConfig, CategoricalLearner, GradientSet, Learner};
    use crate::rng::stream;
    use crate::trainer::{apply_update, OptimizerKind, OptimizerState, TrainingConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn params(seed: u64) -> ParameterSet<f64> {
        let learner = CategoricalLearner::new(CategoricalConfig::default());
        Learner::<f64>::init_params(&learner, &mut stream(seed, Domain::Init, 0))
    }

    fn perturbed(base: &ParameterSet<f64>, seed: u64, scale: f64) -> ParameterSet<f64> {
        let mut out = base.clone();
        let mut rng = stream(seed, Domain::Noise, 0);
        for key in adapter_keys(base) {
            for x in out.get_mut(key).unwrap().as_mut_slice() {
                *x += scale * rng.random_range(-1.0..1.0);
            }
        }
        out
    }

    #[test]
    fn delta_round_trips_exactly() {
        let g = params(1);
        let l = perturbed(&g, 2, 1e-3);
        let d = AdapterDelta::between(&g, &l).unwrap();
        let back = d.apply_to(&g).unwrap();
        assert!(back.adapters_bitwise_eq(&l));
        assert!(back.base_bitwise_eq(&g));
    }

    #[test]
    fn delta_holds_adapters_only() {
        let g = params(1);
        let d = AdapterDelta::between(&g, &perturbed(&g, 3, 0.1)).unwrap();
        assert!(!d.parts.is_empty());
        assert!(d.parts.iter().all(|p| p.key.part != Part::Base));
    }

    #[test]
    fn sgd_step_delta_is_minus_lr_gradient() {
        let g = params(4);
        let mut grads = GradientSet::zeros_like(&g, true);
        let mut rng = stream(5, Domain::Noise, 0);
        for m in grads.grads.values_mut() {
            for x in m.as_mut_slice() {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        let config = TrainingConfig { optimizer: OptimizerKind::Sgd, learning_rate: 0.01, ..TrainingConfig::default() };
        let next = apply_update(&VersionedParams::new(0, g.clone()), &grads, &config, &mut OptimizerState::new()).unwrap();
        let d = AdapterDelta::between(&g, &next.params).unwrap();
        for (key, grad) in &grads.grads {
            let v = d.value(*key).unwrap();
            for (a, b) in v.as_slice().iter().zip(grad.as_slice()) {
                assert!((a + 0.01 * b).abs() < 1e-15, "{a} vs {}", -0.01 * b);
            }
        }
    }

    #[test]
    fn zero_delta_for_unchanged_params() {
        let g = params(6);
        let d = AdapterDelta::between(&g, &g).unwrap();
        assert_eq!(d.norm(), 0.0);
        assert_eq!(d, AdapterDelta::zero_like(&g));
    }

    #[test]
    fn aggregate_identity_and_cancellation() {
        let g = params(7);
        let d = AdapterDelta::between(&g, &perturbed(&g, 8, 0.1)).unwrap();
        assert_eq!(aggregate(std::slice::from_ref(&d)).unwrap(), d);
        assert_eq!(aggregate(&[d.clone(), d.clone(), d.clone(), d.clone()]).unwrap(), d);
        let mut neg = d.clone();
        for p in &mut neg.parts {
            p.hi = p.hi.map(|x| -x);
            p.lo = p.lo.map(|x| -x);
        }
        let zero = aggregate(&[d, neg]).unwrap();
        assert_eq!(zero.norm(), 0.0);
    }

    #[test]
    fn aggregate_rejects_shape_mismatch_and_empty() {
        let g = params(9);
        let d = AdapterDelta::zero_like(&g);
        let mut short = d.clone();
        short.parts.pop();
        assert!(matches!(aggregate(&[d, short]), Err(FederatedError::Shape(_))));
        assert!(matches!(aggregate(&[]), Err(FederatedError::Config(_))));
    }

    #[test]
    fn averaging_factors_is_not_averaging_products() {
        // Mean of A and B separately, then A·B, differs from the mean of A·B.
        let g = params(10);
        let (l1, l2) = (perturbed(&g, 11, 0.5), perturbed(&g, 12, 0.5));
        let mean = aggregate(&[AdapterDelta::between(&g, &l1).unwrap(), AdapterDelta::between(&g, &l2).unwrap()]).unwrap();
        let merged = mean.apply_to(&g).unwrap();
        let t = adapter_keys(&g)[0].tensor;
        let product = |p: &ParameterSet<f64>| p.tensor(t).adapter.as_ref().unwrap().delta();
        let mean_of_products = product(&l1).add(&product(&l2)).unwrap().scale(0.5);
        let gap = product(&merged).sub(&mean_of_products).unwrap().sum_sq().sqrt();
        assert!(gap > 1e-3, "gap {gap}");
    }

    #[test]
    fn skewed_mix_favours_distinct_categories() {
        let base = [1.0; 6];
        assert_eq!(client_mix(&base, 0.0, 3), base);
        let m1 = client_mix(&base, 0.6, 1);
        assert!((m1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(favoured_category(&m1), Category::ALL[1]);
        let partial = [1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(favoured_category(&client_mix(&partial, 0.5, 1)), Category::ALL[2]);
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(seeds in prop::collection::vec(0u64..1000, 1..6), rot in 0usize..6) {
            let g = params(0);
            let deltas: Vec<_> = seeds.iter().map(|&s| AdapterDelta::between(&g, &perturbed(&g, s, 0.3)).unwrap()).collect();
            let mut rotated = deltas.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            rotated.reverse();
            let (a, b) = (aggregate(&deltas).unwrap(), aggregate(&rotated).unwrap());
            for (x, y) in a.parts.iter().zip(&b.parts) {
                prop_assert!(x.hi.bitwise_eq(&y.hi) && x.lo.bitwise_eq(&y.lo));
            }
        }

        #[test]
        fn aggregate_lies_within_client_range(seeds in prop::collection::vec(0u64..1000, 1..6)) {
            let g = params(0);
            let deltas: Vec<_> = seeds.iter().map(|&s| AdapterDelta::between(&g, &perturbed(&g, s, 0.3)).unwrap()).collect();
            let a = aggregate(&deltas).unwrap();
            for (pi, part) in a.parts.iter().enumerate() {
                for i in 0..part.hi.len() {
                    let vals: Vec<f64> = deltas.iter().map(|d| d.parts[pi].hi.as_slice()[i]).collect();
                    let (lo, hi) = vals.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
                    prop_assert!(part.hi.as_slice()[i] >= lo && part.hi.as_slice()[i] <= hi);
                }
            }
        }
    }
}

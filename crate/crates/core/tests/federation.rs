use vrloop_core::federated::{check_equivalence, run_federation, FederatedConfig, FederatedError};
use vrloop_core::learner::{CategoricalConfig, CategoricalLearner, Learner, Model, VersionedParams};
use vrloop_core::pipeline::StreamSettings;
use vrloop_core::rng::{stream, Domain};

fn setup(seed: u64) -> (StreamSettings, Model<f64>, VersionedParams<f64>) {
    let mut s = StreamSettings { seed, ..StreamSettings::default() };
    s.pipeline.heldout_per_category = 10;
    let learner = CategoricalLearner::new(CategoricalConfig::default());
    let params = Learner::<f64>::init_params(&learner, &mut stream(seed, Domain::Init, 0));
    (s, Model::Categorical(learner), VersionedParams::new(0, params))
}

fn small(clients: usize) -> FederatedConfig {
    FederatedConfig { clients, rounds: 3, prompts_per_round: 64, ..FederatedConfig::default() }
}

#[test]
fn equivalence_harness_holds() {
    let (s, model, init) = setup(1);
    let report = check_equivalence(&s, &small(4), &model, init).unwrap();
    assert!(report.single_matches_central, "{report:?}");
    assert!(report.identical_match_single, "{report:?}");
    assert!(report.permutation_invariant, "{report:?}");
    assert_eq!(report.identical_clients, 4);
}

#[test]
fn ledger_has_one_entry_per_round_and_base_is_shared() {
    let (s, model, init) = setup(2);
    let out = run_federation(&s, &small(1), &model, init.clone()).unwrap();
    assert_eq!(out.ledger.len(), 3);
    assert!(out.global.base_bitwise_eq(&init.params));
    assert_eq!(out.ledger_jsonl().lines().count(), 3);
    for (i, r) in out.ledger.iter().enumerate() {
        assert_eq!(r.round, i);
        assert_eq!(r.clients.len(), 1);
        assert!(r.global_rate.is_some());
    }
}

#[test]
fn skewed_clients_train_on_different_streams() {
    let (s, model, init) = setup(3);
    let fed = FederatedConfig { skew: 0.8, ..small(3) };
    let out = run_federation(&s, &fed, &model, init.clone()).unwrap();
    let last = out.ledger.last().unwrap();
    assert_eq!(last.clients.len(), 3);
    assert!(last.clients.iter().all(|c| c.error.is_none() && c.prompts == 64));
    let rates: Vec<f64> = last.clients.iter().map(|c| c.local_rate).collect();
    assert!(rates.windows(2).any(|w| w[0] != w[1]), "{rates:?}");
    assert!(out.global.base_bitwise_eq(&init.params));
    assert!(!out.global.adapters_bitwise_eq(&init.params));
}

#[test]
fn rejects_degenerate_federations() {
    let (mut s, model, init) = setup(4);
    assert!(matches!(run_federation(&s, &small(0), &model, init.clone()), Err(FederatedError::Config(_))));
    s.training.lora_only = false;
    assert!(matches!(run_federation(&s, &small(1), &model, init), Err(FederatedError::Config(_))));
}

//! Central-difference gradient checking on randomly probed coordinates.
//!
//! Relative error is `|a − n| / max(|a|, |n|, REL_FLOOR)`; the floor keeps
//! coordinates whose true gradient is essentially zero from dividing
//! round-off by round-off.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{ddpo_loss_and_grad, dpo_loss_and_grad, sample_pair_draws, LossVariant, TrainerError, TrainingConfig};
use crate::learner::{CategoricalLearner, DiffusionLearner, GradientSet, Learner, ParamKey, ParameterSet};
use crate::pairgen::PreferencePair;
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::synthworld::{gen_prompt, perfect_scene, Category, WorldConfig};

pub const REL_FLOOR: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub parameter: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    pub worst: Option<Probe>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Probes `probes` coordinates drawn uniformly over every entry of `analytic`
/// and compares each against `(L(θ+h) − L(θ−h)) / 2h`.
pub fn grad_check<T: Scalar, F>(
    loss: F,
    params: &ParameterSet<T>,
    analytic: &GradientSet<T>,
    probes: usize,
    step: f64,
    rng: &mut dyn RngCore,
) -> Result<GradCheckReport, TrainerError>
where
    F: Fn(&ParameterSet<T>) -> Result<T, TrainerError>,
{
    let keys: Vec<(ParamKey, usize)> = analytic.grads.iter().map(|(k, g)| (*k, g.len())).collect();
    let total: usize = keys.iter().map(|(_, n)| n).sum();
    let mut report = GradCheckReport { probes: 0, max_rel_error: 0.0, worst: None };
    if total == 0 {
        return Ok(report);
    }
    let mut work = params.clone();
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let (key, _) = *keys
            .iter()
            .find(|(_, n)| {
                if flat < *n {
                    true
                } else {
                    flat -= n;
                    false
                }
            })
            .expect("index within total");
        let g = &analytic.grads[&key];
        let (row, col) = (flat / g.cols(), flat % g.cols());
        let original = work.get(key).ok_or_else(|| TrainerError::Shape(format!("no parameter for {key:?}")))?.get(row, col);
        let h = T::of(step);
        work.get_mut(key).expect("checked").set(row, col, original + h);
        let up = loss(&work)?;
        work.get_mut(key).expect("checked").set(row, col, original - h);
        let down = loss(&work)?;
        work.get_mut(key).expect("checked").set(row, col, original);
        let numeric = (up - down).as_f64() / (2.0 * step);
        let a = g.get(row, col).as_f64();
        let rel_error = relative_error(a, numeric);
        report.probes += 1;
        if !rel_error.is_finite() {
            return Err(TrainerError::Numerical(format!("gradient check at {}", params.key_name(key))));
        }
        if report.worst.is_none() || rel_error > report.max_rel_error {
            report.max_rel_error = rel_error;
            report.worst = Some(Probe { parameter: params.key_name(key), row, col, analytic: a, numeric, rel_error });
        }
    }
    Ok(report)
}

/// Fills every adapter factor with `N(0, scale²)` noise so gradient checks
/// also exercise the `A` path (which is identically zero while `B = 0`).
pub fn randomize_adapters<T: Scalar>(params: &mut ParameterSet<T>, scale: f64, rng: &mut dyn RngCore) {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, scale).expect("finite scale");
    for t in params.tensors.iter_mut() {
        if let Some(ad) = t.adapter.as_mut() {
            for v in ad.a.as_mut_slice().iter_mut().chain(ad.b.as_mut_slice()) {
                *v = T::of(normal.sample(rng));
            }
        }
    }
}

/// One labelled check of a loss variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub label: String,
    pub report: GradCheckReport,
}

/// A small preference batch, one pair per category: the ideal scene against
/// the same scene with its first object swapped.
pub fn probe_batch(world: &WorldConfig, seed: u64) -> Vec<PreferencePair> {
    Category::ALL
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| {
            let p = gen_prompt(world, &mut stream(seed, Domain::Prompt, i as u64), c, i as u64).ok()?;
            let chosen = perfect_scene(&p, world);
            let mut rejected = chosen.clone();
            if let Some(e) = rejected.entities.first_mut() {
                e.object_id = (e.object_id + 1) % world.objects;
            }
            Some(PreferencePair { prompt: p, rejected, chosen, margin: 1.0, step: 0 })
        })
        .collect()
}

/// Checks every loss variant on freshly initialised learners with random
/// adapters. `flip_sign` negates the analytic gradient as a negative control.
pub fn standard_suite(
    categorical: &CategoricalLearner,
    diffusion: &DiffusionLearner<f64>,
    training: &TrainingConfig,
    seed: u64,
    probes: usize,
    step: f64,
    flip_sign: bool,
) -> Result<Vec<SuiteEntry>, TrainerError> {
    let mut out = Vec::new();
    let mut finish = |label: String,
                      mut grads: GradientSet<f64>,
                      f: &dyn Fn(&ParameterSet<f64>) -> Result<f64, TrainerError>,
                      params: &ParameterSet<f64>,
                      index: u64| {
        if flip_sign {
            grads.scale(-1.0);
        }
        let report = grad_check(f, params, &grads, probes, step, &mut stream(seed, Domain::Evaluation, index))?;
        out.push(SuiteEntry { label, report });
        Ok::<(), TrainerError>(())
    };

    let batch = probe_batch(&categorical.config.world, seed);
    let cases = [(LossVariant::DpoAsWritten, true), (LossVariant::DpoAsWritten, false), (LossVariant::DpoReferenced, true)];
    for (i, (loss, lora_only)) in cases.into_iter().enumerate() {
        let mut params: ParameterSet<f64> = categorical.init_params(&mut stream(seed, Domain::Init, 0));
        let reference = params.clone();
        randomize_adapters(&mut params, 0.1, &mut stream(seed, Domain::Init, 1));
        let cfg = TrainingConfig { loss, lora_only, clip_norm: None, ..*training };
        let grads = dpo_loss_and_grad(categorical, &params, Some(&reference), &batch, &cfg)?.grads;
        let f = |q: &ParameterSet<f64>| dpo_loss_and_grad(categorical, q, Some(&reference), &batch, &cfg).map(|o| o.loss);
        let label = format!("{} ({})", loss.name(), if lora_only { "adapters" } else { "all weights" });
        finish(label, grads, &f, &params, i as u64)?;
    }

    let batch = probe_batch(&diffusion.config.world, seed);
    let mut params: ParameterSet<f64> = diffusion.init_params(&mut stream(seed, Domain::Init, 2));
    randomize_adapters(&mut params, 0.1, &mut stream(seed, Domain::Init, 3));
    let draws = sample_pair_draws(diffusion, batch.len(), training.noise_draws.max(1), &mut stream(seed, Domain::Noise, 0));
    for (i, loss) in [LossVariant::DdpoRaw, LossVariant::DdpoSigmoid].into_iter().enumerate() {
        // Clipping is not differentiable; disable it in effect.
        let cfg = TrainingConfig { loss, clip_norm: Some(f64::MAX), lora_only: true, ..*training };
        let grads = ddpo_loss_and_grad(diffusion, &params, &batch, &draws, &cfg)?.grads;
        let f = |q: &ParameterSet<f64>| ddpo_loss_and_grad(diffusion, q, &batch, &draws, &cfg).map(|o| o.loss);
        finish(format!("{} (adapters)", loss.name()), grads, &f, &params, 10 + i as u64)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use crate::tensor::Matrix;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut p = ParameterSet::new();
        p.push("w", Matrix::from_fn(3, 4, |r, c| (r as f64 - 1.5) * (c as f64 + 0.25)), false);
        let loss = |q: &ParameterSet<f64>| Ok(q.tensors[0].value.sum_sq() / 2.0);
        let mut g = GradientSet::new();
        g.grads.insert(ParamKey::base(0), p.tensors[0].value.clone());
        let r = grad_check(loss, &p, &g, 50, DEFAULT_STEP, &mut stream(0, Domain::Evaluation, 0)).unwrap();
        assert_eq!(r.probes, 50);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        g.scale(-1.0);
        let r = grad_check(loss, &p, &g, 10, DEFAULT_STEP, &mut stream(0, Domain::Evaluation, 0)).unwrap();
        assert!(r.max_rel_error > 1.0);
    }

    #[test]
    fn floor_applies_near_zero() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-5).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dpo_and_ddpo_gradients_match() {
        use crate::learner::{CategoricalConfig, CategoricalLearner, DiffusionConfig, DiffusionLearner, Learner};
        use crate::pairgen::PreferencePair;
        use crate::synthworld::{gen_prompt, perfect_scene, Category, Scene};
        use crate::trainer::{ddpo_loss_and_grad, dpo_loss_and_grad, sample_pair_draws, LossVariant, TrainingConfig};

        let cat = CategoricalLearner::new(CategoricalConfig::default());
        let w = cat.config.world;
        let batch: Vec<PreferencePair> = (0..3)
            .map(|i| {
                let p = gen_prompt(&w, &mut stream(9, Domain::Prompt, i), Category::ALL[i as usize], i).unwrap();
                PreferencePair { chosen: perfect_scene(&p, &w), prompt: p, rejected: Scene::new(vec![]), margin: 1.0, step: 0 }
            })
            .collect();
        for (lora_only, loss) in [(true, LossVariant::DpoAsWritten), (false, LossVariant::DpoAsWritten), (true, LossVariant::DpoReferenced)]
        {
            let mut params: ParameterSet<f64> = cat.init_params(&mut stream(9, Domain::Init, 0));
            let reference = params.clone();
            randomize_adapters(&mut params, 0.1, &mut stream(9, Domain::Init, 1));
            let cfg = TrainingConfig { lora_only, loss, clip_norm: None, ..Default::default() };
            let out = dpo_loss_and_grad(&cat, &params, Some(&reference), &batch, &cfg).unwrap();
            let f = |q: &ParameterSet<f64>| dpo_loss_and_grad(&cat, q, Some(&reference), &batch, &cfg).map(|o| o.loss);
            let r = grad_check(f, &params, &out.grads, 40, DEFAULT_STEP, &mut stream(9, Domain::Evaluation, 0)).unwrap();
            assert!(r.max_rel_error < 1e-4, "{loss:?} lora_only={lora_only}: {r:?}");
        }

        let dif = DiffusionLearner::<f64>::new(DiffusionConfig { hidden: 12, ..Default::default() }).unwrap();
        let mut params = dif.init_params(&mut stream(9, Domain::Init, 2));
        randomize_adapters(&mut params, 0.1, &mut stream(9, Domain::Init, 3));
        let draws = sample_pair_draws(&dif, batch.len(), 2, &mut stream(9, Domain::Noise, 0));
        for loss in [LossVariant::DdpoRaw, LossVariant::DdpoSigmoid] {
            let cfg = TrainingConfig { loss, clip_norm: Some(1e12), ..Default::default() };
            let out = ddpo_loss_and_grad(&dif, &params, &batch, &draws, &cfg).unwrap();
            let f = |q: &ParameterSet<f64>| ddpo_loss_and_grad(&dif, q, &batch, &draws, &cfg).map(|o| o.loss);
            let r = grad_check(f, &params, &out.grads, 40, DEFAULT_STEP, &mut stream(9, Domain::Evaluation, 1)).unwrap();
            assert!(r.max_rel_error < 1e-4, "{loss:?}: {r:?}");
        }
    }

    #[test]
    fn standard_suite_passes_and_flip_is_caught() {
        use crate::learner::{CategoricalConfig, DiffusionConfig};
        let cat = CategoricalLearner::new(CategoricalConfig::default());
        let dif = DiffusionLearner::<f64>::new(DiffusionConfig { hidden: 12, ..Default::default() }).unwrap();
        let cfg = TrainingConfig::default();
        let good = standard_suite(&cat, &dif, &cfg, 3, 30, DEFAULT_STEP, false).unwrap();
        assert_eq!(good.len(), 5);
        assert!(good.iter().any(|e| e.label.starts_with("dpo_as_written")));
        assert!(good.iter().any(|e| e.label.starts_with("ddpo_sigmoid")));
        for e in &good {
            assert_eq!(e.report.probes, 30);
            assert!(e.report.max_rel_error < 1e-4, "{e:?}");
        }
        let bad = standard_suite(&cat, &dif, &cfg, 3, 30, DEFAULT_STEP, true).unwrap();
        assert!(bad.iter().filter(|e| e.report.max_rel_error > 1.0).count() >= 3, "{bad:?}");
    }
}

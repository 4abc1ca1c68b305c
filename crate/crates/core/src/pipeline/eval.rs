//! Single-shot satisfaction rates on a held-out prompt set.

use crate::learner::{LearnerError, SceneGenerator};
use crate::rng::{stream, Domain};
use crate::synthworld::{gen_prompt, Category, PromptSpec, WorldConfig, WorldError};
use crate::verifier::OracleVerifier;

use super::metrics::CategoryRates;

/// Held-out ids live far above any stream index.
pub const HELDOUT_ID_BASE: u64 = 1 << 40;

/// `per_category` prompts for every category the world supports.
pub fn heldout_prompts(seed: u64, world: &WorldConfig, per_category: usize) -> Result<Vec<PromptSpec>, WorldError> {
    let mut out = Vec::new();
    for c in Category::ALL {
        for j in 0..per_category as u64 {
            let id = HELDOUT_ID_BASE + (c.index() as u64) * (1 << 32) + j;
            match gen_prompt(world, &mut stream(seed, Domain::HeldOut, id), c, id) {
                Ok(p) => out.push(p),
                Err(WorldError::Unsupported { .. }) => break,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// One generation per prompt, no refinement, scored by the oracle. Each
/// prompt draws from its own stream keyed by its id, so rates do not depend
/// on prompt order and before/after comparisons share their randomness.
pub fn measure_rates<G: SceneGenerator + ?Sized>(
    generator: &G,
    verifier: &OracleVerifier,
    prompts: &[PromptSpec],
    seed: u64,
) -> Result<CategoryRates, LearnerError> {
    let mut rates = CategoryRates::default();
    for p in prompts {
        let scene = generator.generate(p, None, &mut stream(seed, Domain::Evaluation, p.id))?;
        let scores = verifier.evaluate(&verifier.formulate(p), &scene, 0);
        rates.record(p.category, verifier.passed(&scores));
    }
    Ok(rates)
}

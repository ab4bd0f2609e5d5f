//! In-context probes: inpainting completion of partially observed samples,
//! and diffusion completion from a base-model handoff state.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{eval_generations, ProbeCell, ProbeClass, ProbeReport};
use crate::diffusion::{
    sample_with_handoff, NoiseSchedule, SampleHooks, SamplerConfig, ScoreNet, StepCtx,
};
use crate::tensor::NumArray;
use crate::world::ConceptWorld;
use crate::{rng, Error, Result};

/// RePaint-style projection: at every noise level, overwrite the observed
/// coordinates (the complement of `mask`) with the forward-noised ground
/// truth. At alpha_bar = 1 the observed coordinates are the ground truth
/// itself.
pub fn inpaint_hook<'a>(
    ground_truth_latent: NumArray,
    mask: Vec<usize>,
    dim: usize,
) -> SampleHooks<'a> {
    let observed: Vec<usize> = (0..dim).filter(|d| !mask.contains(d)).collect();
    SampleHooks {
        eps: None,
        latent: Some(Box::new(
            move |x: &NumArray, ctx: &StepCtx, hook_rng: &mut ChaCha8Rng| {
                let noise = rng::randn_vec(hook_rng, dim);
                let mut out = x.clone();
                let ab = ctx.alpha_bar;
                for &d in &observed {
                    out.data[d] =
                        ab.sqrt() * ground_truth_latent.data[d] + (1.0 - ab).sqrt() * noise[d];
                }
                out
            },
        )),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InpaintConfig {
    /// Coordinates the model must complete; the rest are observed.
    pub mask: Vec<usize>,
    pub n_seeds: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self { mask: vec![1], n_seeds: 100, guidance_scale: 3.0, seed: 0 }
    }
}

/// Draw a ground-truth target sample per seed, keep its observed coordinates
/// pinned through the whole reverse pass, and grade the completion. Accuracy
/// uses the full completed point; the concept score is computed on the
/// completed (masked) coordinates alone via the marginal oracle.
pub fn probe_inpaint(
    net: &ScoreNet,
    schedule: &NoiseSchedule,
    world: &ConceptWorld,
    target: &str,
    method: &str,
    cfg: &InpaintConfig,
) -> Result<ProbeReport> {
    if cfg.mask.is_empty() {
        return Err(Error::invalid("inpaint mask must be nonempty"));
    }
    if cfg.mask.iter().any(|&d| d >= world.dim) {
        return Err(Error::invalid("inpaint mask coordinate out of range"));
    }
    let mut sorted = cfg.mask.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() >= world.dim {
        return Err(Error::invalid("inpaint mask must leave at least one observed coordinate"));
    }

    let truths = world.sample_data(
        Some(target),
        cfg.n_seeds,
        rng::derive_seed(cfg.seed, &format!("inpaint/data/{target}")),
    )?;
    let emb = world.embedding(target)?.clone();
    let proto = SamplerConfig::ddim(50, 0.0, cfg.guidance_scale, 0);
    let mask = sorted.clone();
    let dim = world.dim;
    let scale = net.data_scale;
    let truths_ref = &truths;
    let mask_ref = &mask;

    // map each per-sample seed to its ground-truth row
    let seeds: Vec<u64> = (0..cfg.n_seeds)
        .map(|i| rng::derive_seed(cfg.seed, &format!("inpaint/{method}/{target}/{i}")))
        .collect();
    let seed_index: std::collections::HashMap<u64, usize> =
        seeds.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let seed_index_ref = &seed_index;

    let results: Result<Vec<(bool, f64)>> = {
        use rayon::prelude::*;
        (0..cfg.n_seeds)
            .into_par_iter()
            .map(|i| {
                let seed = seeds[i];
                let idx = seed_index_ref[&seed];
                let truth = &truths_ref[idx];
                let mut hooks =
                    inpaint_hook(truth.scale(1.0 / scale), mask_ref.clone(), dim);
                let s = crate::diffusion::sample(
                    net,
                    schedule,
                    &emb,
                    &proto.with_seed(seed),
                    &mut hooks,
                )?;
                let v_full = world.oracle(&s.x0, target)?;
                let v_masked = world.oracle_marginal(&s.x0, mask_ref, target)?;
                Ok((v_full.top_concept == target, v_masked.concept_score))
            })
            .collect()
    };
    let results = results?;
    let acc = results.iter().filter(|(h, _)| *h).count() as f64 / cfg.n_seeds as f64;
    let score = results.iter().map(|(_, s)| s).sum::<f64>() / cfg.n_seeds as f64;

    let report = ProbeReport {
        probe: "inpaint".into(),
        probe_class: ProbeClass::Context,
        method: method.to_string(),
        target: target.to_string(),
        best_score: 0.0,
        best_accuracy: 0.0,
        best_config: serde_json::Value::Null,
        n_seeds: cfg.n_seeds,
        cells: vec![ProbeCell {
            config: serde_json::json!({"mask": mask}),
            accuracy: acc,
            mean_score: score,
            n: cfg.n_seeds,
        }],
        unrelated_accuracy: None,
        samples: None,
        failure: None,
    };
    Ok(report.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionConfig {
    pub handoffs: Vec<usize>,
    pub n_seeds: usize,
    pub guidance_scale: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self { handoffs: vec![5, 10], n_seeds: 100, guidance_scale: 3.0, steps: 50, seed: 0 }
    }
}

/// Run the base model for the first `handoff` sampling steps under the
/// target prompt, hand the state to the erased model with the same
/// conditioning, and grade what it finishes.
pub fn probe_completion(
    base: &ScoreNet,
    erased: &ScoreNet,
    schedule: &NoiseSchedule,
    world: &ConceptWorld,
    target: &str,
    method: &str,
    cfg: &CompletionConfig,
) -> Result<ProbeReport> {
    let emb = world.embedding(target)?.clone();
    let mut cells = Vec::new();
    for &handoff in &cfg.handoffs {
        if handoff >= cfg.steps {
            return Err(Error::invalid(format!(
                "handoff {handoff} must be below sampling steps {}",
                cfg.steps
            )));
        }
        use rayon::prelude::*;
        let results: Result<Vec<(bool, f64)>> = (0..cfg.n_seeds)
            .into_par_iter()
            .map(|i| {
                // seed shared across handoffs: more base steps can only add
                // commitment for the same starting noise
                let seed =
                    rng::derive_seed(cfg.seed, &format!("completion/{method}/{target}/{i}"));
                let proto = SamplerConfig::ddim(cfg.steps, 0.0, cfg.guidance_scale, seed);
                let s = sample_with_handoff(
                    base,
                    erased,
                    schedule,
                    &emb,
                    &proto,
                    handoff,
                    &mut SampleHooks::none(),
                )?;
                let v = world.oracle(&s.x0, target)?;
                Ok((v.top_concept == target, v.concept_score))
            })
            .collect();
        let results = results?;
        let acc = results.iter().filter(|(h, _)| *h).count() as f64 / cfg.n_seeds as f64;
        let score = results.iter().map(|(_, s)| s).sum::<f64>() / cfg.n_seeds as f64;
        cells.push(ProbeCell {
            config: serde_json::json!({"handoff": handoff}),
            accuracy: acc,
            mean_score: score,
            n: cfg.n_seeds,
        });
    }
    let report = ProbeReport {
        probe: "completion".into(),
        probe_class: ProbeClass::Context,
        method: method.to_string(),
        target: target.to_string(),
        best_score: 0.0,
        best_accuracy: 0.0,
        best_config: serde_json::Value::Null,
        n_seeds: cfg.n_seeds,
        cells,
        unrelated_accuracy: None,
        samples: None,
        failure: None,
    };
    Ok(report.finalize())
}

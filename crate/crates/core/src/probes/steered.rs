//! Steered latent probing: inject classifier gradients during sampling,
//! sweeping the guidance strength (optionally crossed with the noise grid)
//! and selecting the best sample per seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::noise::NoiseProbeGrid;
use super::{ProbeCell, ProbeClass, ProbeReport};
use crate::classifier::{classifier_gradient, steer, steer_epsilon, LatentClassifier};
use crate::diffusion::{sample, NoiseSchedule, SampleHooks, SamplerConfig, ScoreNet, StepCtx};
use crate::tensor::NumArray;
use crate::world::ConceptWorld;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerMode {
    /// Shift the guided noise prediction, rescaled by the noise level.
    Epsilon,
    /// Shift the latent itself by `s * sigma_t * g`.
    Latent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierGuidanceConfig {
    pub s_grid: Vec<f64>,
    pub mode: SteerMode,
    pub with_noise: bool,
    pub noise_grid: NoiseProbeGrid,
    pub n_seeds: usize,
    pub guidance_scale: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for ClassifierGuidanceConfig {
    fn default() -> Self {
        // 24 strengths, 0 included so the sweep subsumes plain sampling
        let s_grid: Vec<f64> = (0..24).map(|i| i as f64 * 0.2).collect();
        Self {
            s_grid,
            mode: SteerMode::Epsilon,
            with_noise: false,
            noise_grid: NoiseProbeGrid {
                etas: vec![1.17, 1.51, 1.85],
                variance_scales: vec![1.04],
                seeds_per_cell: 0,
            },
            n_seeds: 100,
            guidance_scale: 3.0,
            steps: 50,
            seed: 0,
        }
    }
}

pub(crate) fn steering_hooks<'a>(
    clf: &'a LatentClassifier,
    schedule: &'a NoiseSchedule,
    s_clf: f64,
    mode: SteerMode,
) -> SampleHooks<'a> {
    match mode {
        SteerMode::Epsilon => SampleHooks {
            eps: Some(Box::new(move |eps: &NumArray, x: &NumArray, ctx: &StepCtx| {
                if s_clf == 0.0 {
                    return eps.clone();
                }
                let t = ctx.t.expect("eps hook always runs at a timestep");
                let g = classifier_gradient(clf, schedule, x, t).expect("classifier gradient");
                steer_epsilon(eps, &g, s_clf, ctx.alpha_bar)
            })),
            latent: None,
        },
        SteerMode::Latent => SampleHooks {
            eps: None,
            latent: Some(Box::new(move |x: &NumArray, ctx: &StepCtx, _rng| {
                let t = match ctx.t {
                    Some(t) => t,
                    None => return x.clone(),
                };
                if s_clf == 0.0 || ctx.sigma == 0.0 {
                    return x.clone();
                }
                let g = classifier_gradient(clf, schedule, x, t).expect("classifier gradient");
                steer(x, &g, s_clf, ctx.sigma)
            })),
        },
    }
}

/// Sweep classifier-guidance strengths, optionally crossed with the noise
/// grid plus the plain sampler (so the combined search space always contains
/// the standard one), sharing each seed's noise stream across every cell and
/// selecting the best sample per seed.
pub fn probe_classifier_guidance(
    net: &ScoreNet,
    clf: &LatentClassifier,
    schedule: &NoiseSchedule,
    world: &ConceptWorld,
    target: &str,
    method: &str,
    cfg: &ClassifierGuidanceConfig,
) -> Result<ProbeReport> {
    if clf.schedule_hash != schedule.hash() {
        return Err(Error::invalid(
            "classifier was trained on a different schedule (hash mismatch)",
        ));
    }
    if (clf.data_scale - net.data_scale).abs() > 1e-12 {
        return Err(Error::invalid("classifier/model latent scales differ"));
    }
    if clf.target != target {
        return Err(Error::invalid(format!(
            "classifier targets `{}`, probe targets `{target}`",
            clf.target
        )));
    }
    let emb = world.embedding(target)?.clone();

    // sampler axis: the plain deterministic sampler first, then noise cells
    let mut samplers: Vec<(String, SamplerConfig)> = vec![(
        "ddim".to_string(),
        SamplerConfig::ddim(cfg.steps, 0.0, cfg.guidance_scale, 0),
    )];
    if cfg.with_noise {
        for (eta, vs) in cfg.noise_grid.cells() {
            samplers.push((
                format!("noise(eta={eta},vs={vs})"),
                SamplerConfig::noise_probe(cfg.steps, eta, vs, cfg.guidance_scale, 0),
            ));
        }
    }
    let cells: Vec<(usize, usize)> = (0..cfg.s_grid.len())
        .flat_map(|si| (0..samplers.len()).map(move |pi| (si, pi)))
        .collect();

    let per_seed: Result<Vec<Vec<(bool, f64)>>> = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|i| {
            // seed stream shared across the whole (s, sampler) grid
            let seed = rng::derive_seed(cfg.seed, &format!("clfguide/{target}/{i}"));
            cells
                .iter()
                .map(|&(si, pi)| {
                    let mut hooks = steering_hooks(clf, schedule, cfg.s_grid[si], cfg.mode);
                    let s = sample(
                        net,
                        schedule,
                        &emb,
                        &samplers[pi].1.with_seed(seed),
                        &mut hooks,
                    )?;
                    let v = world.oracle(&s.x0, target)?;
                    Ok((v.top_concept == target, v.concept_score))
                })
                .collect()
        })
        .collect();
    let per_seed = per_seed?;

    let mut cell_rows = Vec::with_capacity(cells.len());
    for (ci, &(si, pi)) in cells.iter().enumerate() {
        let hits = per_seed.iter().filter(|row| row[ci].0).count();
        let score: f64 =
            per_seed.iter().map(|row| row[ci].1).sum::<f64>() / per_seed.len().max(1) as f64;
        cell_rows.push(ProbeCell {
            config: serde_json::json!({"s_clf": cfg.s_grid[si], "sampler": samplers[pi].0}),
            accuracy: hits as f64 / per_seed.len().max(1) as f64,
            mean_score: score,
            n: per_seed.len(),
        });
    }

    let mut selected_hits = 0;
    let mut selected_score = 0.0;
    for row in &per_seed {
        let (hit, score) = row
            .iter()
            .cloned()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        if hit {
            selected_hits += 1;
        }
        selected_score += score;
    }
    let best_cell = cell_rows
        .iter()
        .max_by(|a, b| a.accuracy.partial_cmp(&b.accuracy).unwrap())
        .map(|c| c.config.clone())
        .unwrap_or(serde_json::Value::Null);

    Ok(ProbeReport {
        probe: if cfg.with_noise { "classifier_noise".into() } else { "classifier_guidance".into() },
        probe_class: ProbeClass::Steered,
        method: method.to_string(),
        target: target.to_string(),
        best_score: selected_score / cfg.n_seeds.max(1) as f64,
        best_accuracy: selected_hits as f64 / cfg.n_seeds.max(1) as f64,
        best_config: serde_json::json!({"selection": "best_of_grid_per_seed", "best_cell": best_cell}),
        n_seeds: cfg.n_seeds,
        cells: cell_rows,
        unrelated_accuracy: None,
        samples: None,
        failure: None,
    })
}

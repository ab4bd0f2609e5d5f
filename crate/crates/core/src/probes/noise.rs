//! Training-free trajectory probe: sample with extra stochasticity over an
//! (eta, variance scale) grid, keeping the same seed across the grid, and
//! select the best sample per seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ProbeCell, ProbeClass, ProbeReport};
use crate::diffusion::{sample, NoiseSchedule, SampleHooks, SamplerConfig, ScoreNet};
use crate::world::ConceptWorld;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseProbeGrid {
    pub etas: Vec<f64>,
    pub variance_scales: Vec<f64>,
    pub seeds_per_cell: usize,
}

impl Default for NoiseProbeGrid {
    fn default() -> Self {
        Self {
            etas: vec![1.0, 1.17, 1.34, 1.51, 1.68, 1.85],
            variance_scales: vec![1.0, 1.02, 1.03, 1.04],
            seeds_per_cell: 100,
        }
    }
}

impl NoiseProbeGrid {
    pub fn cells(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.etas.len() * self.variance_scales.len());
        for &e in &self.etas {
            for &v in &self.variance_scales {
                out.push((e, v));
            }
        }
        out
    }
}

/// Run every grid cell with the same per-seed noise stream and apply the
/// best-of selection rule: for each seed, keep the sample with the highest
/// concept score across the grid. `best_accuracy` is the fraction of seeds
/// whose selected sample lands on the target; the per-cell table is retained
/// alongside.
pub fn probe_noise(
    net: &ScoreNet,
    schedule: &NoiseSchedule,
    world: &ConceptWorld,
    target: &str,
    method: &str,
    grid: &NoiseProbeGrid,
    guidance_scale: f64,
    steps: usize,
    master_seed: u64,
) -> Result<ProbeReport> {
    if grid.etas.is_empty() || grid.variance_scales.is_empty() {
        return Err(Error::invalid("noise probe grid must be nonempty"));
    }
    let emb = world.embedding(target)?.clone();
    let cells = grid.cells();
    let protos: Vec<SamplerConfig> = cells
        .iter()
        .map(|&(eta, vs)| SamplerConfig::noise_probe(steps, eta, vs, guidance_scale, 0))
        .collect();
    let key = format!("noise/{method}/{target}");
    let per_seed: Result<Vec<Vec<(bool, f64)>>> = (0..grid.seeds_per_cell)
        .into_par_iter()
        .map(|i| {
            // one noise stream per seed, shared by every grid cell
            let seed = rng::derive_seed(master_seed, &format!("{key}/{i}"));
            protos
                .iter()
                .map(|proto| {
                    let s = sample(
                        net,
                        schedule,
                        &emb,
                        &proto.with_seed(seed),
                        &mut SampleHooks::none(),
                    )?;
                    let v = world.oracle(&s.x0, target)?;
                    Ok((v.top_concept == target, v.concept_score))
                })
                .collect()
        })
        .collect();
    let per_seed = per_seed?;

    let mut cell_rows = Vec::with_capacity(cells.len());
    for (ci, &(eta, vs)) in cells.iter().enumerate() {
        let hits = per_seed.iter().filter(|row| row[ci].0).count();
        let score: f64 =
            per_seed.iter().map(|row| row[ci].1).sum::<f64>() / per_seed.len() as f64;
        cell_rows.push(ProbeCell {
            config: serde_json::json!({"eta": eta, "variance_scale": vs}),
            accuracy: hits as f64 / per_seed.len() as f64,
            mean_score: score,
            n: per_seed.len(),
        });
    }

    // best-of selection per seed
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
    let n = per_seed.len();
    let best_cell = cell_rows
        .iter()
        .max_by(|a, b| a.accuracy.partial_cmp(&b.accuracy).unwrap())
        .map(|c| c.config.clone())
        .unwrap_or(serde_json::Value::Null);

    Ok(ProbeReport {
        probe: "noise".into(),
        probe_class: ProbeClass::Trajectory,
        method: method.to_string(),
        target: target.to_string(),
        best_score: selected_score / n as f64,
        best_accuracy: selected_hits as f64 / n as f64,
        best_config: serde_json::json!({"selection": "best_of_grid_per_seed", "best_cell": best_cell}),
        n_seeds: n,
        cells: cell_rows,
        unrelated_accuracy: None,
        samples: None,
        failure: None,
    })
}

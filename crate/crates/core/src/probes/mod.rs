//! Residual-knowledge probes. Each probe takes a model and a target concept
//! and quantifies how much of the "erased" concept it can still surface,
//! reporting maxima over its search space alongside the full per-cell table.

mod context;
mod inversion;
mod noise;
mod steered;

pub use context::{inpaint_hook, probe_completion, probe_inpaint, CompletionConfig, InpaintConfig};
pub use inversion::{
    invert_embedding, probe_discrete_attack, probe_embedding_inversion, DiscreteAttackConfig,
    InversionConfig,
};
pub use noise::{probe_noise, NoiseProbeGrid};
pub use steered::{probe_classifier_guidance, ClassifierGuidanceConfig, SteerMode};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, NoiseSchedule, SampleHooks, SamplerConfig, ScoreNet};
use crate::tensor::NumArray;
use crate::world::ConceptWorld;
use crate::{rng, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeClass {
    Optimization,
    Context,
    Trajectory,
    Steered,
}

/// One evaluated cell of a probe's search space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeCell {
    pub config: serde_json::Value,
    pub accuracy: f64,
    pub mean_score: f64,
    pub n: usize,
}

/// Outcome of one probe against one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub probe_class: ProbeClass,
    pub method: String,
    pub target: String,
    /// Maximum mean concept score over the search space.
    pub best_score: f64,
    /// Maximum recovery accuracy over the search space.
    pub best_accuracy: f64,
    pub best_config: serde_json::Value,
    pub n_seeds: usize,
    pub cells: Vec<ProbeCell>,
    pub unrelated_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ProbeReport {
    /// Fold cells into the best_* fields; `best_config` follows accuracy.
    pub fn finalize(mut self) -> Self {
        let mut best_acc = f64::NEG_INFINITY;
        let mut best_score = f64::NEG_INFINITY;
        let mut best_cfg = serde_json::Value::Null;
        for c in &self.cells {
            if c.accuracy > best_acc {
                best_acc = c.accuracy;
                best_cfg = c.config.clone();
            }
            best_score = best_score.max(c.mean_score);
        }
        self.best_accuracy = best_acc;
        self.best_score = best_score;
        self.best_config = best_cfg;
        self
    }
}

/// Generate `n` seeded samples and score them with the oracle. Returns
/// (accuracy, mean concept score, world-space outputs). `make_hooks` builds
/// fresh per-sample hooks (probes that project or steer need per-seed state).
pub fn eval_generations<'h, F>(
    net: &ScoreNet,
    schedule: &NoiseSchedule,
    world: &ConceptWorld,
    emb: &NumArray,
    target: &str,
    proto: &SamplerConfig,
    n: usize,
    master_seed: u64,
    key: &str,
    make_hooks: F,
) -> Result<(f64, f64, Vec<NumArray>)>
where
    F: Fn(u64) -> SampleHooks<'h> + Sync,
{
    let results: Result<Vec<(bool, f64, NumArray)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = rng::derive_seed(master_seed, &format!("{key}/{i}"));
            let cfg = proto.with_seed(seed);
            let mut hooks = make_hooks(seed);
            let s = sample(net, schedule, emb, &cfg, &mut hooks)?;
            let v = world.oracle(&s.x0, target)?;
            Ok((v.top_concept == target, v.concept_score, s.x0))
        })
        .collect();
    let results = results?;
    let hits = results.iter().filter(|(h, _, _)| *h).count();
    let score = results.iter().map(|(_, s, _)| s).sum::<f64>() / n.max(1) as f64;
    let samples = results.into_iter().map(|(_, _, x)| x).collect();
    Ok((hits as f64 / n.max(1) as f64, score, samples))
}

/// Mean conditional oracle accuracy over every concept other than `target`.
pub fn measure_unrelated(
    net: &ScoreNet,
    schedule: &NoiseSchedule,
    world: &ConceptWorld,
    target: &str,
    n_per_concept: usize,
    guidance_scale: f64,
    master_seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for c in &world.concepts {
        if c.name == target {
            continue;
        }
        let emb = world.embedding(&c.name)?;
        let proto = SamplerConfig::ddim(50, 0.0, guidance_scale, 0);
        let (acc, _, _) = eval_generations(
            net,
            schedule,
            world,
            emb,
            &c.name,
            &proto,
            n_per_concept,
            master_seed,
            &format!("unrelated/{target}/{}", c.name),
            |_| SampleHooks::none(),
        )?;
        total += acc;
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

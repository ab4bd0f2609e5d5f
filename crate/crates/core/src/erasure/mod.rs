//! Concept erasure methods: gradient ascent, ESD-x / ESD-u distillation,
//! closed-form conditioning edits (UCE, RECE), task-vector subtraction, and
//! a two-stage adversarial variant (STEREO). Every method produces an
//! [`ErasedModel`] with snapshots along an erasure-strength dial so traces
//! can watch the edit unfold.
//!
//! Strength semantics per method: fraction of training steps (ga, esd,
//! stereo), linear scaling of the task-vector coefficient (task_vector), or
//! linear interpolation of the conditioning projection (uce, rece).

mod train;
mod uce;

pub use train::{erase_esd, erase_ga, erase_stereo, erase_task_vector, sample_base_dataset};
pub use uce::{erase_rece, erase_uce, uce_edit_matrix, uce_objective_grad_norm};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{NoiseSchedule, ScoreNet};
use crate::tensor::{NumArray, ParamStore};
use crate::world::ConceptWorld;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Ga,
    EsdX,
    EsdU,
    Uce,
    TaskVector,
    Rece,
    Stereo,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Ga,
        MethodKind::EsdX,
        MethodKind::EsdU,
        MethodKind::Uce,
        MethodKind::TaskVector,
        MethodKind::Rece,
        MethodKind::Stereo,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            MethodKind::Ga => "ga",
            MethodKind::EsdX => "esd_x",
            MethodKind::EsdU => "esd_u",
            MethodKind::Uce => "uce",
            MethodKind::TaskVector => "task_vector",
            MethodKind::Rece => "rece",
            MethodKind::Stereo => "stereo",
        }
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .iter()
            .find(|m| m.label() == s)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown erasure method `{s}`")))
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// What the erased concept's conditioning should map to after a closed-form
/// edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Substitute {
    /// The neutral (all-zero) embedding's response.
    Null,
    /// Another concept's response, optionally scaled.
    Concept { name: String, scale: f64 },
    /// An explicit feature-space value.
    Vector(Vec<f64>),
}

impl Default for Substitute {
    fn default() -> Self {
        Substitute::Null
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErasureConfig {
    pub method: MethodKind,
    pub target: String,
    /// Fraction of the full recipe applied to the returned model.
    pub strength: f64,
    pub snapshot_strengths: Vec<f64>,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Target-concept samples generated from the base model for fine-tuning.
    pub n_train_data: usize,
    pub alpha_tv: f64,
    /// Shrink factor pulling task-vector fine-tuning data toward its
    /// centroid (canonical exemplars); 1 keeps the raw generations.
    pub tv_sharpen: f64,
    pub negative_guidance: f64,
    pub erase_scale: f64,
    pub uce_lambda: f64,
    pub substitute: Substitute,
    /// Concepts whose responses the closed-form edit preserves; empty means
    /// every concept other than the target.
    pub preserve_set: Vec<String>,
    pub rece_rounds: usize,
    pub rece_lambda: f64,
    pub stereo_rounds: usize,
    pub stereo_anchor_weight: f64,
    /// Distillation weight holding the student's unconditional prediction to
    /// the teacher's during ESD-style training (0 disables).
    pub uncond_anchor_weight: f64,
    /// Gradient-ascent runs stop early once |loss| crosses this.
    pub divergence_threshold: f64,
    pub seed: u64,
}

pub fn default_strength_grid() -> Vec<f64> {
    (0..=8).map(|i| i as f64 / 8.0).collect()
}

impl ErasureConfig {
    /// Calibrated defaults per method.
    pub fn defaults(method: MethodKind, target: &str) -> Self {
        let mut cfg = Self {
            method,
            target: target.to_string(),
            strength: 1.0,
            snapshot_strengths: default_strength_grid(),
            steps: 200,
            lr: 1e-3,
            batch_size: 32,
            n_train_data: 500,
            alpha_tv: 1.75,
            tv_sharpen: 0.2,
            negative_guidance: 1.0,
            erase_scale: 1.0,
            uce_lambda: 1e-6,
            substitute: Substitute::Null,
            preserve_set: Vec::new(),
            rece_rounds: 3,
            rece_lambda: 1e-2,
            stereo_rounds: 2,
            stereo_anchor_weight: 1.0,
            uncond_anchor_weight: 0.0,
            divergence_threshold: 1e3,
            seed: 0,
        };
        match method {
            MethodKind::Ga => {
                cfg.steps = 120;
                cfg.lr = 4e-4;
            }
            MethodKind::EsdX => {
                cfg.lr = 1e-2;
            }
            MethodKind::EsdU => {
                cfg.lr = 1e-3;
            }
            MethodKind::TaskVector => {
                cfg.lr = 1e-3;
            }
            MethodKind::Stereo => {
                cfg.steps = 150;
                cfg.lr = 1e-3;
            }
            _ => {}
        }
        cfg
    }

    pub fn validate(&self, world: &ConceptWorld) -> Result<()> {
        world.concept_index(&self.target)?;
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::invalid("strength must lie in [0, 1]"));
        }
        for s in &self.snapshot_strengths {
            if !(0.0..=1.0).contains(s) {
                return Err(Error::invalid("snapshot strengths must lie in [0, 1]"));
            }
        }
        if let Substitute::Concept { name, .. } = &self.substitute {
            world.concept_index(name)?;
        }
        for p in &self.preserve_set {
            world.concept_index(p)?;
        }
        Ok(())
    }

    /// Preserve-set embeddings (default: all concepts except the target).
    pub fn preserve_embeddings(&self, world: &ConceptWorld) -> Result<Vec<NumArray>> {
        if self.preserve_set.is_empty() {
            Ok(world
                .concepts
                .iter()
                .zip(&world.embeddings)
                .filter(|(c, _)| c.name != self.target)
                .map(|(_, e)| e.clone())
                .collect())
        } else {
            self.preserve_set.iter().map(|n| world.embedding(n).cloned()).collect()
        }
    }

    /// Feature-space value the erased conditioning should map to.
    pub fn substitute_value(&self, net: &ScoreNet, world: &ConceptWorld) -> Result<NumArray> {
        match &self.substitute {
            Substitute::Null => net.cond_features(&world.null_embedding()),
            Substitute::Concept { name, scale } => {
                Ok(net.cond_features(world.embedding(name)?)?.scale(*scale))
            }
            Substitute::Vector(v) => {
                if v.len() != net.cond_feat {
                    return Err(Error::invalid("substitute vector has wrong dimension"));
                }
                Ok(NumArray::vector(v.clone()))
            }
        }
    }
}

/// An edited model plus the strength dial's parameter snapshots.
#[derive(Debug, Clone)]
pub struct ErasedModel {
    pub net: ScoreNet,
    pub config: ErasureConfig,
    /// `(strength, parameters)` in increasing strength order; the last entry
    /// matches `net.params` when the recipe ran to completion.
    pub checkpoints: Vec<(f64, ParamStore)>,
    pub base_hash: String,
    /// Strength actually reached (< 1.0 when a run stopped early).
    pub reached_strength: f64,
    /// Adversarial embeddings recovered along the way (rece, stereo).
    pub adversarial_embeddings: Vec<NumArray>,
}

impl ErasedModel {
    /// Model at one of the recorded snapshot strengths.
    pub fn at_strength(&self, strength: f64) -> Option<ScoreNet> {
        self.checkpoints
            .iter()
            .find(|(s, _)| (*s - strength).abs() < 1e-12)
            .map(|(_, p)| self.net.with_params(p.clone()))
    }
}

/// Hash of a parameter store's exact contents, for provenance records.
pub fn params_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for name in store.names() {
        h.update(name.as_bytes());
        for v in &store.value(name).data {
            h.update(v.to_le_bytes());
        }
    }
    crate::tensor::hex_string(&h.finalize())
}

/// Dispatch an erasure run.
pub fn erase(
    base: &ScoreNet,
    world: &ConceptWorld,
    schedule: &NoiseSchedule,
    cfg: &ErasureConfig,
) -> Result<ErasedModel> {
    cfg.validate(world)?;
    match cfg.method {
        MethodKind::Ga => erase_ga(base, world, schedule, cfg),
        MethodKind::EsdX => erase_esd(base, world, schedule, cfg, EsdScope::CrossAttention),
        MethodKind::EsdU => erase_esd(base, world, schedule, cfg, EsdScope::Unet),
        MethodKind::Uce => erase_uce(base, world, schedule, cfg),
        MethodKind::Rece => erase_rece(base, world, schedule, cfg),
        MethodKind::TaskVector => erase_task_vector(base, world, schedule, cfg),
        MethodKind::Stereo => erase_stereo(base, world, schedule, cfg),
    }
}

/// Which parameters an ESD run may touch. The toy model's entire
/// text-conditioning pathway is the projection entry, so the
/// cross-attention analog trains exactly that and the U-Net analog trains
/// everything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsdScope {
    CrossAttention,
    Unet,
}

impl EsdScope {
    pub fn trains(&self, name: &str) -> bool {
        match self {
            EsdScope::CrossAttention => name == crate::diffusion::COND_PROJ,
            EsdScope::Unet => name != crate::diffusion::COND_PROJ,
        }
    }
}

/// Snapshot collector for step-fraction strength dials.
pub(crate) struct SnapshotCollector {
    thresholds: Vec<(f64, usize)>,
    pub out: Vec<(f64, ParamStore)>,
}

impl SnapshotCollector {
    pub fn new(strengths: &[f64], total_steps: usize) -> Self {
        let mut thresholds: Vec<(f64, usize)> = strengths
            .iter()
            .map(|&s| (s, (s * total_steps as f64).ceil() as usize))
            .collect();
        thresholds.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        Self { thresholds, out: Vec::new() }
    }

    /// Call after completing `steps_done` steps.
    pub fn collect(&mut self, steps_done: usize, params: &ParamStore) {
        while let Some(&(s, at)) = self.thresholds.first() {
            if steps_done >= at {
                self.out.push((s, params.clone()));
                self.thresholds.remove(0);
            } else {
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_labels_round_trip() {
        for m in MethodKind::ALL {
            let parsed: MethodKind = m.label().parse().unwrap();
            assert_eq!(parsed, m);
        }
        assert!("nope".parse::<MethodKind>().is_err());
    }

    #[test]
    fn snapshot_collector_orders_and_covers() {
        let mut ps = ParamStore::new();
        ps.insert("w", NumArray::vector(vec![0.0]));
        let mut col = SnapshotCollector::new(&[0.0, 0.5, 1.0], 10);
        col.collect(0, &ps);
        assert_eq!(col.out.len(), 1); // strength 0 captured before any step
        ps.value_mut("w").data[0] = 1.0;
        for step in 1..=10 {
            ps.value_mut("w").data[0] = step as f64;
            col.collect(step, &ps);
        }
        let strengths: Vec<f64> = col.out.iter().map(|(s, _)| *s).collect();
        assert_eq!(strengths, vec![0.0, 0.5, 1.0]);
        assert_eq!(col.out[1].1.value("w").data[0], 5.0);
        assert_eq!(col.out[2].1.value("w").data[0], 10.0);
    }
}

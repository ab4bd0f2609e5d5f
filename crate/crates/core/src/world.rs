//! Synthetic concept worlds: Gaussian-mixture data distributions with known
//! density, an exact Bayes oracle over the mixture components, and fixed
//! unit-norm embeddings that stand in for text conditioning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::NumArray;
use crate::{rng, Error, Result};

pub const PRESETS: &[&str] = &["ring8", "grid9", "pair2"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    pub mean: NumArray,
    pub std: f64,
    pub weight: f64,
}

/// A mixture-of-Gaussians world. Modes are the erasable "concepts"; each has
/// a fixed random unit-norm conditioning embedding. The all-zero embedding is
/// the neutral (null) conditioning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptWorld {
    pub preset: String,
    pub seed: u64,
    pub dim: usize,
    pub embed_dim: usize,
    pub concepts: Vec<Concept>,
    pub embeddings: Vec<NumArray>,
}

/// Exact mixture-posterior verdict for one point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub posterior: Vec<f64>,
    pub log_density: f64,
    pub top_concept: String,
    /// Posterior probability of the requested target concept; the
    /// CLIP-similarity analog of this artifact.
    pub concept_score: f64,
}

fn ring_means(n: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            vec![radius * angle.cos(), radius * angle.sin()]
        })
        .collect()
}

/// Build a world from a named preset. Means, stds and weights are fixed by
/// the preset; only the conditioning embeddings depend on the seed.
pub fn make_world(seed: u64, preset: &str) -> Result<ConceptWorld> {
    let (dim, embed_dim, spec): (usize, usize, Vec<(String, Vec<f64>, f64, f64)>) = match preset {
        "ring8" => {
            let means = ring_means(8, 4.0);
            (
                2,
                8,
                means
                    .into_iter()
                    .enumerate()
                    .map(|(k, m)| (format!("c{k}"), m, 0.25, 1.0 / 8.0))
                    .collect(),
            )
        }
        "grid9" => {
            let mut spec = Vec::new();
            for (k, (i, j)) in (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).enumerate() {
                let m = vec![(i as f64 - 1.0) * 4.0, (j as f64 - 1.0) * 4.0];
                spec.push((format!("g{k}"), m, 0.25, 1.0 / 9.0));
            }
            (2, 8, spec)
        }
        "pair2" => (
            2,
            8,
            vec![
                ("left".to_string(), vec![-3.0, 0.0], 0.25, 0.5),
                ("right".to_string(), vec![3.0, 0.0], 0.25, 0.5),
            ],
        ),
        other => {
            return Err(Error::UnknownPreset {
                preset: other.to_string(),
                known: PRESETS.join(", "),
            })
        }
    };

    let concepts: Vec<Concept> = spec
        .into_iter()
        .map(|(name, mean, std, weight)| Concept {
            name,
            mean: NumArray::vector(mean),
            std,
            weight,
        })
        .collect();

    let mut embeddings = Vec::with_capacity(concepts.len());
    for c in &concepts {
        let mut r = rng::stream(seed, &format!("embedding/{preset}/{}", c.name));
        let raw = rng::randn_vec(&mut r, embed_dim);
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        embeddings.push(NumArray::vector(raw.iter().map(|v| v / norm).collect()));
    }
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            assert!(
                embeddings[i].data != embeddings[j].data,
                "embeddings must be pairwise distinct"
            );
        }
    }

    let total: f64 = concepts.iter().map(|c| c.weight).sum();
    assert!((total - 1.0).abs() < 1e-12, "weights must sum to 1");

    Ok(ConceptWorld { preset: preset.to_string(), seed, dim, embed_dim, concepts, embeddings })
}

impl ConceptWorld {
    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn concept_index(&self, name: &str) -> Result<usize> {
        self.concepts
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }

    pub fn concept_names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn embedding(&self, name: &str) -> Result<&NumArray> {
        Ok(&self.embeddings[self.concept_index(name)?])
    }

    pub fn null_embedding(&self) -> NumArray {
        NumArray::zeros(vec![self.embed_dim])
    }

    /// Second moment E||x||^2 of the mixture; the latent standardization
    /// scale for score networks derives from this.
    pub fn second_moment(&self) -> f64 {
        self.concepts
            .iter()
            .map(|c| c.weight * (c.mean.dot(&c.mean) + self.dim as f64 * c.std * c.std))
            .sum()
    }

    /// Standardization factor shared by every model over this world: data
    /// divided by this has unit second moment per coordinate.
    pub fn latent_scale(&self) -> f64 {
        (self.second_moment() / self.dim as f64).sqrt()
    }

    /// Draw samples from one named mode, or from the full mixture when
    /// `concept` is `None`.
    pub fn sample_data(
        &self,
        concept: Option<&str>,
        n: usize,
        seed: u64,
    ) -> Result<Vec<NumArray>> {
        if n == 0 {
            return Err(Error::invalid("sample_data requires n >= 1"));
        }
        let fixed = match concept {
            Some(name) => Some(self.concept_index(name)?),
            None => None,
        };
        let key = match concept {
            Some(name) => format!("world/{}/sample/{name}", self.preset),
            None => format!("world/{}/sample/__all__", self.preset),
        };
        let mut r = rng::stream(seed, &key);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let k = match fixed {
                Some(k) => k,
                None => {
                    let u: f64 = r.gen();
                    let mut acc = 0.0;
                    let mut pick = self.concepts.len() - 1;
                    for (i, c) in self.concepts.iter().enumerate() {
                        acc += c.weight;
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick
                }
            };
            let c = &self.concepts[k];
            let eps = rng::randn_vec(&mut r, self.dim);
            let data: Vec<f64> = c
                .mean
                .data
                .iter()
                .zip(&eps)
                .map(|(m, e)| m + c.std * e)
                .collect();
            out.push(NumArray::vector(data));
        }
        Ok(out)
    }

    /// Exact Bayes posterior over concepts at `x`, plus mixture log-density.
    pub fn oracle(&self, x: &NumArray, target: &str) -> Result<OracleVerdict> {
        let t = self.concept_index(target)?;
        if !x.is_finite() {
            return Err(Error::NonFinite("oracle input".into()));
        }
        let logs = self.component_log_joint(&x.data, None);
        Ok(self.verdict_from_log_joint(&logs, t))
    }

    /// Posterior using only a subset of coordinates (the mixture marginal is
    /// again a Gaussian mixture). Used to score inpainted regions alone.
    pub fn oracle_marginal(
        &self,
        x: &NumArray,
        coords: &[usize],
        target: &str,
    ) -> Result<OracleVerdict> {
        let t = self.concept_index(target)?;
        if coords.is_empty() || coords.iter().any(|&c| c >= self.dim) {
            return Err(Error::invalid("oracle_marginal coords out of range"));
        }
        let logs = self.component_log_joint(&x.data, Some(coords));
        Ok(self.verdict_from_log_joint(&logs, t))
    }

    fn component_log_joint(&self, x: &[f64], coords: Option<&[usize]>) -> Vec<f64> {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        self.concepts
            .iter()
            .map(|c| {
                let dims: Vec<usize> = match coords {
                    Some(cs) => cs.to_vec(),
                    None => (0..self.dim).collect(),
                };
                let mut log_pdf = 0.0;
                for &d in &dims {
                    let z = (x[d] - c.mean.data[d]) / c.std;
                    log_pdf += -0.5 * z * z - c.std.ln() - half_log_2pi;
                }
                c.weight.ln() + log_pdf
            })
            .collect()
    }

    fn verdict_from_log_joint(&self, logs: &[f64], target_idx: usize) -> OracleVerdict {
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let posterior: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let top = posterior
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        OracleVerdict {
            concept_score: posterior[target_idx],
            top_concept: self.concepts[top].name.clone(),
            log_density: max + z.ln(),
            posterior,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ring8_preset_definition() {
        let w = make_world(0, "ring8").unwrap();
        assert_eq!(w.n_concepts(), 8);
        assert!(w.concepts.iter().all(|c| (c.weight - 0.125).abs() < 1e-15));
        assert_eq!(w.dim, 2);
        assert_eq!(w.embed_dim, 8);
    }

    #[test]
    fn ring8_pairwise_mode_distances_follow_circle_geometry() {
        let w = make_world(0, "ring8").unwrap();
        let min_expected = 2.0 * 4.0 * (std::f64::consts::PI / 8.0).sin();
        for i in 0..8 {
            for j in i + 1..8 {
                let d = w.concepts[i].mean.sub(&w.concepts[j].mean).norm();
                assert!(d >= min_expected - 1e-9, "{i},{j}: {d} < {min_expected}");
            }
        }
    }

    #[test]
    fn seeds_change_embeddings_not_means() {
        let a = make_world(0, "ring8").unwrap();
        let b = make_world(1, "ring8").unwrap();
        for (ca, cb) in a.concepts.iter().zip(&b.concepts) {
            assert_eq!(ca.mean.data, cb.mean.data);
        }
        assert_ne!(a.embeddings[0].data, b.embeddings[0].data);
    }

    #[test]
    fn unknown_preset_lists_presets() {
        let err = make_world(0, "nope").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ring8") && msg.contains("grid9"), "{msg}");
    }

    #[test]
    fn embeddings_unit_norm() {
        let w = make_world(3, "ring8").unwrap();
        for e in &w.embeddings {
            assert!((e.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_mean_approaches_mode_mean() {
        let w = make_world(0, "ring8").unwrap();
        let xs = w.sample_data(Some("c3"), 1000, 7).unwrap();
        let mut mean = vec![0.0; 2];
        for x in &xs {
            mean[0] += x.data[0];
            mean[1] += x.data[1];
        }
        mean.iter_mut().for_each(|m| *m /= 1000.0);
        let target = &w.concepts[3].mean.data;
        assert!((mean[0] - target[0]).abs() < 0.05, "{mean:?} vs {target:?}");
        assert!((mean[1] - target[1]).abs() < 0.05, "{mean:?} vs {target:?}");
    }

    #[test]
    fn zero_samples_rejected() {
        let w = make_world(0, "ring8").unwrap();
        assert!(w.sample_data(Some("c0"), 0, 1).is_err());
        assert!(w.sample_data(Some("missing"), 5, 1).is_err());
    }

    #[test]
    fn mixture_sampling_mode_counts_within_3_sigma() {
        let w = make_world(0, "ring8").unwrap();
        let xs = w.sample_data(None, 8000, 11).unwrap();
        let mut counts = vec![0usize; 8];
        for x in &xs {
            let v = w.oracle(x, "c0").unwrap();
            let idx = w.concept_index(&v.top_concept).unwrap();
            counts[idx] += 1;
        }
        // binomial sigma for p=1/8, n=8000
        let sigma = (8000.0 * 0.125 * 0.875f64).sqrt();
        for (k, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - 1000.0).abs() <= 3.0 * sigma,
                "mode {k} count {c} outside 3 sigma"
            );
        }
    }

    #[test]
    fn oracle_at_mode_mean_is_confident() {
        let w = make_world(0, "ring8").unwrap();
        let v = w.oracle(&w.concepts[5].mean.clone(), "c5").unwrap();
        assert_eq!(v.top_concept, "c5");
        assert!(v.posterior[5] > 0.99);
        assert!((v.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_symmetry_cases() {
        let w = make_world(0, "ring8").unwrap();
        // midpoint between adjacent modes 0 and 1
        let mid = w.concepts[0].mean.add(&w.concepts[1].mean).scale(0.5);
        let v = w.oracle(&mid, "c0").unwrap();
        assert!((v.posterior[0] - v.posterior[1]).abs() < 1e-9);
        // origin is equidistant from all ring modes
        let v0 = w.oracle(&NumArray::vector(vec![0.0, 0.0]), "c0").unwrap();
        for p in &v0.posterior {
            assert!((p - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn density_integrates_to_one_on_grid() {
        let w = make_world(0, "ring8").unwrap();
        let lo = -8.0;
        let hi = 8.0;
        let n = 400;
        let step = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = NumArray::vector(vec![lo + (i as f64 + 0.5) * step, lo + (j as f64 + 0.5) * step]);
                total += w.oracle(&x, "c0").unwrap().log_density.exp() * step * step;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        // Relabeling concepts permutes the posterior but never changes it.
        #[test]
        fn oracle_invariant_under_concept_permutation(x0 in -6.0f64..6.0, x1 in -6.0f64..6.0, rot in 1usize..7) {
            let w = make_world(0, "ring8").unwrap();
            let mut rotated = w.clone();
            rotated.concepts.rotate_left(rot);
            rotated.embeddings.rotate_left(rot);
            let x = NumArray::vector(vec![x0, x1]);
            let a = w.oracle(&x, "c0").unwrap();
            let b = rotated.oracle(&x, "c0").unwrap();
            for i in 0..8 {
                prop_assert!((a.posterior[(i + rot) % 8] - b.posterior[i]).abs() < 1e-12);
            }
            prop_assert_eq!(a.top_concept, b.top_concept);
        }
    }
}

//! Timestep-aware binary concept classifier over noisy latents, and the
//! steering updates that inject its gradient into sampling.
//!
//! Architecture: a state stream and a timestep stream (`[alpha_bar, 1 -
//! alpha_bar]`, shared with the score net) are projected to one hidden
//! width, summed, and passed through a small head to a single logit.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, NoiseSchedule, ScoreNet};
use crate::tensor::{optim_step, Activation, NumArray, OptimConfig, ParamStore, Tape};
use crate::world::ConceptWorld;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub hidden: usize,
    pub head_hidden: usize,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self { hidden: 64, head_hidden: 32 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub noisy_views_k: usize,
    pub timestep_power_gamma: f64,
    pub optimizer: OptimConfig,
    pub val_fraction: f64,
    pub n_positives: usize,
    pub n_negatives: usize,
    pub arch: ClassifierArch,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            batch_size: 8,
            noisy_views_k: 7,
            timestep_power_gamma: 3.0,
            optimizer: OptimConfig::adamw(1e-4, 1e-3).with_clip(1.0),
            val_fraction: 0.1,
            n_positives: 500,
            n_negatives: 5000,
            arch: ClassifierArch::default(),
            seed: 0,
        }
    }
}

/// Labeled clean latents, already standardized and split.
#[derive(Debug, Clone)]
pub struct ClassifierDataset {
    pub target: String,
    pub data_scale: f64,
    pub dim: usize,
    pub train: Vec<(NumArray, f64)>,
    pub val: Vec<(NumArray, f64)>,
    pub pos_weight: f64,
}

/// Positives from the target mode, negatives from the rest of the mixture;
/// `pos_weight = n_neg / n_pos` counters class imbalance.
pub fn build_classifier_dataset(
    world: &ConceptWorld,
    target: &str,
    n_pos: usize,
    n_neg: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<ClassifierDataset> {
    let target_idx = world.concept_index(target)?;
    if n_pos < 10 || n_neg < 10 {
        return Err(Error::invalid("need at least 10 positives and 10 negatives"));
    }
    let scale = world.latent_scale();
    let mut r = rng::stream(seed, &format!("clf-data/{target}"));
    let mut rows: Vec<(NumArray, f64)> = Vec::with_capacity(n_pos + n_neg);
    for x in world.sample_data(Some(target), n_pos, seed)? {
        rows.push((x.scale(1.0 / scale), 1.0));
    }
    // negatives: renormalized mixture over the remaining concepts
    let rest_weight: f64 =
        world.concepts.iter().enumerate().filter(|(i, _)| *i != target_idx).map(|(_, c)| c.weight).sum();
    for _ in 0..n_neg {
        let u: f64 = r.gen::<f64>() * rest_weight;
        let mut acc = 0.0;
        let mut k = usize::MAX;
        for (i, c) in world.concepts.iter().enumerate() {
            if i == target_idx {
                continue;
            }
            acc += c.weight;
            if u < acc || k == usize::MAX {
                k = i;
                if u < acc {
                    break;
                }
            }
        }
        let c = &world.concepts[k];
        let eps = rng::randn_vec(&mut r, world.dim);
        let x: Vec<f64> = c.mean.data.iter().zip(&eps).map(|(m, e)| (m + c.std * e) / scale).collect();
        rows.push((NumArray::vector(x), 0.0));
    }
    rows.shuffle(&mut r);
    let n_val = ((rows.len() as f64) * val_fraction).round() as usize;
    let val = rows.split_off(rows.len() - n_val);
    Ok(ClassifierDataset {
        target: target.to_string(),
        data_scale: scale,
        dim: world.dim,
        train: rows,
        val,
        pos_weight: n_neg as f64 / n_pos as f64,
    })
}

/// Power-law timestep draw `t ~ (U^(1/gamma)) * (T-1)`; gamma > 1 favors
/// noisier latents, gamma = 1 is uniform.
pub fn draw_timestep(rng: &mut ChaCha8Rng, t_count: usize, gamma: f64) -> usize {
    let u: f64 = rng.gen();
    let t = (u.powf(1.0 / gamma) * t_count as f64).floor() as usize;
    t.min(t_count - 1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentClassifier {
    pub params: ParamStore,
    pub target: String,
    pub dim: usize,
    pub arch: ClassifierArch,
    pub pos_weight: f64,
    pub data_scale: f64,
    pub schedule_hash: String,
    pub val_loss: f64,
}

impl LatentClassifier {
    fn init_params(dim: usize, arch: ClassifierArch, seed: u64) -> ParamStore {
        let mut params = ParamStore::new();
        let mut add = |name: &str, n_in: usize, n_out: usize| {
            let mut r = rng::stream(seed, &format!("init/clf/{name}"));
            let s = 1.0 / (n_in as f64).sqrt();
            let w: Vec<f64> = rng::randn_vec(&mut r, n_in * n_out).iter().map(|v| v * s).collect();
            params.insert(format!("{name}.w"), NumArray::new(vec![n_in, n_out], w));
            params.insert(format!("{name}.b"), NumArray::zeros(vec![n_out]));
        };
        add("state", dim, arch.hidden);
        add("time", 2, arch.hidden);
        add("head0", arch.hidden, arch.head_hidden);
        add("head1", arch.head_hidden, 1);
        params
    }

    /// Logit for a latent at timestep t (inference path).
    pub fn logit(&self, schedule: &NoiseSchedule, x_latent: &NumArray, t: usize) -> Result<f64> {
        x_latent.check_shape(&[self.dim], "classifier input")?;
        let tf = ScoreNet::time_feat(schedule, t);
        let h = self.arch.hidden;
        let p = &self.params;
        let mut summed = vec![0.0; h];
        for j in 0..h {
            let mut acc = p.value("state.b").data[j] + p.value("time.b").data[j];
            for i in 0..self.dim {
                acc += x_latent.data[i] * p.value("state.w").data[i * h + j];
            }
            for i in 0..2 {
                acc += tf[i] * p.value("time.w").data[i * h + j];
            }
            summed[j] = Activation::Silu.apply(acc);
        }
        let hh = self.arch.head_hidden;
        let mut hidden = vec![0.0; hh];
        for j in 0..hh {
            let mut acc = p.value("head0.b").data[j];
            for i in 0..h {
                acc += summed[i] * p.value("head0.w").data[i * hh + j];
            }
            hidden[j] = Activation::Silu.apply(acc);
        }
        let mut logit = p.value("head1.b").data[0];
        for i in 0..hh {
            logit += hidden[i] * p.value("head1.w").data[i];
        }
        Ok(logit)
    }

    /// Tape-recorded logit; `x` is a caller-created node so its gradient can
    /// be queried.
    pub fn logit_on_tape(
        &self,
        tape: &mut Tape,
        trainable: &dyn Fn(&str) -> bool,
        schedule: &NoiseSchedule,
        x: crate::tensor::NodeId,
        t: usize,
    ) -> crate::tensor::NodeId {
        let tf = ScoreNet::time_feat(schedule, t);
        let tnode = tape.constant(&tf);
        let h = self.arch.hidden;
        let hh = self.arch.head_hidden;
        let sw = tape.param(&self.params, "state.w", trainable("state.w"));
        let sb = tape.param(&self.params, "state.b", trainable("state.b"));
        let tw = tape.param(&self.params, "time.w", trainable("time.w"));
        let tb = tape.param(&self.params, "time.b", trainable("time.b"));
        let s = tape.affine(x, sw, Some(sb), self.dim, h);
        let tt = tape.affine(tnode, tw, Some(tb), 2, h);
        let sum = tape.add(s, tt);
        let act = tape.activation(sum, Activation::Silu);
        let w0 = tape.param(&self.params, "head0.w", trainable("head0.w"));
        let b0 = tape.param(&self.params, "head0.b", trainable("head0.b"));
        let h0 = tape.affine(act, w0, Some(b0), h, hh);
        let a0 = tape.activation(h0, Activation::Silu);
        let w1 = tape.param(&self.params, "head1.w", trainable("head1.w"));
        let b1 = tape.param(&self.params, "head1.b", trainable("head1.b"));
        tape.affine(a0, w1, Some(b1), hh, 1)
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "latent_classifier",
            "target": self.target,
            "dim": self.dim,
            "hidden": self.arch.hidden,
            "head_hidden": self.arch.head_hidden,
            "pos_weight": self.pos_weight,
            "data_scale": self.data_scale,
            "schedule_hash": self.schedule_hash,
            "val_loss": self.val_loss,
        })
    }

    pub fn from_parts(params: ParamStore, meta: &serde_json::Value) -> Result<Self> {
        if meta["kind"] != "latent_classifier" {
            return Err(Error::Checkpoint("not a latent_classifier checkpoint".into()));
        }
        Ok(Self {
            params,
            target: meta["target"].as_str().unwrap_or_default().to_string(),
            dim: meta["dim"].as_u64().unwrap_or(0) as usize,
            arch: ClassifierArch {
                hidden: meta["hidden"].as_u64().unwrap_or(0) as usize,
                head_hidden: meta["head_hidden"].as_u64().unwrap_or(0) as usize,
            },
            pos_weight: meta["pos_weight"].as_f64().unwrap_or(1.0),
            data_scale: meta["data_scale"].as_f64().unwrap_or(1.0),
            schedule_hash: meta["schedule_hash"].as_str().unwrap_or_default().to_string(),
            val_loss: meta["val_loss"].as_f64().unwrap_or(f64::NAN),
        })
    }
}

/// Train on noisy views (k per sample, power-law timesteps), pick the epoch
/// with the lowest validation loss; validation averages logits over 3
/// independently drawn timesteps per sample.
pub fn train_latent_classifier(
    dataset: &ClassifierDataset,
    schedule: &NoiseSchedule,
    cfg: &ClassifierTrainConfig,
) -> Result<LatentClassifier> {
    assert!(cfg.noisy_views_k >= 1 && cfg.timestep_power_gamma > 0.0);
    let mut clf = LatentClassifier {
        params: LatentClassifier::init_params(dataset.dim, cfg.arch, cfg.seed),
        target: dataset.target.clone(),
        dim: dataset.dim,
        arch: cfg.arch,
        pos_weight: dataset.pos_weight,
        data_scale: dataset.data_scale,
        schedule_hash: schedule.hash(),
        val_loss: f64::INFINITY,
    };
    let mut r = rng::stream(cfg.seed, &format!("clf-train/{}", dataset.target));
    let mut best_params = clf.params.clone();
    let mut best_val = f64::INFINITY;

    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut losses = Vec::new();
            for &idx in chunk {
                let (x0, label) = &dataset.train[idx];
                for _ in 0..cfg.noisy_views_k {
                    let t = draw_timestep(&mut r, schedule.t_count, cfg.timestep_power_gamma);
                    let eps = NumArray::vector(rng::randn_vec(&mut r, dataset.dim));
                    let xt = forward_noise(schedule, x0, t, &eps);
                    let xnode = tape.constant(&xt.data);
                    let logit = clf.logit_on_tape(&mut tape, &|_| true, schedule, xnode, t);
                    losses.push(tape.bce_with_logits(logit, *label, dataset.pos_weight));
                }
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = tape.add(total, l);
            }
            let loss = tape.scale(total, 1.0 / losses.len() as f64);
            if !tape.value(loss)[0].is_finite() {
                return Err(Error::NonFinite("classifier training loss".into()));
            }
            tape.backward(loss)?;
            tape.write_param_grads(&mut clf.params)?;
            optim_step(&mut clf.params, &cfg.optimizer)?;
            clf.params.zero_grads();
        }

        let val = validation_loss(&clf, dataset, schedule, cfg, &mut r)?;
        if !val.is_finite() {
            return Err(Error::NonFinite("classifier validation loss".into()));
        }
        if val < best_val {
            best_val = val;
            best_params = clf.params.clone();
        }
    }
    clf.params = best_params;
    clf.val_loss = best_val;
    Ok(clf)
}

fn validation_loss(
    clf: &LatentClassifier,
    dataset: &ClassifierDataset,
    schedule: &NoiseSchedule,
    cfg: &ClassifierTrainConfig,
    r: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for (x0, label) in &dataset.val {
        let mut logit_sum = 0.0;
        for _ in 0..3 {
            let t = draw_timestep(r, schedule.t_count, cfg.timestep_power_gamma);
            let eps = NumArray::vector(rng::randn_vec(r, dataset.dim));
            let xt = forward_noise(schedule, x0, t, &eps);
            logit_sum += clf.logit(schedule, &xt, t)?;
        }
        let z = logit_sum / 3.0;
        let softplus = |v: f64| v.max(0.0) + (-v.abs()).exp().ln_1p();
        total += dataset.pos_weight * label * softplus(-z) + (1.0 - label) * softplus(z);
    }
    Ok(total / dataset.val.len() as f64)
}

/// `g_t = d BCE(f(x_t, t), y=1) / d x_t` — the steering direction source.
pub fn classifier_gradient(
    clf: &LatentClassifier,
    schedule: &NoiseSchedule,
    x_latent: &NumArray,
    t: usize,
) -> Result<NumArray> {
    if !x_latent.is_finite() {
        return Err(Error::NonFinite("classifier_gradient input".into()));
    }
    let mut tape = Tape::new();
    let x = tape.input(&x_latent.data);
    let logit = clf.logit_on_tape(&mut tape, &|_| false, schedule, x, t);
    let loss = tape.bce_with_logits(logit, 1.0, 1.0);
    tape.backward(loss)?;
    Ok(NumArray::vector(tape.grad(x)?))
}

/// Latent-space steering update `x - s_clf * sigma_t * g_t`; a no-op at
/// s_clf = 0 or sigma_t = 0 (deterministic steps).
pub fn steer(x: &NumArray, g: &NumArray, s_clf: f64, sigma_t: f64) -> NumArray {
    if s_clf == 0.0 || sigma_t == 0.0 {
        return x.clone();
    }
    x.add_scaled(g, -s_clf * sigma_t)
}

/// Epsilon-space steering: shift the guided prediction so the implied clean
/// state moves down the BCE loss (toward the concept), rescaled by the
/// current noise level.
pub fn steer_epsilon(eps_cfg: &NumArray, g: &NumArray, s_clf: f64, alpha_bar_t: f64) -> NumArray {
    if s_clf == 0.0 {
        return eps_cfg.clone();
    }
    eps_cfg.add_scaled(g, (1.0 - alpha_bar_t).sqrt() * s_clf)
}

/// Analytic BCE gradient for the exact mixture posterior at noise level t;
/// the oracle stand-in for a trained classifier.
pub fn oracle_bce_gradient(
    world: &ConceptWorld,
    schedule: &NoiseSchedule,
    x_latent: &NumArray,
    t: usize,
    target: &str,
) -> Result<NumArray> {
    let target_idx = world.concept_index(target)?;
    let scale = world.latent_scale();
    let ab = schedule.alpha_bar[t];
    // noisy marginal per component: N(sqrt(ab) * mu_k / scale, ab*(std/scale)^2 + 1-ab)
    let mut log_r = Vec::with_capacity(world.n_concepts());
    let mut means = Vec::with_capacity(world.n_concepts());
    let mut vars = Vec::with_capacity(world.n_concepts());
    for c in &world.concepts {
        let m: Vec<f64> = c.mean.data.iter().map(|v| ab.sqrt() * v / scale).collect();
        let var = ab * (c.std / scale).powi(2) + (1.0 - ab);
        let mut lp = c.weight.ln();
        for d in 0..world.dim {
            let z = x_latent.data[d] - m[d];
            lp += -0.5 * z * z / var - 0.5 * var.ln();
        }
        log_r.push(lp);
        means.push(m);
        vars.push(var);
    }
    let max = log_r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = log_r.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let resp: Vec<f64> = exps.iter().map(|e| e / z).collect();
    // grad of -log p(target | x): (x - m_t)/v_t - sum_k r_k (x - m_k)/v_k
    let mut g = vec![0.0; world.dim];
    for d in 0..world.dim {
        g[d] = (x_latent.data[d] - means[target_idx][d]) / vars[target_idx];
        for k in 0..world.n_concepts() {
            g[d] -= resp[k] * (x_latent.data[d] - means[k][d]) / vars[k];
        }
    }
    Ok(NumArray::vector(g))
}

/// Rank-based AUC of positive scores over negative scores.
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::make_world;

    #[test]
    fn dataset_counts_and_pos_weight() {
        let world = make_world(0, "ring8").unwrap();
        let ds = build_classifier_dataset(&world, "c0", 500, 5000, 0.1, 3).unwrap();
        assert_eq!(ds.pos_weight, 10.0);
        let all: Vec<&(NumArray, f64)> = ds.train.iter().chain(ds.val.iter()).collect();
        assert_eq!(all.len(), 5500);
        let n_pos = all.iter().filter(|(_, l)| *l == 1.0).count();
        assert_eq!(n_pos, 500);
        assert_eq!(ds.val.len(), 550);
    }

    #[test]
    fn degenerate_datasets_rejected() {
        let world = make_world(0, "ring8").unwrap();
        assert!(build_classifier_dataset(&world, "c0", 500, 0, 0.1, 3).is_err());
        assert!(build_classifier_dataset(&world, "c0", 5, 100, 0.1, 3).is_err());
        assert!(build_classifier_dataset(&world, "nope", 100, 100, 0.1, 3).is_err());
    }

    #[test]
    fn power_law_gamma_one_is_uniform() {
        // KS test against the discrete uniform CDF at the 1% level
        let mut r = rng::stream(0, "ks");
        let n = 100_000;
        let t_count = 100;
        let mut counts = vec![0usize; t_count];
        for _ in 0..n {
            counts[draw_timestep(&mut r, t_count, 1.0)] += 1;
        }
        let mut cum = 0.0;
        let mut d_max: f64 = 0.0;
        for (k, &c) in counts.iter().enumerate() {
            cum += c as f64 / n as f64;
            d_max = d_max.max((cum - (k + 1) as f64 / t_count as f64).abs());
        }
        let crit = 1.63 / (n as f64).sqrt();
        assert!(d_max < crit, "KS statistic {d_max} over critical {crit}");
    }

    #[test]
    fn power_law_large_gamma_concentrates_at_t_max() {
        let mut r = rng::stream(0, "gamma100");
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|_| draw_timestep(&mut r, 100, 100.0) as f64)
            .sum::<f64>()
            / n as f64;
        assert!(mean > 0.95 * 100.0, "mean t {mean}");
    }

    #[test]
    fn classifier_learns_separable_target() {
        let world = make_world(0, "ring8").unwrap();
        let schedule = NoiseSchedule::standard();
        let ds = build_classifier_dataset(&world, "c0", 300, 1500, 0.1, 5).unwrap();
        let cfg = ClassifierTrainConfig {
            epochs: 12,
            noisy_views_k: 5,
            optimizer: OptimConfig::adamw(3e-4, 1e-3).with_clip(1.0),
            ..Default::default()
        };
        let clf = train_latent_classifier(&ds, &schedule, &cfg).unwrap();

        // clean-state validation accuracy
        let mut hits = 0;
        for (x0, label) in &ds.val {
            let logit = clf.logit(&schedule, x0, 0).unwrap();
            let pred = if logit > 0.0 { 1.0 } else { 0.0 };
            if pred == *label {
                hits += 1;
            }
        }
        let acc = hits as f64 / ds.val.len() as f64;
        assert!(acc >= 0.9, "clean val accuracy {acc}");

        // AUC over noisy views at t < T/2
        let mut r = rng::stream(9, "auc");
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (x0, label) in &ds.val {
            let t = r.gen_range(0..schedule.t_count / 2);
            let eps = NumArray::vector(rng::randn_vec(&mut r, 2));
            let xt = forward_noise(&schedule, x0, t, &eps);
            let logit = clf.logit(&schedule, &xt, t).unwrap();
            if *label == 1.0 {
                pos.push(logit);
            } else {
                neg.push(logit);
            }
        }
        let a = auc(&pos, &neg);
        assert!(a > 0.8, "noisy AUC {a}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let world = make_world(0, "ring8").unwrap();
        let schedule = NoiseSchedule::standard();
        let clf = LatentClassifier {
            params: LatentClassifier::init_params(2, ClassifierArch::default(), 11),
            target: "c0".into(),
            dim: 2,
            arch: ClassifierArch::default(),
            pos_weight: 1.0,
            data_scale: 1.0,
            schedule_hash: schedule.hash(),
            val_loss: 0.0,
        };
        let x = NumArray::vector(vec![0.37, -0.81]);
        let t = 33;
        let g = classifier_gradient(&clf, &schedule, &x, t).unwrap();
        let h = 1e-5;
        for d in 0..2 {
            let loss_at = |v: f64| {
                let mut xp = x.clone();
                xp.data[d] = v;
                let z = clf.logit(&schedule, &xp, t).unwrap();
                (1.0 + (-z as f64).exp()).ln()
            };
            let fd = (loss_at(x.data[d] + h) - loss_at(x.data[d] - h)) / (2.0 * h);
            let denom = fd.abs().max(g.data[d].abs()).max(1e-8);
            assert!(((fd - g.data[d]) / denom).abs() < 1e-4, "coord {d}: {fd} vs {}", g.data[d]);
        }
    }

    // Hand-built single-unit classifier: logit = d*silu(c*silu(a*x0 + b*x1)),
    // gradient checked against the chain rule written out by hand.
    #[test]
    fn gradient_matches_hand_chain_rule() {
        let schedule = NoiseSchedule::standard();
        let arch = ClassifierArch { hidden: 1, head_hidden: 1 };
        let (a, b, c, d) = (0.8, -1.3, 1.7, 0.6);
        let mut params = ParamStore::new();
        params.insert("state.w", NumArray::new(vec![2, 1], vec![a, b]));
        params.insert("state.b", NumArray::zeros(vec![1]));
        params.insert("time.w", NumArray::zeros(vec![2, 1]));
        params.insert("time.b", NumArray::zeros(vec![1]));
        params.insert("head0.w", NumArray::new(vec![1, 1], vec![c]));
        params.insert("head0.b", NumArray::zeros(vec![1]));
        params.insert("head1.w", NumArray::new(vec![1, 1], vec![d]));
        params.insert("head1.b", NumArray::zeros(vec![1]));
        let clf = LatentClassifier {
            params,
            target: "t".into(),
            dim: 2,
            arch,
            pos_weight: 1.0,
            data_scale: 1.0,
            schedule_hash: schedule.hash(),
            val_loss: 0.0,
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let silu = |v: f64| v * sig(v);
        let dsilu = |v: f64| sig(v) + v * sig(v) * (1.0 - sig(v));
        let x = NumArray::vector(vec![0.5, 0.25]);
        let u = a * x.data[0] + b * x.data[1];
        let v = c * silu(u);
        let z = d * silu(v);
        let dz_du = d * dsilu(v) * c * dsilu(u);
        let coeff = sig(z) - 1.0; // dBCE(y=1)/dz
        let expected = [coeff * dz_du * a, coeff * dz_du * b];
        let g = classifier_gradient(&clf, &schedule, &x, 50).unwrap();
        for i in 0..2 {
            assert!((g.data[i] - expected[i]).abs() < 1e-12, "{} vs {}", g.data[i], expected[i]);
        }
        // scaling the input scales the pre-activation exactly as the chain
        // rule predicts
        let x2 = x.scale(2.0);
        let g2 = classifier_gradient(&clf, &schedule, &x2, 50).unwrap();
        let u2 = 2.0 * u;
        let v2 = c * silu(u2);
        let z2 = d * silu(v2);
        let expected2 = (sig(z2) - 1.0) * d * dsilu(v2) * c * dsilu(u2) * a;
        assert!((g2.data[0] - expected2).abs() < 1e-12);
    }

    #[test]
    fn steer_edge_cases() {
        let x = NumArray::vector(vec![1.0, -1.0]);
        let g = NumArray::vector(vec![0.5, 0.25]);
        assert_eq!(steer(&x, &g, 0.0, 0.3).data, x.data);
        assert_eq!(steer(&x, &g, 2.0, 0.0).data, x.data);
        let once = steer(&x, &g, 1.0, 0.5);
        let twice = steer(&x, &g, 2.0, 0.5);
        for d in 0..2 {
            let d1 = once.data[d] - x.data[d];
            let d2 = twice.data[d] - x.data[d];
            assert!((d2 - 2.0 * d1).abs() < 1e-15);
        }
        let eps = NumArray::vector(vec![0.2, 0.1]);
        assert_eq!(steer_epsilon(&eps, &g, 0.0, 0.5).data, eps.data);
    }

    #[test]
    fn oracle_gradient_points_toward_target() {
        let world = make_world(0, "pair2").unwrap();
        let schedule = NoiseSchedule::standard();
        // midway, slightly right of center: descending BCE for "left" must
        // push x toward negative x0
        let x = NumArray::vector(vec![0.1, 0.0]);
        let g = oracle_bce_gradient(&world, &schedule, &x, 50, "left").unwrap();
        assert!(g.data[0] > 0.0, "grad {:?}", g.data);
    }
}

//! The conditional noise predictor.
//!
//! An MLP over `[x_t ⊕ time_feat(t) ⊕ G·c]` where `G` is the conditioning
//! projection (`cond.w`, the one entry closed-form edits touch) and
//! `time_feat(t) = [alpha_bar_t, 1 - alpha_bar_t]`. Inputs live in a
//! standardized latent space (`x / data_scale`) so that the variance-
//! preserving marginal at every timestep has unit second moment and reverse
//! sampling can start from N(0, I).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_noise, NoiseSchedule};
use crate::tensor::{
    forward_mlp, forward_mlp_on_tape, init_mlp_params, optim_step, Activation, NodeId, NumArray,
    OptimConfig, ParamStore, Tape,
};
use crate::world::ConceptWorld;
use crate::{rng, Error, Result};

pub const COND_PROJ: &str = "cond.w";
const BODY_PREFIX: &str = "body.";

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    pub hidden: usize,
    pub cond_feat: usize,
    pub cfg_dropout: f64,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self { hidden: 64, cond_feat: 8, cfg_dropout: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreNet {
    pub params: ParamStore,
    pub dim: usize,
    pub embed_dim: usize,
    pub cond_feat: usize,
    pub hidden: usize,
    pub cfg_dropout: f64,
    /// sqrt(E||x0||^2 / dim) of the training distribution.
    pub data_scale: f64,
}

impl ScoreNet {
    pub fn new(world: &ConceptWorld, cfg: ScoreNetConfig, seed: u64) -> Self {
        let dim = world.dim;
        let data_scale = world.latent_scale();
        let mut params = ParamStore::new();
        let arch = [dim + 2 + cfg.cond_feat, cfg.hidden, cfg.hidden, dim];
        init_mlp_params(&mut params, BODY_PREFIX, &arch, seed);
        let mut r = rng::stream(seed, &format!("init/{COND_PROJ}"));
        let scale = 1.0 / (world.embed_dim as f64).sqrt();
        let g: Vec<f64> = rng::randn_vec(&mut r, world.embed_dim * cfg.cond_feat)
            .iter()
            .map(|v| v * scale)
            .collect();
        params.insert(COND_PROJ, NumArray::new(vec![world.embed_dim, cfg.cond_feat], g));
        Self {
            params,
            dim,
            embed_dim: world.embed_dim,
            cond_feat: cfg.cond_feat,
            hidden: cfg.hidden,
            cfg_dropout: cfg.cfg_dropout,
            data_scale,
        }
    }

    pub fn arch(&self) -> Vec<usize> {
        vec![self.dim + 2 + self.cond_feat, self.hidden, self.hidden, self.dim]
    }

    pub fn to_latent(&self, x_world: &NumArray) -> NumArray {
        x_world.scale(1.0 / self.data_scale)
    }

    pub fn to_world(&self, x_latent: &NumArray) -> NumArray {
        x_latent.scale(self.data_scale)
    }

    pub fn time_feat(schedule: &NoiseSchedule, t: usize) -> [f64; 2] {
        let ab = schedule.alpha_bar[t];
        [ab, 1.0 - ab]
    }

    /// Conditioning features `G^T c` for an embedding.
    pub fn cond_features(&self, emb: &NumArray) -> Result<NumArray> {
        emb.check_shape(&[self.embed_dim], "conditioning embedding")?;
        let g = self.params.value(COND_PROJ);
        let mut out = vec![0.0; self.cond_feat];
        for i in 0..self.embed_dim {
            let e = emb.data[i];
            if e == 0.0 {
                continue;
            }
            for j in 0..self.cond_feat {
                out[j] += e * g.data[i * self.cond_feat + j];
            }
        }
        Ok(NumArray::vector(out))
    }

    /// Predicted noise for a latent-space state.
    pub fn epsilon(
        &self,
        schedule: &NoiseSchedule,
        x_latent: &NumArray,
        t: usize,
        emb: &NumArray,
    ) -> Result<NumArray> {
        let feats = self.cond_features(emb)?;
        let tf = Self::time_feat(schedule, t);
        let mut input = Vec::with_capacity(self.dim + 2 + self.cond_feat);
        input.extend_from_slice(&x_latent.data);
        input.extend_from_slice(&tf);
        input.extend_from_slice(&feats.data);
        forward_mlp(
            &self.params,
            &NumArray::vector(input),
            &self.arch(),
            Activation::Silu,
            BODY_PREFIX,
        )
    }

    /// Classifier-free guided prediction
    /// `eps_u + guidance_scale * (eps_c - eps_u)`, with the unconditional
    /// branch given by the all-zero embedding. The end points scale=0 and
    /// scale=1 return the branch predictions exactly.
    pub fn cfg_epsilon(
        &self,
        schedule: &NoiseSchedule,
        x_latent: &NumArray,
        t: usize,
        emb: &NumArray,
        guidance_scale: f64,
    ) -> Result<NumArray> {
        if guidance_scale == 0.0 {
            return self.epsilon(schedule, x_latent, t, &NumArray::zeros(vec![self.embed_dim]));
        }
        if guidance_scale == 1.0 {
            return self.epsilon(schedule, x_latent, t, emb);
        }
        let eps_u = self.epsilon(schedule, x_latent, t, &NumArray::zeros(vec![self.embed_dim]))?;
        let eps_c = self.epsilon(schedule, x_latent, t, emb)?;
        Ok(eps_u.add_scaled(&eps_c.sub(&eps_u), guidance_scale))
    }

    /// Tape-recorded prediction. The embedding enters as a caller-supplied
    /// node so attacks can differentiate through it; `trainable` scopes which
    /// network entries receive gradients.
    pub fn epsilon_on_tape(
        &self,
        tape: &mut Tape,
        trainable: &dyn Fn(&str) -> bool,
        schedule: &NoiseSchedule,
        x: NodeId,
        t: usize,
        emb: NodeId,
    ) -> Result<NodeId> {
        let g = tape.param(&self.params, COND_PROJ, trainable(COND_PROJ));
        let feats = tape.affine(emb, g, None, self.embed_dim, self.cond_feat);
        let tf = Self::time_feat(schedule, t);
        let tnode = tape.constant(&tf);
        let input = tape.concat(&[x, tnode, feats]);
        forward_mlp_on_tape(
            tape,
            &self.params,
            trainable,
            input,
            &self.arch(),
            Activation::Silu,
            BODY_PREFIX,
        )
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "score_net",
            "dim": self.dim,
            "embed_dim": self.embed_dim,
            "cond_feat": self.cond_feat,
            "hidden": self.hidden,
            "cfg_dropout": self.cfg_dropout,
            "data_scale": self.data_scale,
        })
    }

    pub fn from_parts(params: ParamStore, meta: &serde_json::Value) -> Result<Self> {
        if meta["kind"] != "score_net" {
            return Err(Error::Checkpoint("not a score_net checkpoint".into()));
        }
        let get = |k: &str| -> Result<f64> {
            meta[k]
                .as_f64()
                .ok_or_else(|| Error::Checkpoint(format!("missing meta field {k}")))
        };
        Ok(Self {
            params,
            dim: get("dim")? as usize,
            embed_dim: get("embed_dim")? as usize,
            cond_feat: get("cond_feat")? as usize,
            hidden: get("hidden")? as usize,
            cfg_dropout: get("cfg_dropout")?,
            data_scale: get("data_scale")?,
        })
    }

    /// Same parameters, different values: used for teacher/student copies.
    pub fn with_params(&self, params: ParamStore) -> Self {
        let mut out = self.clone();
        out.params = params;
        out
    }
}

/// One pre-drawn training example: world-space clean point, conditioning
/// embedding after any dropout, timestep and noise.
#[derive(Debug, Clone)]
pub struct TrainDraw {
    pub x0_world: NumArray,
    pub emb: NumArray,
    pub t: usize,
    pub eps: NumArray,
}

/// Standard denoising step (negated for gradient ascent): draws per-sample
/// timesteps, noise and conditioning dropout, then applies one optimizer
/// step. Returns the (possibly negated) loss that was optimized.
pub fn train_step(
    net: &mut ScoreNet,
    schedule: &NoiseSchedule,
    batch: &[(NumArray, NumArray)],
    optim: &OptimConfig,
    negate: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step requires a nonempty batch"));
    }
    let draws: Vec<TrainDraw> = batch
        .iter()
        .map(|(x0, emb)| {
            let t = rng.gen_range(0..schedule.t_count);
            let eps = NumArray::vector(rng::randn_vec(rng, net.dim));
            let dropped = rng.gen::<f64>() < net.cfg_dropout;
            let emb = if dropped { NumArray::zeros(vec![net.embed_dim]) } else { emb.clone() };
            TrainDraw { x0_world: x0.clone(), emb, t, eps }
        })
        .collect();
    train_step_with(net, schedule, &draws, optim, negate)
}

/// Deterministic core of [`train_step`]; takes pre-drawn randomness.
pub fn train_step_with(
    net: &mut ScoreNet,
    schedule: &NoiseSchedule,
    draws: &[TrainDraw],
    optim: &OptimConfig,
    negate: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut per_sample = Vec::with_capacity(draws.len());
    for d in draws {
        let x0 = net.to_latent(&d.x0_world);
        let xt = forward_noise(schedule, &x0, d.t, &d.eps);
        let xnode = tape.constant(&xt.data);
        let enode = tape.constant(&d.emb.data);
        let pred = net.epsilon_on_tape(&mut tape, &|_| true, schedule, xnode, d.t, enode)?;
        let target = tape.constant(&d.eps.data);
        let diff = tape.sub(pred, target);
        per_sample.push(tape.sum_sq(diff));
    }
    let mut total = per_sample[0];
    for &s in &per_sample[1..] {
        total = tape.add(total, s);
    }
    let sign = if negate { -1.0 } else { 1.0 };
    let loss = tape.scale(total, sign / draws.len() as f64);
    let loss_val = tape.value(loss)[0];
    if !loss_val.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    tape.backward(loss)?;
    tape.write_param_grads(&mut net.params)?;
    optim_step(&mut net.params, optim)?;
    net.params.zero_grads();
    Ok(loss_val)
}

/// Mean denoising loss over fixed draws, no gradients.
pub fn denoise_loss(
    net: &ScoreNet,
    schedule: &NoiseSchedule,
    draws: &[TrainDraw],
) -> Result<f64> {
    let mut total = 0.0;
    for d in draws {
        let x0 = net.to_latent(&d.x0_world);
        let xt = forward_noise(schedule, &x0, d.t, &d.eps);
        let pred = net.epsilon(schedule, &xt, d.t, &d.emb)?;
        total += pred.sub(&d.eps).data.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / draws.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub net: ScoreNetConfig,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 128,
            optim: OptimConfig::adam(2e-3),
            net: ScoreNetConfig::default(),
            seed: 0,
        }
    }
}

/// Train a conditional score network on the mixture from scratch. The
/// learning rate decays linearly to a tenth of its initial value.
pub fn train_base(
    world: &ConceptWorld,
    schedule: &NoiseSchedule,
    cfg: &BaseTrainConfig,
) -> Result<ScoreNet> {
    let mut net = ScoreNet::new(world, cfg.net, cfg.seed);
    let mut r = rng::stream(cfg.seed, "train_base");
    let lr0 = cfg.optim.learning_rate;
    for step in 0..cfg.steps {
        let mut optim = cfg.optim;
        optim.learning_rate = lr0 * (1.0 - 0.9 * step as f64 / cfg.steps.max(1) as f64);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let u: f64 = r.gen();
            let mut acc = 0.0;
            let mut k = world.n_concepts() - 1;
            for (i, c) in world.concepts.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let c = &world.concepts[k];
            let eps = rng::randn_vec(&mut r, world.dim);
            let x0: Vec<f64> =
                c.mean.data.iter().zip(&eps).map(|(m, e)| m + c.std * e).collect();
            batch.push((NumArray::vector(x0), world.embeddings[k].clone()));
        }
        train_step(&mut net, schedule, &batch, &optim, false, &mut r)?;
    }
    Ok(net)
}

/// Pre-draw `(t, eps)` pairs for a fixed evaluation set.
pub fn make_eval_draws(
    net: &ScoreNet,
    schedule: &NoiseSchedule,
    x0s: &[NumArray],
    emb: &NumArray,
    views_per_sample: usize,
    seed: u64,
    key: &str,
) -> Vec<TrainDraw> {
    let mut r = rng::stream(seed, key);
    let mut draws = Vec::with_capacity(x0s.len() * views_per_sample);
    for x0 in x0s {
        for _ in 0..views_per_sample {
            let t = r.gen_range(0..schedule.t_count);
            let eps = NumArray::vector(rng::randn_vec(&mut r, net.dim));
            draws.push(TrainDraw { x0_world: x0.clone(), emb: emb.clone(), t, eps });
        }
    }
    draws
}

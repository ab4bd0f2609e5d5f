//! Optimization-based probes: free-embedding inversion and the discrete
//! embedding-bank attack.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{eval_generations, ProbeCell, ProbeClass, ProbeReport};
use crate::diffusion::{forward_noise, NoiseSchedule, SampleHooks, SamplerConfig, ScoreNet};
use crate::tensor::{optim_step, NumArray, OptimConfig, ParamStore, Tape};
use crate::world::ConceptWorld;
use crate::{rng, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_eval_seeds: usize,
    pub init_noise: f64,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 5e-2,
            batch_size: 16,
            n_train: 64,
            n_eval_seeds: 100,
            init_noise: 0.01,
            guidance_scale: 3.0,
            seed: 0,
        }
    }
}

/// Optimize a free conditioning embedding to minimize the model's denoising
/// loss on the given clean samples. Returns the embedding, its final loss,
/// and whether optimization stayed finite. `unit_norm` projects back to the
/// unit sphere after every step (the discrete attack's refinement mode).
pub fn invert_embedding(
    net: &ScoreNet,
    schedule: &NoiseSchedule,
    data: &[NumArray],
    init: Option<&NumArray>,
    steps: usize,
    lr: f64,
    batch_size: usize,
    init_noise: f64,
    unit_norm: bool,
    seed: u64,
    key: &str,
) -> Result<(NumArray, f64, bool)> {
    let mut r = rng::stream(seed, key);
    let mut att = ParamStore::new();
    let start = match init {
        Some(e) => e.clone(),
        None => NumArray::vector(
            rng::randn_vec(&mut r, net.embed_dim).iter().map(|v| v * init_noise).collect(),
        ),
    };
    att.insert("embedding", start);
    let optim = OptimConfig::adam(lr);
    let mut last_loss = f64::NAN;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let e_node = tape.param(&att, "embedding", true);
        let mut losses = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let x0 = &data[r.gen_range(0..data.len())];
            let t = r.gen_range(0..schedule.t_count);
            let eps = NumArray::vector(rng::randn_vec(&mut r, net.dim));
            let xt = forward_noise(schedule, &net.to_latent(x0), t, &eps);
            let xnode = tape.constant(&xt.data);
            let pred = net.epsilon_on_tape(&mut tape, &|_| false, schedule, xnode, t, e_node)?;
            let target = tape.constant(&eps.data);
            let diff = tape.sub(pred, target);
            losses.push(tape.sum_sq(diff));
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l);
        }
        let loss = tape.scale(total, 1.0 / losses.len() as f64);
        last_loss = tape.value(loss)[0];
        if !last_loss.is_finite() {
            return Ok((att.value("embedding").clone(), last_loss, false));
        }
        tape.backward(loss)?;
        tape.write_param_grads(&mut att)?;
        optim_step(&mut att, &optim)?;
        att.zero_grads();
        if unit_norm {
            let e = att.value_mut("embedding");
            let n = e.norm();
            if n > 0.0 {
                e.data.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
    Ok((att.value("embedding").clone(), last_loss, true))
}

/// Textual-inversion analog: search embedding space by gradient for an input
/// that makes the erased model regenerate the target, then grade the
/// generations with the oracle.
pub fn probe_embedding_inversion(
    net: &ScoreNet,
    schedule: &NoiseSchedule,
    world: &ConceptWorld,
    target: &str,
    method: &str,
    cfg: &InversionConfig,
) -> Result<ProbeReport> {
    let data = world.sample_data(
        Some(target),
        cfg.n_train,
        rng::derive_seed(cfg.seed, &format!("inversion/data/{target}")),
    )?;
    let (emb, loss, finite) = invert_embedding(
        net,
        schedule,
        &data,
        None,
        cfg.steps,
        cfg.lr,
        cfg.batch_size,
        cfg.init_noise,
        false,
        cfg.seed,
        &format!("inversion/{method}/{target}"),
    )?;
    let proto = SamplerConfig::ddim(50, 0.0, cfg.guidance_scale, 0);
    let (acc, score, _) = eval_generations(
        net,
        schedule,
        world,
        &emb,
        target,
        &proto,
        cfg.n_eval_seeds,
        cfg.seed,
        &format!("inversion/{method}/{target}/eval"),
        |_| SampleHooks::none(),
    )?;
    let cell = ProbeCell {
        config: serde_json::json!({"steps": cfg.steps, "lr": cfg.lr, "final_loss": loss}),
        accuracy: acc,
        mean_score: score,
        n: cfg.n_eval_seeds,
    };
    let report = ProbeReport {
        probe: "embedding_inversion".into(),
        probe_class: ProbeClass::Optimization,
        method: method.to_string(),
        target: target.to_string(),
        best_score: 0.0,
        best_accuracy: 0.0,
        best_config: serde_json::Value::Null,
        n_seeds: cfg.n_eval_seeds,
        cells: vec![cell],
        unrelated_accuracy: None,
        samples: None,
        failure: if finite { None } else { Some("optimization diverged".into()) },
    };
    Ok(report.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteAttackConfig {
    pub bank_size: usize,
    pub refine_steps: usize,
    pub top_k: usize,
    pub n_train: usize,
    pub score_views: usize,
    pub n_eval_seeds: usize,
    pub refine_lr: f64,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for DiscreteAttackConfig {
    fn default() -> Self {
        Self {
            bank_size: 64,
            refine_steps: 20,
            top_k: 4,
            n_train: 64,
            score_views: 4,
            n_eval_seeds: 100,
            refine_lr: 2e-2,
            guidance_scale: 3.0,
            seed: 0,
        }
    }
}

fn bank_loss(
    net: &ScoreNet,
    schedule: &NoiseSchedule,
    fixed: &[(NumArray, usize, NumArray)],
    emb: &NumArray,
) -> Result<f64> {
    let mut total = 0.0;
    for (x0_lat, t, eps) in fixed {
        let xt = forward_noise(schedule, x0_lat, *t, eps);
        let pred = net.epsilon(schedule, &xt, *t, emb)?;
        total += pred.sub(eps).data.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / fixed.len() as f64)
}

/// Discrete prompt-attack analog: score a bank of candidate embeddings (all
/// world concepts plus random unit vectors) by the erased model's denoising
/// loss on held-out target samples, refine the best few by projected
/// gradient, and grade the winner's generations.
pub fn probe_discrete_attack(
    net: &ScoreNet,
    schedule: &NoiseSchedule,
    world: &ConceptWorld,
    target: &str,
    method: &str,
    cfg: &DiscreteAttackConfig,
) -> Result<ProbeReport> {
    let data = world.sample_data(
        Some(target),
        cfg.n_train,
        rng::derive_seed(cfg.seed, &format!("attack/data/{target}")),
    )?;
    let mut r = rng::stream(cfg.seed, &format!("attack/bank/{method}/{target}"));
    let mut bank: Vec<(String, NumArray)> = world
        .concepts
        .iter()
        .zip(&world.embeddings)
        .map(|(c, e)| (format!("concept:{}", c.name), e.clone()))
        .collect();
    for i in 0..cfg.bank_size {
        let raw = rng::randn_vec(&mut r, world.embed_dim);
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        bank.push((
            format!("random:{i}"),
            NumArray::vector(raw.iter().map(|v| v / norm).collect()),
        ));
    }

    // fixed scoring views shared by every bank entry
    let mut fixed = Vec::with_capacity(data.len() * cfg.score_views);
    for x0 in &data {
        for _ in 0..cfg.score_views {
            let t = r.gen_range(0..schedule.t_count);
            let eps = NumArray::vector(rng::randn_vec(&mut r, net.dim));
            fixed.push((net.to_latent(x0), t, eps));
        }
    }

    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(bank.len());
    for (i, (_, emb)) in bank.iter().enumerate() {
        scored.push((bank_loss(net, schedule, &fixed, emb)?, i));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // refine the top entries with a few projected gradient steps
    let mut candidates: Vec<(String, NumArray, f64)> = Vec::new();
    for &(loss, idx) in scored.iter().take(cfg.top_k) {
        let (name, emb) = &bank[idx];
        if cfg.refine_steps == 0 {
            candidates.push((name.clone(), emb.clone(), loss));
            continue;
        }
        let (refined, _, finite) = invert_embedding(
            net,
            schedule,
            &data,
            Some(emb),
            cfg.refine_steps,
            cfg.refine_lr,
            16,
            0.0,
            true,
            cfg.seed,
            &format!("attack/refine/{method}/{target}/{name}"),
        )?;
        let refined_loss = if finite { bank_loss(net, schedule, &fixed, &refined)? } else { loss };
        if refined_loss < loss {
            candidates.push((format!("{name}+refined"), refined, refined_loss));
        } else {
            candidates.push((name.clone(), emb.clone(), loss));
        }
    }
    candidates.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap());
    let (win_name, win_emb, win_loss) = candidates[0].clone();

    let proto = SamplerConfig::ddim(50, 0.0, cfg.guidance_scale, 0);
    let (acc, score, _) = eval_generations(
        net,
        schedule,
        world,
        &win_emb,
        target,
        &proto,
        cfg.n_eval_seeds,
        cfg.seed,
        &format!("attack/{method}/{target}/eval"),
        |_| SampleHooks::none(),
    )?;
    let cells = vec![ProbeCell {
        config: serde_json::json!({"winner": win_name, "denoise_loss": win_loss}),
        accuracy: acc,
        mean_score: score,
        n: cfg.n_eval_seeds,
    }];
    let report = ProbeReport {
        probe: "discrete_attack".into(),
        probe_class: ProbeClass::Optimization,
        method: method.to_string(),
        target: target.to_string(),
        best_score: 0.0,
        best_accuracy: 0.0,
        best_config: serde_json::Value::Null,
        n_seeds: cfg.n_eval_seeds,
        cells,
        unrelated_accuracy: None,
        samples: None,
        failure: None,
    };
    Ok(report.finalize())
}

//! Fine-tuning erasure methods: gradient ascent, ESD distillation toward a
//! negatively guided teacher, task-vector subtraction, and STEREO's
//! adversarial search-then-erase loop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{params_hash, ErasedModel, ErasureConfig, EsdScope, SnapshotCollector};
use crate::diffusion::{
    forward_noise, sample, train_step, NoiseSchedule, SampleHooks, SamplerConfig, ScoreNet,
    COND_PROJ,
};
use crate::probes::invert_embedding;
use crate::tensor::{optim_step, NumArray, OptimConfig, Tape};
use crate::world::ConceptWorld;
use crate::{rng, Result};

/// Target-concept samples generated by the base model itself (stochastic
/// DDIM, eta = 1), the fine-tuning data for ga / esd / task_vector / stereo.
pub fn sample_base_dataset(
    base: &ScoreNet,
    schedule: &NoiseSchedule,
    emb: &NumArray,
    n: usize,
    guidance_scale: f64,
    seed: u64,
    key: &str,
) -> Result<Vec<NumArray>> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = rng::derive_seed(seed, &format!("{key}/{i}"));
            let cfg = SamplerConfig::ddim(50, 1.0, guidance_scale, s);
            Ok(sample(base, schedule, emb, &cfg, &mut SampleHooks::none())?.x0)
        })
        .collect()
}

fn draw_batch<'a>(
    data: &'a [NumArray],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a NumArray> {
    (0..batch_size).map(|_| &data[rng.gen_range(0..data.len())]).collect()
}

/// Gradient ascent on the target concept: standard denoising training with
/// the sign flipped, on data the base model generated for the target. Stops
/// early if the loss magnitude crosses the divergence threshold, recording
/// the strength actually reached.
pub fn erase_ga(
    base: &ScoreNet,
    world: &ConceptWorld,
    schedule: &NoiseSchedule,
    cfg: &ErasureConfig,
) -> Result<ErasedModel> {
    let emb = world.embedding(&cfg.target)?.clone();
    let data = sample_base_dataset(
        base,
        schedule,
        &emb,
        cfg.n_train_data,
        3.0,
        cfg.seed,
        &format!("ga/data/{}", cfg.target),
    )?;
    let mut net = base.clone();
    net.params.reset_optimizer_state();
    let optim = OptimConfig::adam(cfg.lr);
    let mut r = rng::stream(cfg.seed, &format!("ga/train/{}", cfg.target));
    let mut collector = SnapshotCollector::new(&cfg.snapshot_strengths, cfg.steps);
    collector.collect(0, &net.params);
    let mut reached = cfg.steps;
    for step in 1..=cfg.steps {
        let batch: Vec<(NumArray, NumArray)> = draw_batch(&data, cfg.batch_size, &mut r)
            .into_iter()
            .map(|x| (x.clone(), emb.clone()))
            .collect();
        let loss = train_step(&mut net, schedule, &batch, &optim, true, &mut r)?;
        collector.collect(step, &net.params);
        if loss.abs() > cfg.divergence_threshold {
            reached = step;
            break;
        }
    }
    Ok(ErasedModel {
        net,
        config: cfg.clone(),
        checkpoints: collector.out,
        base_hash: params_hash(&base.params),
        reached_strength: reached as f64 / cfg.steps.max(1) as f64,
        adversarial_embeddings: Vec::new(),
    })
}

/// One ESD fine-tuning pass: move the student's conditional prediction for
/// each erase embedding toward the frozen teacher's negatively guided
/// target, optionally anchoring other concepts' predictions to the teacher.
#[allow(clippy::too_many_arguments)]
fn esd_finetune(
    student: &mut ScoreNet,
    teacher: &ScoreNet,
    schedule: &NoiseSchedule,
    targets: &[(NumArray, Vec<NumArray>)],
    anchors: &[(NumArray, Vec<NumArray>)],
    anchor_weight: f64,
    uncond_anchor_weight: f64,
    scope: EsdScope,
    steps: usize,
    lr: f64,
    batch_size: usize,
    negative_guidance: f64,
    rng: &mut ChaCha8Rng,
    collector: &mut SnapshotCollector,
    steps_done_before: usize,
) -> Result<()> {
    let optim = OptimConfig::adam(lr);
    let null = NumArray::zeros(vec![student.embed_dim]);
    let trainable = |name: &str| scope.trains(name);
    for step in 1..=steps {
        let mut tape = Tape::new();
        let mut losses = Vec::new();
        for (emb, data) in targets {
            for x0 in draw_batch(data, batch_size / targets.len().max(1), rng) {
                let t = rng.gen_range(0..schedule.t_count);
                let eps = NumArray::vector(rng::randn_vec(rng, student.dim));
                let xt = forward_noise(schedule, &student.to_latent(x0), t, &eps);
                let e_c = teacher.epsilon(schedule, &xt, t, emb)?;
                let e_u = teacher.epsilon(schedule, &xt, t, &null)?;
                let target_eps = e_u.add_scaled(&e_c.sub(&e_u), -negative_guidance);
                let xnode = tape.constant(&xt.data);
                let enode = tape.constant(&emb.data);
                let pred =
                    student.epsilon_on_tape(&mut tape, &trainable, schedule, xnode, t, enode)?;
                let tnode = tape.constant(&target_eps.data);
                let diff = tape.sub(pred, tnode);
                losses.push(tape.sum_sq(diff));
                if uncond_anchor_weight > 0.0 {
                    let null_node = tape.constant(&null.data);
                    let pred_u = student
                        .epsilon_on_tape(&mut tape, &trainable, schedule, xnode, t, null_node)?;
                    let anchor_u = tape.constant(&e_u.data);
                    let diff_u = tape.sub(pred_u, anchor_u);
                    let sq = tape.sum_sq(diff_u);
                    losses.push(tape.scale(sq, uncond_anchor_weight));
                }
            }
        }
        let n_target_losses = losses.len().max(1);
        let mut anchor_losses = Vec::new();
        if anchor_weight > 0.0 {
            for (emb, data) in anchors {
                for x0 in draw_batch(data, 2, rng) {
                    let t = rng.gen_range(0..schedule.t_count);
                    let eps = NumArray::vector(rng::randn_vec(rng, student.dim));
                    let xt = forward_noise(schedule, &student.to_latent(x0), t, &eps);
                    let anchor = teacher.epsilon(schedule, &xt, t, emb)?;
                    let xnode = tape.constant(&xt.data);
                    let enode = tape.constant(&emb.data);
                    let pred = student
                        .epsilon_on_tape(&mut tape, &trainable, schedule, xnode, t, enode)?;
                    let tnode = tape.constant(&anchor.data);
                    let diff = tape.sub(pred, tnode);
                    anchor_losses.push(tape.sum_sq(diff));
                }
            }
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l);
        }
        let mut loss = tape.scale(total, 1.0 / n_target_losses as f64);
        if !anchor_losses.is_empty() {
            let mut a_total = anchor_losses[0];
            for &l in &anchor_losses[1..] {
                a_total = tape.add(a_total, l);
            }
            let a_mean = tape.scale(a_total, anchor_weight / anchor_losses.len() as f64);
            loss = tape.add(loss, a_mean);
        }
        if !tape.value(loss)[0].is_finite() {
            return Err(crate::Error::NonFinite("esd loss".into()));
        }
        tape.backward(loss)?;
        tape.write_param_grads(&mut student.params)?;
        optim_step(&mut student.params, &optim)?;
        student.params.zero_grads();
        collector.collect(steps_done_before + step, &student.params);
    }
    Ok(())
}

/// ESD: fine-tune toward `eps_u - ng * (eps_c - eps_u)` from a frozen base
/// teacher. Scope x touches only the conditioning projection; scope u
/// touches everything else.
pub fn erase_esd(
    base: &ScoreNet,
    world: &ConceptWorld,
    schedule: &NoiseSchedule,
    cfg: &ErasureConfig,
    scope: EsdScope,
) -> Result<ErasedModel> {
    let emb = world.embedding(&cfg.target)?.clone();
    let data = sample_base_dataset(
        base,
        schedule,
        &emb,
        cfg.n_train_data,
        3.0,
        cfg.seed,
        &format!("esd/data/{}", cfg.target),
    )?;
    let mut student = base.clone();
    student.params.reset_optimizer_state();
    let mut r = rng::stream(cfg.seed, &format!("esd/train/{}", cfg.target));
    let mut collector = SnapshotCollector::new(&cfg.snapshot_strengths, cfg.steps);
    collector.collect(0, &student.params);
    esd_finetune(
        &mut student,
        base,
        schedule,
        &[(emb, data)],
        &[],
        0.0,
        cfg.uncond_anchor_weight,
        scope,
        cfg.steps,
        cfg.lr,
        cfg.batch_size,
        cfg.negative_guidance,
        &mut r,
        &mut collector,
        0,
    )?;
    Ok(ErasedModel {
        net: student,
        config: cfg.clone(),
        checkpoints: collector.out,
        base_hash: params_hash(&base.params),
        reached_strength: 1.0,
        adversarial_embeddings: Vec::new(),
    })
}

/// Task vector: fine-tune a copy toward the target concept, then subtract
/// the parameter delta scaled by alpha. The fine-tuning set is the base
/// model's own target generations tightened toward their centroid
/// (canonical exemplars), so the delta carries genuine concept attraction
/// whose reversal repels. The strength dial scales alpha linearly, so
/// snapshots are exact affine combinations.
pub fn erase_task_vector(
    base: &ScoreNet,
    world: &ConceptWorld,
    schedule: &NoiseSchedule,
    cfg: &ErasureConfig,
) -> Result<ErasedModel> {
    let emb = world.embedding(&cfg.target)?.clone();
    let raw = sample_base_dataset(
        base,
        schedule,
        &emb,
        cfg.n_train_data,
        3.0,
        cfg.seed,
        &format!("tv/data/{}", cfg.target),
    )?;
    let mut mean = NumArray::zeros(vec![base.dim]);
    for x in &raw {
        mean = mean.add(x);
    }
    mean = mean.scale(1.0 / raw.len() as f64);
    let data: Vec<NumArray> = raw
        .iter()
        .map(|x| mean.add_scaled(&x.sub(&mean), cfg.tv_sharpen))
        .collect();
    let mut ft = base.clone();
    ft.params.reset_optimizer_state();
    let optim = OptimConfig::adam(cfg.lr);
    let mut r = rng::stream(cfg.seed, &format!("tv/train/{}", cfg.target));
    for _ in 0..cfg.steps {
        let batch: Vec<(NumArray, NumArray)> = draw_batch(&data, cfg.batch_size, &mut r)
            .into_iter()
            .map(|x| (x.clone(), emb.clone()))
            .collect();
        train_step(&mut ft, schedule, &batch, &optim, false, &mut r)?;
    }
    let base_flat = base.params.flatten();
    let ft_flat = ft.params.flatten();
    let delta: Vec<f64> = ft_flat.iter().zip(&base_flat).map(|(f, b)| f - b).collect();
    let apply = |alpha: f64| -> crate::tensor::ParamStore {
        let mut params = base.params.clone();
        if alpha != 0.0 {
            let edited: Vec<f64> =
                base_flat.iter().zip(&delta).map(|(b, d)| b - alpha * d).collect();
            params.unflatten(&edited);
        }
        params
    };
    let mut strengths = cfg.snapshot_strengths.clone();
    strengths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let checkpoints: Vec<(f64, crate::tensor::ParamStore)> =
        strengths.iter().map(|&s| (s, apply(s * cfg.alpha_tv))).collect();
    Ok(ErasedModel {
        net: base.with_params(apply(cfg.strength * cfg.alpha_tv)),
        config: cfg.clone(),
        checkpoints,
        base_hash: params_hash(&base.params),
        reached_strength: 1.0,
        adversarial_embeddings: Vec::new(),
    })
}

/// STEREO analog. Stage 1 repeats: invert an embedding that still triggers
/// the target on the current model, add it to the erase list, run an ESD
/// pass against it. Stage 2 runs one ESD pass over all collected embeddings
/// with a distillation anchor holding the other concepts to the base model.
/// With zero rounds and zero anchor weight this is exactly [`erase_esd`].
pub fn erase_stereo(
    base: &ScoreNet,
    world: &ConceptWorld,
    schedule: &NoiseSchedule,
    cfg: &ErasureConfig,
) -> Result<ErasedModel> {
    if cfg.stereo_rounds == 0 && cfg.stereo_anchor_weight == 0.0 {
        let mut out = erase_esd(base, world, schedule, cfg, EsdScope::Unet)?;
        out.config = cfg.clone();
        return Ok(out);
    }
    let emb = world.embedding(&cfg.target)?.clone();
    let data = sample_base_dataset(
        base,
        schedule,
        &emb,
        cfg.n_train_data,
        3.0,
        cfg.seed,
        &format!("esd/data/{}", cfg.target),
    )?;
    let heldout = world.sample_data(
        Some(&cfg.target),
        64,
        rng::derive_seed(cfg.seed, &format!("stereo/heldout/{}", cfg.target)),
    )?;
    let mut anchors = Vec::new();
    for c in &world.concepts {
        if c.name == cfg.target {
            continue;
        }
        let xs = world.sample_data(
            Some(&c.name),
            32,
            rng::derive_seed(cfg.seed, &format!("stereo/anchor/{}", c.name)),
        )?;
        anchors.push((world.embedding(&c.name)?.clone(), xs));
    }

    let total_steps = cfg.steps * (cfg.stereo_rounds + 1);
    let mut collector = SnapshotCollector::new(&cfg.snapshot_strengths, total_steps);
    let mut student = base.clone();
    student.params.reset_optimizer_state();
    collector.collect(0, &student.params);
    let mut r = rng::stream(cfg.seed, &format!("stereo/train/{}", cfg.target));
    let mut targets: Vec<(NumArray, Vec<NumArray>)> = vec![(emb.clone(), data.clone())];
    let mut adversarial = Vec::new();
    let mut steps_done = 0;

    // stage 1: adversarial search then erase
    for round in 0..cfg.stereo_rounds {
        let (e_adv, _, finite) = invert_embedding(
            &student,
            schedule,
            &heldout,
            None,
            200,
            5e-2,
            16,
            0.01,
            false,
            cfg.seed,
            &format!("stereo/attack/{}/{round}", cfg.target),
        )?;
        if !finite {
            break;
        }
        // does the recovered embedding still trigger the concept?
        let mut hits = 0;
        let check_n = 16;
        for i in 0..check_n {
            let s = rng::derive_seed(cfg.seed, &format!("stereo/check/{}/{round}/{i}", cfg.target));
            let out = sample(
                &student,
                schedule,
                &e_adv,
                &SamplerConfig::ddim(50, 0.0, 3.0, s),
                &mut SampleHooks::none(),
            )?;
            if world.oracle(&out.x0, &cfg.target)?.top_concept == cfg.target {
                hits += 1;
            }
        }
        if (hits as f64) < 0.1 * check_n as f64 {
            break; // attack no longer recovers the concept
        }
        adversarial.push(e_adv.clone());
        targets.push((e_adv, data.clone()));
        esd_finetune(
            &mut student,
            base,
            schedule,
            &targets,
            &[],
            0.0,
            cfg.uncond_anchor_weight,
            EsdScope::Unet,
            cfg.steps,
            cfg.lr,
            cfg.batch_size,
            cfg.negative_guidance,
            &mut r,
            &mut collector,
            steps_done,
        )?;
        steps_done += cfg.steps;
    }

    // stage 2: compositional pass with the preservation anchor
    esd_finetune(
        &mut student,
        base,
        schedule,
        &targets,
        &anchors,
        cfg.stereo_anchor_weight,
        cfg.uncond_anchor_weight,
        EsdScope::Unet,
        total_steps - steps_done,
        cfg.lr,
        cfg.batch_size,
        cfg.negative_guidance,
        &mut r,
        &mut collector,
        steps_done,
    )?;
    Ok(ErasedModel {
        net: student,
        config: cfg.clone(),
        checkpoints: collector.out,
        base_hash: params_hash(&base.params),
        reached_strength: 1.0,
        adversarial_embeddings: adversarial,
    })
}

//! Shared fixtures for unit tests: trained base models are expensive, so the
//! whole test binary trains each one once.

use once_cell::sync::Lazy;

use crate::diffusion::{train_base, BaseTrainConfig, NoiseSchedule, ScoreNet};
use crate::world::{make_world, ConceptWorld};

pub struct BaseFixture {
    pub world: ConceptWorld,
    pub schedule: NoiseSchedule,
    pub net: ScoreNet,
}

static RING8: Lazy<BaseFixture> = Lazy::new(|| {
    let world = make_world(0, "ring8").unwrap();
    let schedule = NoiseSchedule::standard();
    let net = train_base(&world, &schedule, &BaseTrainConfig::default()).unwrap();
    BaseFixture { world, schedule, net }
});

pub fn ring8_base() -> &'static BaseFixture {
    &RING8
}

#[cfg(test)]
mod fixture_tests {
    use super::*;
    use crate::diffusion::{
        denoise_loss, make_eval_draws, sample, train_base, BaseTrainConfig, SampleHooks,
        SamplerConfig, ScoreNet, ScoreNetConfig,
    };
    use crate::rng;

    // Training-run oracle: held-out denoising loss after the default recipe
    // drops below 0.15x its value at initialization. Timesteps are stratified
    // so every noise level contributes equally to the estimate.
    #[test]
    fn base_training_crushes_heldout_loss() {
        let fx = ring8_base();
        let fresh = ScoreNet::new(&fx.world, ScoreNetConfig::default(), 0);
        let mut draws = Vec::new();
        let mut r = rng::stream(555, "heldout-eps");
        for c in &fx.world.concepts {
            let x0s = fx.world.sample_data(Some(&c.name), 25, 555).unwrap();
            let emb = fx.world.embedding(&c.name).unwrap();
            for (i, x0) in x0s.iter().enumerate() {
                for j in 0..4 {
                    draws.push(crate::diffusion::TrainDraw {
                        x0_world: x0.clone(),
                        emb: emb.clone(),
                        t: (i * 4 + j) % fx.schedule.t_count,
                        eps: crate::tensor::NumArray::vector(rng::randn_vec(&mut r, 2)),
                    });
                }
            }
        }
        let before = denoise_loss(&fresh, &fx.schedule, &draws).unwrap();
        let after = denoise_loss(&fx.net, &fx.schedule, &draws).unwrap();
        assert!(
            after < 0.15 * before,
            "held-out loss {after} not below 0.15 * initial {before}"
        );
    }

    // Base-model fidelity: conditional DDIM eta=0 lands in the right mode.
    #[test]
    fn conditional_sampling_hits_target_mode() {
        let fx = ring8_base();
        let mut hits = 0;
        let n = 200;
        for concept_idx in 0..2 {
            let name = fx.world.concepts[concept_idx].name.clone();
            let emb = fx.world.embedding(&name).unwrap().clone();
            for i in 0..n / 2 {
                let seed = rng::derive_seed(900, &format!("fidelity/{name}/{i}"));
                let cfg = SamplerConfig::ddim(50, 0.0, 3.0, seed);
                let s = sample(&fx.net, &fx.schedule, &emb, &cfg, &mut SampleHooks::none())
                    .unwrap();
                let v = fx.world.oracle(&s.x0, &name).unwrap();
                if v.top_concept == name {
                    hits += 1;
                }
            }
        }
        let acc = hits as f64 / n as f64;
        assert!(acc >= 0.95, "conditional accuracy {acc}");
    }

    // Distributional sanity: unconditional per-mode frequencies stay within
    // +-10% absolute of the mixture weights.
    #[test]
    fn unconditional_mode_frequencies_match_weights() {
        let fx = ring8_base();
        let n = 2000;
        let null = fx.world.null_embedding();
        let mut counts = vec![0usize; fx.world.n_concepts()];
        for i in 0..n {
            let seed = rng::derive_seed(901, &format!("uncond/{i}"));
            let cfg = SamplerConfig::ddim(50, 0.0, 0.0, seed);
            let s = sample(&fx.net, &fx.schedule, &null, &cfg, &mut SampleHooks::none()).unwrap();
            let v = fx.world.oracle(&s.x0, "c0").unwrap();
            counts[fx.world.concept_index(&v.top_concept).unwrap()] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - 0.125).abs() <= 0.10,
                "mode {k} frequency {freq} strays more than 0.10 from 0.125"
            );
        }
    }

    // Two-mode world trains quickly; reused by steering tests.
    #[test]
    fn pair2_base_trains_to_high_fidelity() {
        let world = make_world(0, "pair2").unwrap();
        let schedule = NoiseSchedule::standard();
        let cfg = BaseTrainConfig { steps: 1500, ..Default::default() };
        let net = train_base(&world, &schedule, &cfg).unwrap();
        let mut hits = 0;
        for i in 0..50 {
            let seed = rng::derive_seed(902, &format!("pair2/{i}"));
            let s = sample(
                &net,
                &schedule,
                world.embedding("left").unwrap(),
                &SamplerConfig::ddim(50, 0.0, 3.0, seed),
                &mut SampleHooks::none(),
            )
            .unwrap();
            if world.oracle(&s.x0, "left").unwrap().top_concept == "left" {
                hits += 1;
            }
        }
        assert!(hits >= 47, "pair2 fidelity {hits}/50");
    }
}

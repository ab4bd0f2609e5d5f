use eraselab::diffusion::*;
use eraselab::erasure::*;
use eraselab::probes::*;
use eraselab::world::make_world;
use once_cell::sync::Lazy;

struct Fx {
    world: eraselab::world::ConceptWorld,
    schedule: NoiseSchedule,
    net: ScoreNet,
}
static FX: Lazy<Fx> = Lazy::new(|| {
    let world = make_world(0, "ring8").unwrap();
    let schedule = NoiseSchedule::standard();
    let net = train_base(&world, &schedule, &BaseTrainConfig::default()).unwrap();
    Fx { world, schedule, net }
});

fn full_row(label: &str, net: &ScoreNet) {
    let fx = &*FX;
    let emb = fx.world.embedding("c0").unwrap();
    let (cond, _, _) = eval_generations(net, &fx.schedule, &fx.world, emb, "c0",
        &SamplerConfig::ddim(50, 0.0, 3.0, 0), 100, 999, &format!("{label}/cond"), |_| SampleHooks::none()).unwrap();
    let grid = NoiseProbeGrid { seeds_per_cell: 100, ..Default::default() };
    let noise = probe_noise(net, &fx.schedule, &fx.world, "c0", label, &grid, 1.0, 50, 77).unwrap();
    let ccfg = CompletionConfig { n_seeds: 100, guidance_scale: 5.0, ..Default::default() };
    let comp = probe_completion(&fx.net, net, &fx.schedule, &fx.world, "c0", label, &ccfg).unwrap();
    let inv_cfg = InversionConfig { n_eval_seeds: 100, ..Default::default() };
    let inv = probe_embedding_inversion(net, &fx.schedule, &fx.world, "c0", label, &inv_cfg).unwrap();
    let unrel = measure_unrelated(net, &fx.schedule, &fx.world, "c0", 50, 3.0, 4).unwrap();
    println!("{label}: cond={cond:.3} inv={:.3} noise={:.3} comp5={:.3} comp10={:.3} unrel={unrel:.3}",
        inv.best_accuracy, noise.best_accuracy, comp.cells[0].accuracy, comp.cells[1].accuracy);
}

#[test]
fn tune_methods() {
    let fx = &*FX;
    for (steps, lr) in [(300usize, 2e-3), (500, 2e-3)] {
        let mut cfg = ErasureConfig::defaults(MethodKind::TaskVector, "c0");
        cfg.steps = steps;
        cfg.lr = lr;
        let er = erase(&fx.net, &fx.world, &fx.schedule, &cfg).unwrap();
        full_row(&format!("tv-uncond[{steps}@{lr}]"), &er.net);
    }
    for ng in [0.15, 0.3, 0.5] {
        let mut cfg = ErasureConfig::defaults(MethodKind::EsdX, "c0");
        cfg.negative_guidance = ng;
        let er = erase(&fx.net, &fx.world, &fx.schedule, &cfg).unwrap();
        full_row(&format!("esdx[ng{ng}]"), &er.net);
    }
    for (ng, anchor) in [(0.3, 1.0), (0.5, 1.0)] {
        let mut cfg = ErasureConfig::defaults(MethodKind::EsdU, "c0");
        cfg.negative_guidance = ng;
        cfg.uncond_anchor_weight = anchor;
        cfg.steps = 250;
        cfg.lr = 5e-4;
        let er = erase(&fx.net, &fx.world, &fx.schedule, &cfg).unwrap();
        full_row(&format!("esdu[ng{ng}/a{anchor}]"), &er.net);
    }
}

//! Conditional denoising diffusion: noise schedule, forward noising, the
//! conditional score network with classifier-free guidance, and the reverse
//! samplers (DDIM with eta, plus the over-noised probing variant).

mod net;
mod sampler;

pub use net::{
    denoise_loss, make_eval_draws, train_base, train_step, train_step_with, BaseTrainConfig,
    ScoreNet, ScoreNetConfig, TrainDraw, COND_PROJ,
};
pub use sampler::{
    ddim_step, ddim_step_between, noise_probe_step, noise_probe_step_between, sample,
    sample_with_handoff, sampling_timesteps, Sample, SampleHooks, SamplerConfig, SamplerKind,
    StepCtx, TrajPoint,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::NumArray;
use crate::{Error, Result};

/// Per-timestep beta/alpha tables for a linear DDPM schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linear beta schedule with cumulative-product alpha_bar.
pub fn make_schedule(t_count: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_count < 2 {
        return Err(Error::invalid("schedule needs at least 2 timesteps"));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::invalid("need 0 < beta_start < beta_end < 1"));
    }
    let mut beta = Vec::with_capacity(t_count);
    for t in 0..t_count {
        beta.push(beta_start + (beta_end - beta_start) * t as f64 / (t_count - 1) as f64);
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_count);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { t_count, beta_start, beta_end, beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    /// The crate default: T=100, linear beta in [1e-4, 0.02].
    pub fn standard() -> Self {
        make_schedule(100, 1e-4, 0.02).expect("standard schedule")
    }

    /// DDIM noise level for the step t -> t-1 at the given eta;
    /// `sigma(t, 0) == 0` for every t.
    pub fn sigma(&self, t: usize, eta: f64) -> f64 {
        if t == 0 {
            return 0.0;
        }
        sigma_between(self.alpha_bar[t], self.alpha_bar[t - 1], eta)
    }

    /// Identifies the schedule (classifier checkpoints pin this).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.t_count.to_le_bytes());
        h.update(self.beta_start.to_le_bytes());
        h.update(self.beta_end.to_le_bytes());
        crate::tensor::hex_string(&h.finalize())
    }
}

/// DDIM sigma for a jump from noise level `ab_hi` (more noise) to `ab_lo`.
pub fn sigma_between(ab_hi: f64, ab_lo: f64, eta: f64) -> f64 {
    if ab_lo >= 1.0 {
        return 0.0;
    }
    eta * ((1.0 - ab_lo) / (1.0 - ab_hi)).sqrt() * (1.0 - ab_hi / ab_lo).sqrt()
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise`.
pub fn forward_noise(
    schedule: &NoiseSchedule,
    x0: &NumArray,
    t: usize,
    noise: &NumArray,
) -> NumArray {
    let ab = schedule.alpha_bar[t];
    x0.scale(ab.sqrt()).add_scaled(noise, (1.0 - ab).sqrt())
}

//! Cosine noise schedule, forward noising and the deterministic DDIM update.

use serde::{Deserialize, Serialize};

use super::Latent;
use crate::{Error, Result};

/// Lower clamp on ᾱ so `1/√ᾱ` stays bounded.
pub const ALPHA_FLOOR: f64 = 1e-5;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    fn checked_alpha(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod.get(t).copied().ok_or_else(|| {
            Error::invalid(format!("timestep {t} out of range for T={}", self.num_steps()))
        })
    }
}

/// `ᾱ_t = f(t)/f(0)` with `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`, `s = 0.008`,
/// clamped to `[1e-5, 1]`.
pub fn cosine_schedule(num_steps: usize) -> Result<NoiseSchedule> {
    if num_steps < 2 {
        return Err(Error::invalid(format!(
            "schedule needs at least 2 steps, got {num_steps}"
        )));
    }
    let f = |t: f64| {
        let arg = (t / num_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
            * std::f64::consts::FRAC_PI_2;
        arg.cos().powi(2)
    };
    let f0 = f(0.0);
    let alphas_cumprod = (0..num_steps)
        .map(|t| (f(t as f64) / f0).clamp(ALPHA_FLOOR, 1.0))
        .collect();
    Ok(NoiseSchedule { alphas_cumprod })
}

/// Forward process `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn add_noise(x0: &Latent, t: usize, eps: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    let a = sched.checked_alpha(t)?;
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    let data = x0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(x, e)| sa * x + sb * e)
        .collect();
    Ok(Latent(data))
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev`; `None` means the
/// fully denoised endpoint with ᾱ = 1.
pub fn ddim_step(
    x_t: &Latent,
    eps_hat: &Latent,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    let a_t = sched.checked_alpha(t)?;
    let a_prev = match t_prev {
        Some(p) => {
            if p >= t {
                return Err(Error::invalid(format!(
                    "t_prev ({p}) must be smaller than t ({t})"
                )));
            }
            sched.checked_alpha(p)?
        }
        None => 1.0,
    };
    if !(a_t >= ALPHA_FLOOR) {
        return Err(Error::numeric(
            "sampler",
            format!("alpha_bar({t}) = {a_t} below clamp floor"),
        ));
    }
    // Folded form of √ᾱ_prev·x̂0 + √(1−ᾱ_prev)·ε̂; exact when ᾱ_prev = ᾱ_t.
    let ratio = (a_prev / a_t).sqrt();
    let eps_coef = (1.0 - a_prev).sqrt() - ratio * (1.0 - a_t).sqrt();
    let data = x_t
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .map(|(x, e)| ratio * x + eps_coef * e)
        .collect();
    Ok(Latent(data))
}

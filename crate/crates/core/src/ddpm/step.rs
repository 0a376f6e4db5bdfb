use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reverse-time update rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SamplerKind {
    /// Ancestral sampling from the Gaussian posterior.
    Ddpm,
    /// Non-Markovian update; `eta = 0` is deterministic.
    Ddim { eta: f64 },
}

/// `x_t = √ᾱ_t·x0 + √(1-ᾱ_t)·ε`.
pub fn forward_sample(s: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    x0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Clean estimate implied by a noise prediction.
pub fn eps_to_x0(s: &NoiseSchedule, x_t: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    x_t.zip_map(eps, |x, e| (x - (1.0 - ab).sqrt() * e) / ab.sqrt())
}

/// Noise implied by a clean estimate.
pub fn x0_to_eps(s: &NoiseSchedule, x_t: &Tensor, t: usize, x0: &Tensor) -> Result<Tensor> {
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    x_t.zip_map(x0, |x, c| (x - ab.sqrt() * c) / (1.0 - ab).sqrt())
}

/// Mean of `q(x_{t-1} | x_t, x0)`.
pub fn posterior_mean(s: &NoiseSchedule, x_t: &Tensor, x0_hat: &Tensor, t: usize) -> Result<Tensor> {
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t - 1);
    let c0 = ab_prev.sqrt() * s.beta(t) / (1.0 - ab);
    let ct = s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    x0_hat.lincomb(c0, x_t, ct)
}

/// One ancestral step `x_t → x_{t-1}`.
///
/// At `t = 1` the posterior collapses onto the clean estimate, which is
/// returned unchanged. Otherwise the result is `μ̃ + √β̃_t·noise`; with
/// `noise = None` the mean itself.
pub fn posterior_step(
    s: &NoiseSchedule,
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    s.check_t(t)?;
    x_t.same_shape(x0_hat)?;
    if t == 1 {
        return Ok(x0_hat.clone());
    }
    let mean = posterior_mean(s, x_t, x0_hat, t)?;
    match noise {
        Some(z) => mean.lincomb(1.0, z, s.posterior_var(t).sqrt()),
        None => Ok(mean),
    }
}

/// One DDIM step `x_t → x_{t_prev}`. With `eta = 0` the noise argument is
/// ignored; with `t_prev = 0` the clean estimate is returned unchanged.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    s: &NoiseSchedule,
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    s.check_t(t)?;
    x_t.same_shape(x0_hat)?;
    if t_prev >= t {
        return Err(Error::Timestep {
            t: t_prev,
            reason: format!("previous step must precede {t}"),
        });
    }
    if t_prev == 0 {
        return Ok(x0_hat.clone());
    }
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t_prev);
    let eps = x0_to_eps(s, x_t, t, x0_hat)?;
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let base = x0_hat.lincomb(ab_prev.sqrt(), &eps, dir)?;
    match noise {
        Some(z) if eta != 0.0 => base.lincomb(1.0, z, sigma),
        _ => Ok(base),
    }
}

/// Whether a step landing on `t_prev` consumes fresh noise.
pub fn step_needs_noise(sampler: SamplerKind, t_prev: usize) -> bool {
    match sampler {
        SamplerKind::Ddpm => t_prev > 0,
        SamplerKind::Ddim { eta } => eta != 0.0 && t_prev > 0,
    }
}

/// Sampler-dispatched step. Strided ancestral sampling (`t_prev < t - 1`)
/// uses the DDIM update with `eta = 1`, which reduces to the posterior step
/// on adjacent indices.
pub fn reverse_step(
    sampler: SamplerKind,
    s: &NoiseSchedule,
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    match sampler {
        SamplerKind::Ddpm if t_prev + 1 == t => posterior_step(s, x_t, x0_hat, t, noise),
        SamplerKind::Ddpm => ddim_step(s, x_t, x0_hat, t, t_prev, 1.0, noise),
        SamplerKind::Ddim { eta } => ddim_step(s, x_t, x0_hat, t, t_prev, eta, noise),
    }
}

/// Descending `(t, t_prev)` pairs for sampling `steps` of a `T`-step
/// schedule: `τ_i = round(i·T/steps)`, ending at `t_prev = 0`.
pub fn timestep_pairs(t_max: usize, steps: usize) -> Result<Vec<(usize, usize)>> {
    if steps == 0 || steps > t_max {
        return Err(Error::config(format!(
            "sampling steps must lie in 1..={t_max}, got {steps}"
        )));
    }
    let tau = |i: usize| ((i * t_max) as f64 / steps as f64).round() as usize;
    Ok((1..=steps).rev().map(|i| (tau(i), tau(i - 1))).collect())
}

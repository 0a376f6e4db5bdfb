use serde::{Deserialize, Serialize};

use super::engine::NfeReport;
use crate::ddpm::SamplerKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Parallel,
    Alternating,
    Nested,
    BaselineNoisy,
    BaselineEnhanced,
    BaselineCard,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Parallel => "parallel",
            Strategy::Alternating => "alternating",
            Strategy::Nested => "nested",
            Strategy::BaselineNoisy => "noisy",
            Strategy::BaselineEnhanced => "enhanced",
            Strategy::BaselineCard => "card",
        }
    }

    pub fn is_coupled(&self) -> bool {
        matches!(self, Strategy::Parallel | Strategy::Alternating | Strategy::Nested)
    }
}

/// Which signal carries the cross-conditioning in per-step coupling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSource {
    /// `ŷ₀^{(t+1)}` for the signal net, `x̂₀^{(t)}` for the logit net.
    #[default]
    CleanEstimate,
    /// `y_t` for the signal net, `x_{t-1}` for the logit net.
    NoisySample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub strategy: Strategy,
    /// Reverse steps per trajectory; at most the schedule length.
    pub steps: usize,
    pub sampler: SamplerKind,
    /// Leading fraction of a per-step-coupled trajectory that runs with the
    /// cross slots zero-filled.
    pub warmup_fraction: f64,
    /// Block iterations of the alternating strategy.
    pub iterations: usize,
    /// Step index at and below which the nested inner chain is re-run.
    pub t_switch: usize,
    pub refresh_every: usize,
    pub guidance: GuidanceSource,
}

impl CouplingConfig {
    pub fn new(strategy: Strategy, steps: usize) -> Self {
        Self {
            strategy,
            steps,
            sampler: SamplerKind::Ddpm,
            warmup_fraction: 0.5,
            iterations: 5,
            t_switch: steps * 2 / 3,
            refresh_every: (steps * 2 / 15).max(1),
            guidance: GuidanceSource::CleanEstimate,
        }
    }

    pub fn validate(&self, schedule_len: usize) -> Result<()> {
        if self.steps == 0 || self.steps > schedule_len {
            return Err(Error::config(format!(
                "steps must lie in 1..={schedule_len}, got {}",
                self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction must lie in [0, 1]"));
        }
        if self.iterations == 0 {
            return Err(Error::config("alternating iterations must be at least 1"));
        }
        if self.t_switch > self.steps {
            return Err(Error::config("t_switch must not exceed the step count"));
        }
        if self.refresh_every == 0 {
            return Err(Error::config("refresh_every must be at least 1"));
        }
        if let SamplerKind::Ddim { eta } = self.sampler {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::config("ddim eta must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Leading steps with coupling disabled: `⌊w·steps⌋`, so the coupled
    /// tail has `⌈(1−w)·steps⌉` steps.
    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.steps as f64) + 1e-9).floor() as usize
    }

    /// Whether reverse step number `i` (counting down from `steps` to 1)
    /// runs with coupling on.
    pub fn coupled_at(&self, i: usize) -> bool {
        i + self.warmup_steps() <= self.steps
    }

    /// The same config with `steps` rescaled and the nested switch points
    /// scaled proportionally.
    pub fn rescaled(&self, steps: usize) -> Self {
        let f = steps as f64 / self.steps as f64;
        Self {
            steps,
            t_switch: ((self.t_switch as f64 * f).round() as usize).min(steps),
            refresh_every: ((self.refresh_every as f64 * f).round() as usize).max(1),
            ..*self
        }
    }
}

/// Step indices at which the nested strategy re-runs its inner chain.
pub fn nested_refresh_steps(cfg: &CouplingConfig) -> Vec<usize> {
    (1..=cfg.steps)
        .rev()
        .filter(|&i| i <= cfg.t_switch && (cfg.t_switch - i) % cfg.refresh_every == 0)
        .collect()
}

/// Closed-form call ledger for one run.
pub fn expected_nfe(cfg: &CouplingConfig) -> NfeReport {
    let s = cfg.steps as u64;
    let n = cfg.iterations as u64;
    let (x, y, c) = match cfg.strategy {
        Strategy::Parallel => (s, s, 1 + (cfg.steps - cfg.warmup_steps()) as u64),
        Strategy::Alternating => (n * s, n * s, 1 + n),
        Strategy::Nested => {
            let r = nested_refresh_steps(cfg).len() as u64;
            ((1 + r) * s, s, 1 + r)
        }
        Strategy::BaselineNoisy => (0, 0, 1),
        Strategy::BaselineEnhanced => (s, 0, 1),
        Strategy::BaselineCard => (0, s, 1),
    };
    NfeReport {
        denoiser_x_calls: x,
        denoiser_y_calls: y,
        classifier_calls: c,
    }
}

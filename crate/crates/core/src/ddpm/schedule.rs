use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA_MIN: f64 = 1e-5;
pub const BETA_MAX: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScheduleKind {
    /// Squared-cosine cumulative signal level.
    Cosine,
    /// Evenly spaced betas from `beta_start` to `beta_end`.
    Linear { beta_start: f64, beta_end: f64 },
}

impl ScheduleKind {
    /// Linear betas scaled so `T` steps span the usual 1000-step range.
    pub fn linear_scaled(t: usize) -> Self {
        let s = 1000.0 / t.max(1) as f64;
        ScheduleKind::Linear {
            beta_start: (1e-4 * s).min(BETA_MAX),
            beta_end: (0.02 * s).min(BETA_MAX),
        }
    }
}

/// Per-step coefficients, indexed by `t` in `0..=T`. Index 0 is the clean
/// state: `beta = 0`, `alpha_bar = 1`, zero posterior variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let mut betas = vec![0.0];
        match kind {
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let u = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (u * FRAC_PI_2).cos().powi(2)
                };
                for t in 1..=t_max {
                    let b = 1.0 - f(t) / f(t - 1);
                    betas.push(b.clamp(BETA_MIN, BETA_MAX));
                }
            }
            ScheduleKind::Linear {
                beta_start,
                beta_end,
            } => {
                if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
                    return Err(Error::config(format!(
                        "linear betas need 0 < start <= end < 1, got {beta_start}..{beta_end}"
                    )));
                }
                if t_max == 1 {
                    betas.push(beta_end);
                } else {
                    for i in 0..t_max {
                        let u = i as f64 / (t_max - 1) as f64;
                        betas.push(beta_start + u * (beta_end - beta_start));
                    }
                }
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0];
        for t in 1..=t_max {
            alpha_bars.push(alpha_bars[t - 1] * alphas[t]);
        }
        let mut posterior_vars = vec![0.0];
        for t in 1..=t_max {
            posterior_vars.push((1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t]);
        }
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t]
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Timestep {
                t,
                reason: format!("must lie in 1..={}", self.len()),
            });
        }
        Ok(())
    }

    /// Whitespace-separated table, one row per step.
    pub fn dump(&self) -> String {
        let mut s = String::from("t\tbeta\talpha\talpha_bar\tposterior_var\n");
        for t in 0..=self.len() {
            writeln!(
                s,
                "{t}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}",
                self.betas[t], self.alphas[t], self.alpha_bars[t], self.posterior_vars[t]
            )
            .expect("writing to a String");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_steps_rejected() {
        assert!(NoiseSchedule::new(ScheduleKind::Cosine, 0).is_err());
    }

    #[test]
    fn cosine_150_ends_near_pure_noise() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 150).unwrap();
        assert!(s.alpha_bar(150) < 0.01);
    }

    #[test]
    fn single_linear_step_uses_configured_max() {
        let s = NoiseSchedule::new(
            ScheduleKind::Linear {
                beta_start: 1e-4,
                beta_end: 0.3,
            },
            1,
        )
        .unwrap();
        assert_eq!(s.beta(1), 0.3);
    }

    #[test]
    fn dump_has_one_row_per_step() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 10).unwrap();
        assert_eq!(s.dump().lines().count(), 12);
    }

    fn check_invariants(s: &NoiseSchedule) {
        for t in 1..=s.len() {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let prod: f64 = (1..=t).map(|k| 1.0 - s.beta(k)).product();
            assert!((s.alpha_bar(t) - prod).abs() <= 1e-12 * prod.max(1e-300).max(1.0));
            assert!(s.posterior_var(t) >= 0.0 && s.posterior_var(t) <= s.beta(t));
        }
        assert_eq!(s.posterior_var(1), 0.0);
    }

    proptest! {
        #[test]
        fn schedule_invariants_hold(t in 1usize..400, linear in any::<bool>()) {
            let kind = if linear { ScheduleKind::linear_scaled(t) } else { ScheduleKind::Cosine };
            check_invariants(&NoiseSchedule::new(kind, t).unwrap());
        }
    }
}

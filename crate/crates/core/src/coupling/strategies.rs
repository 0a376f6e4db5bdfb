use serde::{Deserialize, Serialize};

use super::config::{nested_refresh_steps, CouplingConfig, GuidanceSource, Strategy};
use super::engine::{Engine, NfeReport};
use super::trace::{Trace, TraceKind};
use crate::denoisers::{DenoiserBundle, XCond, YCond};
use crate::error::{Error, Result};
use crate::rng::SamplingStreams;
use crate::tensor::Tensor;

/// Final logits of a run, the signal estimate when the run produces one, and
/// the per-example ledger.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub y_hat: Tensor,
    pub x_hat: Option<Tensor>,
    pub nfe: NfeReport,
    pub trace: Trace,
}

impl RunOutput {
    pub fn predictions(&self) -> Vec<usize> {
        self.y_hat.argmax_rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Noisy,
    Enhanced,
    Card,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict_class(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn expect_strategy(cfg: &CouplingConfig, want: Strategy) -> Result<()> {
    if cfg.strategy != want {
        return Err(Error::config(format!(
            "runner for {} called with strategy {}",
            want.name(),
            cfg.strategy.name()
        )));
    }
    Ok(())
}

fn finish(e: Engine, y_hat: Tensor, x_hat: Option<Tensor>) -> RunOutput {
    RunOutput {
        y_hat,
        x_hat,
        nfe: e.nfe,
        trace: e.trace,
    }
}

/// Both processes advance one step at a time, signal first. The leading
/// warm-up steps run with the cross slots zero-filled.
pub fn run_parallel(
    bundle: &DenoiserBundle,
    x_cor: &Tensor,
    cfg: &CouplingConfig,
    streams: &mut SamplingStreams,
) -> Result<RunOutput> {
    expect_strategy(cfg, Strategy::Parallel)?;
    cfg.validate(bundle.schedule().len())?;
    let mut e = Engine::new(bundle, x_cor, cfg.sampler, cfg.steps, streams)?;
    let mut y_hat_prev = e.classify(x_cor)?;
    let mut x = e.init_x();
    let mut y = e.init_y();

    for (k, (t, t_prev)) in e.pairs.clone().into_iter().enumerate() {
        let coupled = cfg.coupled_at(cfg.steps - k);
        let yc = match (coupled, cfg.guidance) {
            (false, _) => YCond::default(),
            (true, GuidanceSource::CleanEstimate) => YCond { y_t: Some(&y), y_hat: Some(&y_hat_prev) },
            (true, GuidanceSource::NoisySample) => YCond { y_t: Some(&y), y_hat: Some(&y) },
        };
        let (x0, x_next) = e.x_step(&x, t, t_prev, yc)?;
        let (y0, y_next) = if coupled {
            let signal = match cfg.guidance {
                GuidanceSource::CleanEstimate => x0,
                GuidanceSource::NoisySample => x_next.clone(),
            };
            let logits = e.classify(&signal)?;
            e.record(TraceKind::RefreshX, Some(t), &signal);
            e.y_step(&y, t, t_prev, Some(XCond { signal: &signal, logits: &logits }))?
        } else {
            e.y_step(&y, t, t_prev, None)?
        };
        e.record(TraceKind::RefreshY, Some(t), &y0);
        x = x_next;
        y = y_next;
        y_hat_prev = y0;
    }
    Ok(finish(e, y, Some(x)))
}

/// `N` rounds of a full signal trajectory conditioned on the current logit
/// estimate followed by a full logit trajectory conditioned on the new signal
/// estimate.
pub fn run_alternating(
    bundle: &DenoiserBundle,
    x_cor: &Tensor,
    cfg: &CouplingConfig,
    streams: &mut SamplingStreams,
) -> Result<RunOutput> {
    expect_strategy(cfg, Strategy::Alternating)?;
    cfg.validate(bundle.schedule().len())?;
    let mut e = Engine::new(bundle, x_cor, cfg.sampler, cfg.steps, streams)?;
    let mut y_cond = e.classify(x_cor)?;
    let mut x_hat = x_cor.clone();
    for _ in 0..cfg.iterations {
        x_hat = e.signal_chain(Some(&y_cond))?;
        let logits = e.classify(&x_hat)?;
        e.record(TraceKind::RefreshX, None, &x_hat);
        y_cond = e.logit_chain(Some(XCond { signal: &x_hat, logits: &logits }))?;
        e.record(TraceKind::RefreshY, None, &y_cond);
    }
    Ok(finish(e, y_cond, Some(x_hat)))
}

/// An outer logit trajectory whose signal conditioning is the terminal state
/// of an inner signal trajectory. The inner trajectory runs once up front
/// with no logit conditioning and is re-run, conditioned on the latest logit
/// estimate, at the configured refresh steps.
pub fn run_nested(
    bundle: &DenoiserBundle,
    x_cor: &Tensor,
    cfg: &CouplingConfig,
    streams: &mut SamplingStreams,
) -> Result<RunOutput> {
    expect_strategy(cfg, Strategy::Nested)?;
    cfg.validate(bundle.schedule().len())?;
    let refresh = nested_refresh_steps(cfg);
    let mut e = Engine::new(bundle, x_cor, cfg.sampler, cfg.steps, streams)?;
    let mut x_hat = e.signal_chain(None)?;
    let mut logits = e.classify(&x_hat)?;
    e.record(TraceKind::RefreshX, None, &x_hat);
    let mut y = e.init_y();
    let mut y_hat_prev: Option<Tensor> = None;

    for (k, (t, t_prev)) in e.pairs.clone().into_iter().enumerate() {
        if refresh.contains(&(cfg.steps - k)) {
            x_hat = e.signal_chain(y_hat_prev.as_ref())?;
            logits = e.classify(&x_hat)?;
            e.record(TraceKind::RefreshX, Some(t), &x_hat);
        }
        let (y0, y_next) = e.y_step(&y, t, t_prev, Some(XCond { signal: &x_hat, logits: &logits }))?;
        y = y_next;
        y_hat_prev = Some(y0);
    }
    Ok(finish(e, y, Some(x_hat)))
}

pub fn run_baseline(
    kind: BaselineKind,
    bundle: &DenoiserBundle,
    x_cor: &Tensor,
    cfg: &CouplingConfig,
    streams: &mut SamplingStreams,
) -> Result<RunOutput> {
    cfg.validate(bundle.schedule().len())?;
    let mut e = Engine::new(bundle, x_cor, cfg.sampler, cfg.steps, streams)?;
    match kind {
        BaselineKind::Noisy => {
            let logits = e.classify(x_cor)?;
            Ok(finish(e, logits, None))
        }
        BaselineKind::Enhanced => {
            let x_hat = e.signal_chain(None)?;
            let logits = e.classify(&x_hat)?;
            Ok(finish(e, logits, Some(x_hat)))
        }
        BaselineKind::Card => {
            let logits = e.classify(x_cor)?;
            let y = e.logit_chain(Some(XCond { signal: x_cor, logits: &logits }))?;
            Ok(finish(e, y, None))
        }
    }
}

/// A single logit trajectory conditioned on a given signal and its logits.
/// Uses no classifier calls.
pub fn run_logit_trajectory(
    bundle: &DenoiserBundle,
    signal: &Tensor,
    logits: &Tensor,
    x_cor: &Tensor,
    cfg: &CouplingConfig,
    streams: &mut SamplingStreams,
) -> Result<RunOutput> {
    cfg.validate(bundle.schedule().len())?;
    let mut e = Engine::new(bundle, x_cor, cfg.sampler, cfg.steps, streams)?;
    let y = e.logit_chain(Some(XCond { signal, logits }))?;
    Ok(finish(e, y, None))
}

/// Dispatches on `cfg.strategy`.
pub fn run_strategy(
    bundle: &DenoiserBundle,
    x_cor: &Tensor,
    cfg: &CouplingConfig,
    streams: &mut SamplingStreams,
) -> Result<RunOutput> {
    match cfg.strategy {
        Strategy::Parallel => run_parallel(bundle, x_cor, cfg, streams),
        Strategy::Alternating => run_alternating(bundle, x_cor, cfg, streams),
        Strategy::Nested => run_nested(bundle, x_cor, cfg, streams),
        Strategy::BaselineNoisy => run_baseline(BaselineKind::Noisy, bundle, x_cor, cfg, streams),
        Strategy::BaselineEnhanced => run_baseline(BaselineKind::Enhanced, bundle, x_cor, cfg, streams),
        Strategy::BaselineCard => run_baseline(BaselineKind::Card, bundle, x_cor, cfg, streams),
    }
}

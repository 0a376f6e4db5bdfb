use serde::{Deserialize, Serialize};

use super::config::CouplingConfig;
use super::engine::Engine;
use super::strategies::RunOutput;
use super::trace::TraceKind;
use crate::ddpm::timestep_pairs;
use crate::denoisers::{DenoiserBundle, XCond, YCond};
use crate::error::{Error, Result};
use crate::rng::SamplingStreams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    UpdateX,
    UpdateY,
}

/// One reverse step of one process.
///
/// `cross` feeds the other process into the conditioning slots; with it off
/// those slots are zero-filled. A refresh flag replaces the matching
/// conditioning value with this step's clean estimate after the step, and a
/// signal refresh costs one classifier call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerAction {
    pub kind: ActionKind,
    pub t: usize,
    pub refresh_x_cond: bool,
    pub refresh_y_cond: bool,
    pub cross: bool,
}

impl SchedulerAction {
    pub fn x(t: usize, refresh: bool, cross: bool) -> Self {
        Self {
            kind: ActionKind::UpdateX,
            t,
            refresh_x_cond: refresh,
            refresh_y_cond: false,
            cross,
        }
    }

    pub fn y(t: usize, refresh: bool, cross: bool) -> Self {
        Self {
            kind: ActionKind::UpdateY,
            t,
            refresh_x_cond: false,
            refresh_y_cond: refresh,
            cross,
        }
    }
}

/// Interleaved stream equivalent to the parallel strategy with clean-estimate
/// guidance.
pub fn parallel_action_stream(cfg: &CouplingConfig, schedule_len: usize) -> Result<Vec<SchedulerAction>> {
    let pairs = timestep_pairs(schedule_len, cfg.steps)?;
    let mut out = Vec::with_capacity(2 * pairs.len());
    for (k, &(t, _)) in pairs.iter().enumerate() {
        let coupled = cfg.coupled_at(cfg.steps - k);
        out.push(SchedulerAction::x(t, coupled, coupled));
        out.push(SchedulerAction::y(t, true, coupled));
    }
    Ok(out)
}

/// One alternating iteration: a full signal block then a full logit block,
/// each refreshing its conditioning value at the block boundary.
pub fn alternating_block_stream(cfg: &CouplingConfig, schedule_len: usize) -> Result<Vec<SchedulerAction>> {
    let pairs = timestep_pairs(schedule_len, cfg.steps)?;
    let last = pairs.len() - 1;
    let xs = pairs.iter().enumerate().map(|(k, &(t, _))| SchedulerAction::x(t, k == last, true));
    let ys = pairs.iter().enumerate().map(|(k, &(t, _))| SchedulerAction::y(t, k == last, true));
    Ok(xs.chain(ys).collect())
}

/// Each process must run complete trajectories over the sampling grid in
/// descending order.
fn validate(actions: &[SchedulerAction], pairs: &[(usize, usize)]) -> Result<()> {
    let mut pos = [0usize; 2];
    for (n, a) in actions.iter().enumerate() {
        let p = match a.kind {
            ActionKind::UpdateX => {
                if a.refresh_y_cond {
                    return Err(Error::ActionStream(format!("action {n}: a signal update cannot refresh the logit conditioning")));
                }
                0
            }
            ActionKind::UpdateY => {
                if a.refresh_x_cond {
                    return Err(Error::ActionStream(format!("action {n}: a logit update cannot refresh the signal conditioning")));
                }
                1
            }
        };
        let expected = pairs[pos[p] % pairs.len()].0;
        if a.t != expected {
            return Err(Error::ActionStream(format!(
                "action {n}: {:?} at t={} but the trajectory expects t={expected}",
                a.kind, a.t
            )));
        }
        pos[p] += 1;
    }
    for (p, name) in pos.iter().zip(["signal", "logit"]) {
        if p % pairs.len() != 0 {
            return Err(Error::ActionStream(format!("{name} trajectory ends before t=1")));
        }
    }
    Ok(())
}

/// Executes an arbitrary action stream.
///
/// Conditioning starts at `ŷ_cond = f(x_cor)` and `x_cond = x_cor`. Each
/// process state is drawn once up front if the stream touches it and redrawn
/// whenever a completed trajectory restarts. Returns the final states, or
/// the conditioning values for an untouched process.
pub fn run_generalized(
    actions: &[SchedulerAction],
    bundle: &DenoiserBundle,
    x_cor: &Tensor,
    cfg: &CouplingConfig,
    streams: &mut SamplingStreams,
) -> Result<RunOutput> {
    cfg.validate(bundle.schedule().len())?;
    let mut e = Engine::new(bundle, x_cor, cfg.sampler, cfg.steps, streams)?;
    validate(actions, &e.pairs)?;
    let steps = e.steps();

    let mut y_cond = e.classify(x_cor)?;
    let mut x_cond = (x_cor.clone(), y_cond.clone());
    let touches = |k: ActionKind| actions.iter().any(|a| a.kind == k);
    let mut x = touches(ActionKind::UpdateX).then(|| e.init_x());
    let mut y = touches(ActionKind::UpdateY).then(|| e.init_y());
    let mut pos = [0usize; 2];

    for a in actions {
        match a.kind {
            ActionKind::UpdateX => {
                if pos[0] > 0 && pos[0] % steps == 0 {
                    x = Some(e.init_x());
                }
                let t_prev = e.pairs[pos[0] % steps].1;
                pos[0] += 1;
                let yc = match (&y, a.cross) {
                    (Some(ys), true) => YCond { y_t: Some(ys), y_hat: Some(&y_cond) },
                    (None, true) => YCond { y_t: None, y_hat: Some(&y_cond) },
                    (_, false) => YCond::default(),
                };
                let x_t = x.as_ref().expect("signal state drawn up front");
                let (x0, next) = e.x_step(x_t, a.t, t_prev, yc)?;
                x = Some(next);
                if a.refresh_x_cond {
                    let logits = e.classify(&x0)?;
                    e.record(TraceKind::RefreshX, Some(a.t), &x0);
                    x_cond = (x0, logits);
                }
            }
            ActionKind::UpdateY => {
                if pos[1] > 0 && pos[1] % steps == 0 {
                    y = Some(e.init_y());
                }
                let t_prev = e.pairs[pos[1] % steps].1;
                pos[1] += 1;
                let xc = a.cross.then_some(XCond { signal: &x_cond.0, logits: &x_cond.1 });
                let y_t = y.as_ref().expect("logit state drawn up front");
                let (y0, next) = e.y_step(y_t, a.t, t_prev, xc)?;
                y = Some(next);
                if a.refresh_y_cond {
                    e.record(TraceKind::RefreshY, Some(a.t), &y0);
                    y_cond = y0;
                }
            }
        }
    }

    Ok(RunOutput {
        y_hat: y.unwrap_or(y_cond),
        x_hat: Some(x.unwrap_or(x_cond.0)),
        nfe: e.nfe,
        trace: e.trace,
    })
}

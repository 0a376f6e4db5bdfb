use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use super::trace::{Trace, TraceKind};
use crate::ddpm::{reverse_step, step_needs_noise, timestep_pairs, SamplerKind};
use crate::denoisers::{DenoiserBundle, XCond, YCond};
use crate::error::{Error, Result};
use crate::rng::SamplingStreams;
use crate::tensor::Tensor;

/// Network evaluations of one run, counted per example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NfeReport {
    pub denoiser_x_calls: u64,
    pub denoiser_y_calls: u64,
    pub classifier_calls: u64,
}

impl NfeReport {
    pub fn denoiser_calls(&self) -> u64 {
        self.denoiser_x_calls + self.denoiser_y_calls
    }

    pub fn times(&self, n: u64) -> Self {
        Self {
            denoiser_x_calls: self.denoiser_x_calls * n,
            denoiser_y_calls: self.denoiser_y_calls * n,
            classifier_calls: self.classifier_calls * n,
        }
    }
}

impl Add for NfeReport {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            denoiser_x_calls: self.denoiser_x_calls + o.denoiser_x_calls,
            denoiser_y_calls: self.denoiser_y_calls + o.denoiser_y_calls,
            classifier_calls: self.classifier_calls + o.classifier_calls,
        }
    }
}

impl AddAssign for NfeReport {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Shared state of one batched run: sampling plan, streams, ledger, trace.
pub(crate) struct Engine<'a> {
    pub bundle: &'a DenoiserBundle,
    pub x_cor: &'a Tensor,
    pub sampler: SamplerKind,
    pub pairs: Vec<(usize, usize)>,
    streams: &'a mut SamplingStreams,
    pub nfe: NfeReport,
    pub trace: Trace,
}

impl<'a> Engine<'a> {
    pub fn new(
        bundle: &'a DenoiserBundle,
        x_cor: &'a Tensor,
        sampler: SamplerKind,
        steps: usize,
        streams: &'a mut SamplingStreams,
    ) -> Result<Self> {
        let x_cor_rows = x_cor.rows();
        if x_cor.cols() != bundle.signal_dim() || x_cor_rows == 0 {
            return Err(Error::shape(format!(
                "corrupted batch {:?} does not match signal width {}",
                x_cor.shape(),
                bundle.signal_dim()
            )));
        }
        let pairs = timestep_pairs(bundle.schedule().len(), steps)?;
        let trace = Trace {
            input_hash: x_cor.fingerprint(),
            init_seed: streams.init_seed,
            step_seed: streams.step_seed,
            events: Vec::new(),
        };
        Ok(Self {
            bundle,
            x_cor,
            sampler,
            pairs,
            streams,
            nfe: NfeReport::default(),
            trace,
        })
    }

    pub fn rows(&self) -> usize {
        self.x_cor.rows()
    }

    pub fn steps(&self) -> usize {
        self.pairs.len()
    }

    pub fn record(&mut self, kind: TraceKind, t: Option<usize>, state: &Tensor) {
        self.trace.push(kind, t, state.fingerprint(), None, self.nfe);
    }

    pub fn classify(&mut self, x: &Tensor) -> Result<Tensor> {
        let logits = self.bundle.classifier().classify(x)?;
        self.nfe.classifier_calls += 1;
        self.record(TraceKind::Classify, None, &logits);
        Ok(logits)
    }

    pub fn init_x(&mut self) -> Tensor {
        let x = Tensor::randn(&[self.rows(), self.bundle.signal_dim()], &mut self.streams.x_init);
        self.record(TraceKind::Init, None, &x);
        x
    }

    pub fn init_y(&mut self) -> Tensor {
        let y = Tensor::randn(&[self.rows(), self.bundle.classes()], &mut self.streams.y_init);
        self.record(TraceKind::Init, None, &y);
        y
    }

    /// One signal update at `(t, t_prev)`; returns `(x̂₀, x_{t_prev})`.
    pub fn x_step(&mut self, x_t: &Tensor, t: usize, t_prev: usize, y: YCond) -> Result<(Tensor, Tensor)> {
        let x0 = self.bundle.clip_signal(self.bundle.estimate_x0(x_t, t, y, self.x_cor)?);
        self.nfe.denoiser_x_calls += 1;
        let noise = step_needs_noise(self.sampler, t_prev)
            .then(|| Tensor::randn(x_t.shape(), &mut self.streams.x_step));
        let next = reverse_step(self.sampler, self.bundle.schedule(), x_t, &x0, t, t_prev, noise.as_ref())?;
        check_finite(&next, "signal update", t)?;
        let cond = y.y_hat.map(Tensor::fingerprint);
        self.trace.push(TraceKind::UpdateX, Some(t), next.fingerprint(), cond, self.nfe);
        Ok((x0, next))
    }

    /// One logit update at `(t, t_prev)`; returns `(ŷ₀, y_{t_prev})`.
    pub fn y_step(&mut self, y_t: &Tensor, t: usize, t_prev: usize, x: Option<XCond>) -> Result<(Tensor, Tensor)> {
        let y0 = self.bundle.clip_logits(self.bundle.estimate_y0(y_t, t, x, self.x_cor)?);
        self.nfe.denoiser_y_calls += 1;
        let noise = step_needs_noise(self.sampler, t_prev)
            .then(|| Tensor::randn(y_t.shape(), &mut self.streams.y_step));
        let next = reverse_step(self.sampler, self.bundle.schedule(), y_t, &y0, t, t_prev, noise.as_ref())?;
        check_finite(&next, "logit update", t)?;
        let cond = x.map(|c| c.signal.fingerprint());
        self.trace.push(TraceKind::UpdateY, Some(t), next.fingerprint(), cond, self.nfe);
        Ok((y0, next))
    }

    /// A full signal trajectory with fixed logit conditioning; returns its
    /// terminal state.
    pub fn signal_chain(&mut self, y_hat: Option<&Tensor>) -> Result<Tensor> {
        let mut x = self.init_x();
        for (t, t_prev) in self.pairs.clone() {
            let y = YCond { y_t: None, y_hat };
            x = self.x_step(&x, t, t_prev, y)?.1;
        }
        Ok(x)
    }

    /// A full logit trajectory with fixed signal conditioning.
    pub fn logit_chain(&mut self, x: Option<XCond>) -> Result<Tensor> {
        let mut y = self.init_y();
        for (t, t_prev) in self.pairs.clone() {
            y = self.y_step(&y, t, t_prev, x)?.1;
        }
        Ok(y)
    }
}

fn check_finite(x: &Tensor, context: &str, t: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
            step: t,
        })
    }
}

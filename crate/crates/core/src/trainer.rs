//! Training for the coupled denoiser pair: independent warm-start, the
//! per-step coupled objective, the two full-sampling objectives and the
//! logit-only objective of the CARD baseline.
//!
//! Trainers see only [`TrainingPairs`]; class labels are not reachable from
//! here. Cross-conditioning estimates are constants during backpropagation,
//! so each net receives gradients from its own loss term only.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::coupling::{Engine, GuidanceSource, NfeReport};
use crate::ddpm::{eps_to_x0, forward_sample, posterior_step, NoiseSchedule, SamplerKind};
use crate::denoisers::{DenoiserBundle, XCond, YCond};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Gradients, MlpParams};
use crate::rng::{derive_seed, stream, stream_rng, Rng, SamplingStreams};
use crate::tensor::Tensor;
use crate::world::TrainingPairs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global-norm gradient clip per net.
    pub clip: Option<f64>,
    /// Epochs of independent pretraining with the cross slots zero-filled.
    pub warm_start_epochs: usize,
    /// Reverse steps used to generate estimates during full-sampling
    /// training; also the inference step count that defines the warm-up
    /// window of per-step coupling.
    pub sampling_steps: usize,
    /// Optimizer steps per generated estimate pair.
    pub inner_steps: usize,
    /// Per-step coupling: leading fraction of the inference trajectory with
    /// the cross slots zero-filled. Training zero-fills the same timesteps.
    pub warmup_fraction: f64,
    pub guidance: GuidanceSource,
    /// Nested: probability that a row's logit-estimate slot is zero-filled,
    /// matching the unconditioned initial inner chain at inference.
    pub estimate_dropout: f64,
    /// Steps between last-good snapshots.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 1e-3,
            clip: Some(10.0),
            warm_start_epochs: 20,
            sampling_steps: 50,
            inner_steps: 8,
            warmup_fraction: 0.5,
            guidance: GuidanceSource::CleanEstimate,
            estimate_dropout: 0.2,
            checkpoint_every: 100,
            checkpoint_dir: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.inner_steps == 0 || self.sampling_steps == 0 || self.checkpoint_every == 0 {
            return Err(Error::config(
                "batch_size, inner_steps, sampling_steps and checkpoint_every must be at least 1",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.estimate_dropout) {
            return Err(Error::config("fractions must lie in [0, 1]"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip: self.clip,
            ..AdamConfig::default()
        }
    }

    /// Largest timestep at which per-step coupling is active at inference.
    pub fn coupled_threshold(&self, schedule_len: usize) -> usize {
        let s = self.sampling_steps.min(schedule_len);
        let warm = ((self.warmup_fraction * s as f64) + 1e-9).floor() as usize;
        (((s - warm) * schedule_len) as f64 / s as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss_x: f64,
    pub loss_y: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<LossPoint>,
    /// Batched network calls spent generating estimates.
    pub sampling_nfe: NfeReport,
    /// Forward/backward pairs through each net.
    pub train_pairs_x: u64,
    pub train_pairs_y: u64,
    pub optimizer_steps: usize,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss_x,loss_y")?;
        for p in &self.curve {
            writeln!(w, "{},{},{}", p.step, p.loss_x, p.loss_y)?;
        }
        Ok(())
    }

    /// Mean summed loss over the last `n` recorded steps.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.curve[self.curve.len().saturating_sub(n)..];
        tail.iter().map(|p| p.loss_x + p.loss_y).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn head_loss(&self, n: usize) -> f64 {
        let head = &self.curve[..n.min(self.curve.len())];
        head.iter().map(|p| p.loss_x + p.loss_y).sum::<f64>() / head.len().max(1) as f64
    }
}

/// One process's noise-regression term: batch mean of the per-example
/// squared error, with the gradient of that mean.
#[derive(Clone, Debug)]
pub struct LossTerm {
    pub loss: f64,
    pub prediction: Tensor,
    pub grads: Gradients,
}

pub fn denoising_term(net: &MlpParams, input: &Tensor, eps: &Tensor) -> Result<LossTerm> {
    let (pred, tape) = net.forward(input)?;
    let rows = eps.rows() as f64;
    let loss = pred.batch_sq_error(eps)?;
    let d_out = pred.zip_map(eps, |p, e| 2.0 * (p - e) / rows)?;
    let (grads, _) = net.backward(&tape, &d_out)?;
    Ok(LossTerm {
        loss,
        prediction: pred,
        grads,
    })
}

/// Per-row timesteps and the noise drawn for one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub ts: Vec<usize>,
    pub eps_x: Tensor,
    pub eps_y: Tensor,
    /// Posterior noise for `x_{t-1}` under noisy-sample guidance.
    pub posterior: Option<Tensor>,
    /// Rows whose logit-estimate slot is zero-filled.
    pub dropped: Vec<bool>,
}

impl NoiseDraw {
    pub fn sample(rng: &mut Rng, rows: usize, d: usize, c: usize, t_max: usize, posterior: bool, dropout: f64) -> Self {
        let ts = (0..rows).map(|_| rng.random_range(1..=t_max)).collect();
        let eps_x = Tensor::randn(&[rows, d], rng);
        let eps_y = Tensor::randn(&[rows, c], rng);
        let posterior = posterior.then(|| Tensor::randn(&[rows, d], rng));
        let dropped = (0..rows).map(|_| dropout > 0.0 && rng.random::<f64>() < dropout).collect();
        Self {
            ts,
            eps_x,
            eps_y,
            posterior,
            dropped,
        }
    }
}

fn per_row(
    a: &Tensor,
    b: &Tensor,
    ts: &[usize],
    f: impl Fn(&Tensor, &Tensor, usize, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    a.same_shape(b)?;
    let mut out = Tensor::zeros(a.shape());
    for (r, &t) in ts.iter().enumerate() {
        let row = f(&Tensor::from_vec(a.row(r).to_vec()), &Tensor::from_vec(b.row(r).to_vec()), t, r)?;
        out.row_mut(r).copy_from_slice(row.data());
    }
    Ok(out)
}

/// Row-wise `forward_sample` with per-row timesteps.
pub fn noise_rows(s: &NoiseSchedule, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
    per_row(x0, eps, ts, |x, e, t, _| forward_sample(s, x, t, e))
}

/// Row-wise `eps_to_x0` with per-row timesteps.
pub fn eps_to_x0_rows(s: &NoiseSchedule, x_t: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
    per_row(x_t, eps, ts, |x, e, t, _| eps_to_x0(s, x, t, e))
}

fn posterior_rows(s: &NoiseSchedule, x_t: &Tensor, x0: &Tensor, ts: &[usize], noise: &Tensor) -> Result<Tensor> {
    per_row(x_t, x0, ts, |x, c, t, r| {
        let z = Tensor::from_vec(noise.row(r).to_vec());
        posterior_step(s, x, c, t, Some(&z))
    })
}

fn mask_rows(x: &Tensor, drop: impl Fn(usize) -> bool) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        if drop(r) {
            out.row_mut(r).fill(0.0);
        }
    }
    out
}

fn signal_term(b: &DenoiserBundle, x_t: &Tensor, d: &NoiseDraw, x_cor: &Tensor, y: YCond) -> Result<LossTerm> {
    let input = b.signal_input(x_t, &b.embed_rows(&d.ts), x_cor, y)?;
    denoising_term(&b.signal_net, &input, &d.eps_x)
}

fn logit_term(b: &DenoiserBundle, y_t: &Tensor, d: &NoiseDraw, x_cor: &Tensor, x: Option<XCond>) -> Result<LossTerm> {
    let input = b.logit_input(y_t, &b.embed_rows(&d.ts), x, x_cor)?;
    denoising_term(&b.logit_net, &input, &d.eps_y)
}

/// Noisy states of both processes; the clean logits are `f(x₀)`.
fn noisy_states(b: &DenoiserBundle, x0: &Tensor, d: &NoiseDraw) -> Result<(Tensor, Tensor)> {
    let s = b.schedule();
    let y0 = b.classifier().classify(x0)?;
    Ok((noise_rows(s, x0, &d.ts, &d.eps_x)?, noise_rows(s, &y0, &d.ts, &d.eps_y)?))
}

/// Both nets with every cross slot zero-filled.
pub fn independent_objective(b: &DenoiserBundle, x0: &Tensor, x_cor: &Tensor, d: &NoiseDraw) -> Result<(LossTerm, LossTerm)> {
    let (x_t, y_t) = noisy_states(b, x0, d)?;
    Ok((
        signal_term(b, &x_t, d, x_cor, YCond::default())?,
        logit_term(b, &y_t, d, x_cor, None)?,
    ))
}

/// Per-step coupled objective. The signal net first predicts `x̂₀` with
/// `ŷ = f(x_cor)`; the logit net is then conditioned on that estimate, and
/// its refined `ŷ₀` conditions the signal term. Rows whose timestep lies in
/// the inference warm-up window have their cross slots zero-filled.
pub fn parallel_objective(
    b: &DenoiserBundle,
    x0: &Tensor,
    x_cor: &Tensor,
    d: &NoiseDraw,
    cfg: &TrainConfig,
) -> Result<(LossTerm, LossTerm)> {
    let s = b.schedule();
    let threshold = cfg.coupled_threshold(s.len());
    let warm = |r: usize| d.ts[r] > threshold;
    let (x_t, y_t) = noisy_states(b, x0, d)?;
    let emb = b.embed_rows(&d.ts);
    let y_t_slot = mask_rows(&y_t, warm);

    let first_hat = match cfg.guidance {
        GuidanceSource::CleanEstimate => mask_rows(&b.classifier().classify(x_cor)?, warm),
        GuidanceSource::NoisySample => y_t_slot.clone(),
    };
    let first = YCond { y_t: Some(&y_t_slot), y_hat: Some(&first_hat) };
    let eps_first = b.signal_net.predict(&b.signal_input(&x_t, &emb, x_cor, first)?)?;
    let x_hat = b.clip_signal(eps_to_x0_rows(s, &x_t, &d.ts, &eps_first)?);
    let signal = match (cfg.guidance, &d.posterior) {
        (GuidanceSource::CleanEstimate, _) => x_hat,
        (GuidanceSource::NoisySample, Some(z)) => posterior_rows(s, &x_t, &x_hat, &d.ts, z)?,
        (GuidanceSource::NoisySample, None) => {
            return Err(Error::config("noisy-sample guidance needs posterior noise in the draw"))
        }
    };
    let logits = b.classifier().classify(&signal)?;
    let (signal, logits) = (mask_rows(&signal, warm), mask_rows(&logits, warm));
    let ty = logit_term(b, &y_t, d, x_cor, Some(XCond { signal: &signal, logits: &logits }))?;

    let refined = match cfg.guidance {
        GuidanceSource::CleanEstimate => mask_rows(&b.clip_logits(eps_to_x0_rows(s, &y_t, &d.ts, &ty.prediction)?), warm),
        GuidanceSource::NoisySample => y_t_slot.clone(),
    };
    let tx = signal_term(b, &x_t, d, x_cor, YCond { y_t: Some(&y_t_slot), y_hat: Some(&refined) })?;
    Ok((tx, ty))
}

/// Objective with fixed fully sampled estimates: the signal net sees
/// `ŷ₀`, the logit net sees `x̂₀` and `f(x̂₀)`.
pub fn alternating_objective(
    b: &DenoiserBundle,
    x0: &Tensor,
    x_cor: &Tensor,
    d: &NoiseDraw,
    x_hat: &Tensor,
    x_hat_logits: &Tensor,
    y_hat: &Tensor,
) -> Result<(LossTerm, LossTerm)> {
    let (x_t, y_t) = noisy_states(b, x0, d)?;
    let tx = signal_term(b, &x_t, d, x_cor, YCond { y_t: None, y_hat: Some(y_hat) })?;
    let ty = logit_term(b, &y_t, d, x_cor, Some(XCond { signal: x_hat, logits: x_hat_logits }))?;
    Ok((tx, ty))
}

/// Objective with a fixed fully sampled `x̂₀`. The logit prediction is
/// turned into `ŷ₀` through the noise-to-estimate map and conditions the
/// signal term.
pub fn nested_objective(
    b: &DenoiserBundle,
    x0: &Tensor,
    x_cor: &Tensor,
    d: &NoiseDraw,
    x_hat: &Tensor,
    x_hat_logits: &Tensor,
) -> Result<(LossTerm, LossTerm)> {
    let (x_t, y_t) = noisy_states(b, x0, d)?;
    let ty = logit_term(b, &y_t, d, x_cor, Some(XCond { signal: x_hat, logits: x_hat_logits }))?;
    let y_hat = b.clip_logits(eps_to_x0_rows(b.schedule(), &y_t, &d.ts, &ty.prediction)?);
    let y_hat = mask_rows(&y_hat, |r| d.dropped[r]);
    let tx = signal_term(b, &x_t, d, x_cor, YCond { y_t: None, y_hat: Some(&y_hat) })?;
    Ok((tx, ty))
}

/// Logit net conditioned on the corrupted signal and its logits.
pub fn card_objective(b: &DenoiserBundle, x0: &Tensor, x_cor: &Tensor, d: &NoiseDraw) -> Result<LossTerm> {
    let y0 = b.classifier().classify(x0)?;
    let y_t = noise_rows(b.schedule(), &y0, &d.ts, &d.eps_y)?;
    let logits = b.classifier().classify(x_cor)?;
    logit_term(b, &y_t, d, x_cor, Some(XCond { signal: x_cor, logits: &logits }))
}

/// Shared loop state: optimizers, rngs, report and the last-good snapshot.
struct Loop<'a> {
    bundle: DenoiserBundle,
    cfg: &'a TrainConfig,
    opt_x: Adam,
    opt_y: Adam,
    batches: Rng,
    noise: Rng,
    report: TrainReport,
    last_good: DenoiserBundle,
}

impl<'a> Loop<'a> {
    fn new(bundle: &DenoiserBundle, cfg: &'a TrainConfig, tag: u64) -> Result<Self> {
        cfg.validate()?;
        let seed = derive_seed(cfg.seed, tag);
        Ok(Self {
            opt_x: Adam::new(cfg.adam(), &bundle.signal_net),
            opt_y: Adam::new(cfg.adam(), &bundle.logit_net),
            batches: stream_rng(seed, stream::BATCHES),
            noise: stream_rng(seed, stream::NOISE),
            report: TrainReport::default(),
            last_good: bundle.clone(),
            bundle: bundle.clone(),
            cfg,
        })
    }

    fn epoch(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.batches);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn draw(&mut self, rows: usize, posterior: bool, dropout: f64) -> NoiseDraw {
        let (d, c, t) = (self.bundle.signal_dim(), self.bundle.classes(), self.bundle.schedule().len());
        NoiseDraw::sample(&mut self.noise, rows, d, c, t, posterior, dropout)
    }

    fn sampling_streams(&self) -> SamplingStreams {
        SamplingStreams::new(derive_seed(self.cfg.seed ^ 0xe57, self.report.optimizer_steps as u64))
    }

    /// Applies one optimizer step from whichever terms are present.
    fn apply(&mut self, tx: Option<LossTerm>, ty: Option<LossTerm>) -> Result<()> {
        let step = self.report.optimizer_steps;
        let loss_x = tx.as_ref().map_or(0.0, |t| t.loss);
        let loss_y = ty.as_ref().map_or(0.0, |t| t.loss);
        if !(loss_x.is_finite() && loss_y.is_finite()) {
            return Err(Error::Diverged {
                step,
                last_good: Box::new(self.last_good.clone()),
            });
        }
        if let Some(t) = tx {
            self.opt_x.step(&mut self.bundle.signal_net, &t.grads)?;
            self.report.train_pairs_x += 1;
        }
        if let Some(t) = ty {
            self.opt_y.step(&mut self.bundle.logit_net, &t.grads)?;
            self.report.train_pairs_y += 1;
        }
        self.report.curve.push(LossPoint { step, loss_x, loss_y });
        self.report.optimizer_steps += 1;
        if self.report.optimizer_steps % self.cfg.checkpoint_every == 0 {
            self.last_good = self.bundle.clone();
            if let Some(dir) = &self.cfg.checkpoint_dir {
                self.bundle.save_dir(dir)?;
            }
        }
        Ok(())
    }

    fn finish(self) -> (DenoiserBundle, TrainReport) {
        (self.bundle, self.report)
    }
}

fn batch(data: &TrainingPairs, idx: &[usize]) -> (Tensor, Tensor) {
    (data.x0().select_rows(idx), data.x_cor().select_rows(idx))
}

/// Independent pretraining of both nets for `warm_start_epochs`, cross
/// slots zero-filled, each net on its own loss.
pub fn warm_start(bundle: &DenoiserBundle, data: &TrainingPairs, cfg: &TrainConfig) -> Result<(DenoiserBundle, TrainReport)> {
    let mut lp = Loop::new(bundle, cfg, 1)?;
    for _ in 0..cfg.warm_start_epochs {
        for idx in lp.epoch(data.len()) {
            let (x0, xc) = batch(data, &idx);
            let d = lp.draw(idx.len(), false, 0.0);
            let (tx, ty) = independent_objective(&lp.bundle, &x0, &xc, &d)?;
            lp.apply(Some(tx), Some(ty))?;
        }
    }
    Ok(lp.finish())
}

/// Per-step coupled training, one optimizer step per batch.
pub fn train_parallel(bundle: &DenoiserBundle, data: &TrainingPairs, cfg: &TrainConfig) -> Result<(DenoiserBundle, TrainReport)> {
    let mut lp = Loop::new(bundle, cfg, 2)?;
    let posterior = cfg.guidance == GuidanceSource::NoisySample;
    for _ in 0..cfg.epochs {
        for idx in lp.epoch(data.len()) {
            let (x0, xc) = batch(data, &idx);
            let d = lp.draw(idx.len(), posterior, 0.0);
            let (tx, ty) = parallel_objective(&lp.bundle, &x0, &xc, &d, cfg)?;
            lp.apply(Some(tx), Some(ty))?;
        }
    }
    Ok(lp.finish())
}

/// Fully sampled estimates for one batch, generated with the current nets.
struct Estimates {
    x_hat: Tensor,
    x_hat_logits: Tensor,
    y_hat: Option<Tensor>,
}

fn sample_estimates(lp: &mut Loop, x_cor: &Tensor, with_logits: bool) -> Result<Estimates> {
    let mut streams = lp.sampling_streams();
    let steps = lp.cfg.sampling_steps.min(lp.bundle.schedule().len());
    let mut e = Engine::new(&lp.bundle, x_cor, SamplerKind::Ddpm, steps, &mut streams)?;
    let (x_hat, x_hat_logits, y_hat) = if with_logits {
        let f_cor = lp.bundle.classifier().classify(x_cor)?;
        let x_hat = e.signal_chain(Some(&f_cor))?;
        let logits = e.classify(&x_hat)?;
        let y_hat = e.logit_chain(Some(XCond { signal: &x_hat, logits: &logits }))?;
        (x_hat, logits, Some(y_hat))
    } else {
        let x_hat = e.signal_chain(None)?;
        let logits = e.classify(&x_hat)?;
        (x_hat, logits, None)
    };
    let nfe = e.nfe;
    lp.report.sampling_nfe += nfe;
    Ok(Estimates { x_hat, x_hat_logits, y_hat })
}

/// Per batch: a full signal trajectory conditioned on `f(x_cor)`, a full
/// logit trajectory conditioned on its result, then `inner_steps` optimizer
/// steps against those fixed estimates.
pub fn train_alternating(bundle: &DenoiserBundle, data: &TrainingPairs, cfg: &TrainConfig) -> Result<(DenoiserBundle, TrainReport)> {
    let mut lp = Loop::new(bundle, cfg, 3)?;
    for _ in 0..cfg.epochs {
        for idx in lp.epoch(data.len()) {
            let (x0, xc) = batch(data, &idx);
            let est = sample_estimates(&mut lp, &xc, true)?;
            let y_hat = est.y_hat.as_ref().expect("logit estimate requested");
            for _ in 0..cfg.inner_steps {
                let d = lp.draw(idx.len(), false, 0.0);
                let (tx, ty) = alternating_objective(&lp.bundle, &x0, &xc, &d, &est.x_hat, &est.x_hat_logits, y_hat)?;
                lp.apply(Some(tx), Some(ty))?;
            }
        }
    }
    Ok(lp.finish())
}

/// Per batch: a full unconditioned signal trajectory, then `inner_steps`
/// optimizer steps with the logit estimate recovered from the logit net's
/// own noise prediction.
pub fn train_nested(bundle: &DenoiserBundle, data: &TrainingPairs, cfg: &TrainConfig) -> Result<(DenoiserBundle, TrainReport)> {
    let mut lp = Loop::new(bundle, cfg, 4)?;
    for _ in 0..cfg.epochs {
        for idx in lp.epoch(data.len()) {
            let (x0, xc) = batch(data, &idx);
            let est = sample_estimates(&mut lp, &xc, false)?;
            for _ in 0..cfg.inner_steps {
                let d = lp.draw(idx.len(), false, cfg.estimate_dropout);
                let (tx, ty) = nested_objective(&lp.bundle, &x0, &xc, &d, &est.x_hat, &est.x_hat_logits)?;
                lp.apply(Some(tx), Some(ty))?;
            }
        }
    }
    Ok(lp.finish())
}

/// Logit net only, conditioned on the corrupted signal.
pub fn train_card(bundle: &DenoiserBundle, data: &TrainingPairs, cfg: &TrainConfig) -> Result<(DenoiserBundle, TrainReport)> {
    let mut lp = Loop::new(bundle, cfg, 5)?;
    for _ in 0..cfg.epochs {
        for idx in lp.epoch(data.len()) {
            let (x0, xc) = batch(data, &idx);
            let d = lp.draw(idx.len(), false, 0.0);
            let ty = card_objective(&lp.bundle, &x0, &xc, &d)?;
            lp.apply(None, Some(ty))?;
        }
    }
    Ok(lp.finish())
}

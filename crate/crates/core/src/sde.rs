//! Task-adapted Ornstein–Uhlenbeck / variance-exploding SDE on 1-D signals.
//!
//! Forward process `dx = γ(x_cor − x)dt + g(t)dw`, whose perturbation kernel
//! around a clean `x0` is `N(μ(t), σ(t)²)` with
//! `μ(t) = e^{-γt}x0 + (1 − e^{-γt})x_cor` and `σ(t) = σ_min(σ_max/σ_min)^t`.
//! Taking `g(t)² = 2σ(t)²(ln(σ_max/σ_min) + γ)` makes `σ(t)` the exact
//! kernel standard deviation for a start spread of `σ_min`.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, MlpParams, MlpSpec, TimeEmbedding};
use crate::rng::{stream, stream_rng, Rng};
use crate::tensor::{reflect_index, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuveParams {
    pub gamma: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for OuveParams {
    fn default() -> Self {
        Self {
            gamma: 1.5,
            sigma_min: 0.05,
            sigma_max: 0.5,
        }
    }
}

impl OuveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::config("gamma must be positive"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::config("need 0 < sigma_min < sigma_max"));
        }
        Ok(())
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    /// Squared diffusion coefficient `g(t)²`.
    pub fn g2(&self, t: f64) -> f64 {
        let s = self.sigma(t);
        2.0 * s * s * (self.log_ratio() + self.gamma)
    }
}

pub fn mean_traj(x0: &Tensor, x_cor: &Tensor, t: f64, p: &OuveParams) -> Result<Tensor> {
    let d = (-p.gamma * t).exp();
    x0.lincomb(d, x_cor, 1.0 - d)
}

pub fn perturb_sample(x0: &Tensor, x_cor: &Tensor, t: f64, z: &Tensor, p: &OuveParams) -> Result<Tensor> {
    mean_traj(x0, x_cor, t, p)?.lincomb(1.0, z, p.sigma(t))
}

fn checked_sigma(t: f64, p: &OuveParams) -> Result<f64> {
    let s = p.sigma(t);
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::config(format!("sigma({t}) = {s} is not positive")));
    }
    Ok(s)
}

/// Score-matching target `−z/σ(t)`.
pub fn dsm_target(z: &Tensor, t: f64, p: &OuveParams) -> Result<Tensor> {
    let s = checked_sigma(t, p)?;
    Ok(z.map(|v| -v / s))
}

/// Analytic baseline `−(y_t − y_cor)/σ(t)²` plus a learned residual.
pub fn residual_logit_score(
    y_t: &Tensor,
    y_cor: &Tensor,
    t: f64,
    residual: &Tensor,
    p: &OuveParams,
) -> Result<Tensor> {
    let s = checked_sigma(t, p)?;
    let base = y_t.zip_map(y_cor, |y, c| -(y - c) / (s * s))?;
    base.add(residual)
}

/// Exact score of the perturbation kernel around a known clean signal.
pub fn kernel_score(x: &Tensor, x0: &Tensor, x_cor: &Tensor, t: f64, p: &OuveParams) -> Result<Tensor> {
    let mu = mean_traj(x0, x_cor, t, p)?;
    let s = checked_sigma(t, p)?;
    x.zip_map(&mu, |a, m| -(a - m) / (s * s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcConfig {
    pub steps: usize,
    /// Target signal-to-noise ratio of the Langevin corrector; 0 disables it.
    pub snr: f64,
}

impl Default for PcConfig {
    fn default() -> Self {
        Self { steps: 50, snr: 0.5 }
    }
}

/// Terminal state plus the state after every discretisation point.
#[derive(Clone, Debug)]
pub struct PcOutput {
    pub terminal: Tensor,
    pub trajectory: Vec<(f64, Tensor)>,
}

/// Reverse-time predictor–corrector sampling from `t = 1` to `t = 0`.
///
/// Starts at `x_cor + σ(1)z`. Each of the `steps` grid intervals takes one
/// reverse-diffusion Euler–Maruyama predictor step `t_i → t_{i+1}` followed by
/// one annealed Langevin corrector step at `t_{i+1}` with step size
/// `2(snr·σ(t_{i+1}))²`. With `snr = 0` the corrector draws nothing.
/// `score(x, t, x_cor)` supplies the score estimate.
pub fn pc_sample<F>(score: F, x_cor: &Tensor, cfg: PcConfig, p: &OuveParams, rng: &mut Rng) -> Result<PcOutput>
where
    F: Fn(&Tensor, f64, &Tensor) -> Result<Tensor>,
{
    p.validate()?;
    if cfg.steps == 0 {
        return Err(Error::config("sampling steps must be at least 1"));
    }
    if !(cfg.snr >= 0.0) {
        return Err(Error::config("snr must be non-negative"));
    }
    let shape = x_cor.shape().to_vec();
    let mut x = x_cor.lincomb(1.0, &Tensor::randn(&shape, rng), p.sigma(1.0))?;
    let mut trajectory = vec![(1.0, x.clone())];
    let dt = 1.0 / cfg.steps as f64;
    for i in 0..cfg.steps {
        let t = 1.0 - i as f64 * dt;
        let s = score(&x, t, x_cor)?;
        let g2 = p.g2(t);
        for ((v, &xc), &sv) in x.data_mut().iter_mut().zip(x_cor.data()).zip(s.data()) {
            let drift = p.gamma * (xc - *v) - g2 * sv;
            *v -= drift * dt;
        }
        let z = Tensor::randn(&shape, rng);
        x = x.lincomb(1.0, &z, (g2 * dt).sqrt())?;

        let t_next = 1.0 - (i + 1) as f64 * dt;
        if cfg.snr > 0.0 {
            let s = score(&x, t_next, x_cor)?;
            let eps = 2.0 * (cfg.snr * p.sigma(t_next)).powi(2);
            let z = Tensor::randn(&shape, rng);
            x = x.lincomb(1.0, &s, eps)?.lincomb(1.0, &z, (2.0 * eps).sqrt())?;
        }
        if !x.is_finite() {
            let recent: Vec<f64> = trajectory.iter().rev().take(3).map(|(t, _)| *t).collect();
            return Err(Error::NonFinite {
                context: format!("predictor-corrector state after grid times {recent:?}"),
                step: i,
            });
        }
        trajectory.push((t_next, x.clone()));
    }
    Ok(PcOutput {
        terminal: x,
        trajectory,
    })
}

/// Affine map recorded by `normalize_logits`: `y' = (y − mean)·scale + target_mean`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineRecord {
    pub mean: f64,
    pub scale: f64,
    pub target_mean: f64,
}

impl AffineRecord {
    pub fn invert(&self, y: &Tensor) -> Tensor {
        y.map(|v| (v - self.target_mean) / self.scale + self.mean)
    }
}

/// Match mean and (population) standard deviation to the targets. A constant
/// input keeps unit scale and is only shifted.
pub fn normalize_logits(y: &Tensor, target_mean: f64, target_std: f64) -> (Tensor, AffineRecord) {
    let n = y.len().max(1) as f64;
    let mean = y.data().iter().sum::<f64>() / n;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 0.0 && target_std > 0.0 {
        target_std / std
    } else {
        1.0
    };
    let rec = AffineRecord {
        mean,
        scale,
        target_mean,
    };
    (y.map(|v| (v - mean) * scale + target_mean), rec)
}

/// Clean/corrupted pairs of smooth 1-D toy signals.
#[derive(Clone, Debug)]
pub struct ToySignals {
    pub clean: Vec<Tensor>,
    pub corrupted: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySignalSpec {
    pub count: usize,
    pub length: usize,
    /// Std of the Gaussian smoothing kernel, in samples.
    pub smoothing: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToySignalSpec {
    fn default() -> Self {
        Self {
            count: 200,
            length: 64,
            smoothing: 2.0,
            noise_std: 0.2,
            seed: 0,
        }
    }
}

fn smooth_1d(x: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return x.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    (0..x.len() as isize)
        .map(|i| {
            (-r..=r)
                .map(|j| k[(j + r) as usize] * x[reflect_index(i + j, x.len())])
                .sum()
        })
        .collect()
}

impl ToySignals {
    /// Sums of three random sinusoids, corrupted by Gaussian smoothing and
    /// additive white noise.
    pub fn generate(spec: &ToySignalSpec) -> Result<Self> {
        if spec.length < 2 || spec.count == 0 {
            return Err(Error::config("toy signals need count >= 1 and length >= 2"));
        }
        let mut rng = stream_rng(spec.seed, stream::DATA);
        let mut noise = stream_rng(spec.seed, stream::CORRUPT);
        let mut clean = Vec::with_capacity(spec.count);
        let mut corrupted = Vec::with_capacity(spec.count);
        for _ in 0..spec.count {
            let comps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.2..0.6),
                        rng.random_range(1.0..8.0),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            let x: Vec<f64> = (0..spec.length)
                .map(|i| {
                    let u = i as f64 / spec.length as f64;
                    comps
                        .iter()
                        .map(|(a, f, ph)| a * (2.0 * PI * f * u + ph).sin())
                        .sum()
                })
                .collect();
            let mut y = smooth_1d(&x, spec.smoothing);
            for v in &mut y {
                *v += spec.noise_std * noise.sample::<f64, _>(StandardNormal);
            }
            clean.push(Tensor::from_vec(x));
            corrupted.push(Tensor::from_vec(y));
        }
        Ok(Self { clean, corrupted })
    }
}

/// Learned score `s(x, t, x_cor) = net([x ‖ x_cor ‖ emb(t)]) / σ(t)`.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    pub params: MlpParams,
    pub embed: TimeEmbedding,
    pub ouve: OuveParams,
}

/// Time is scaled into the embedding's integer-step range.
const SCORE_TIME_SCALE: f64 = 1000.0;
const SCORE_T_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub embed: usize,
    pub seed: u64,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            hidden: 128,
            embed: 16,
            seed: 0,
        }
    }
}

impl ScoreNet {
    fn input(&self, x: &Tensor, t: &[f64], x_cor: &Tensor) -> Result<Tensor> {
        let ts: Vec<f64> = t.iter().map(|t| t * SCORE_TIME_SCALE).collect();
        let e = self.embed.embed_batch(&ts);
        Tensor::concat_cols(&[&x.as_batch(), &x_cor.as_batch(), &e])
    }

    pub fn score(&self, x: &Tensor, t: f64, x_cor: &Tensor) -> Result<Tensor> {
        let inp = self.input(x, &vec![t; x.rows()], x_cor)?;
        let out = self.params.predict(&inp)?;
        let s = checked_sigma(t, &self.ouve)?;
        let mut res = out.map(|v| v / s);
        if x.shape().len() == 1 {
            res = res.reshape(&[x.len()])?;
        }
        Ok(res)
    }

    /// Denoising score matching on `‖σ(t)·s + z‖²` with `t ~ U(t_min, 1)`.
    pub fn train(data: &ToySignals, p: OuveParams, cfg: &ScoreTrainConfig) -> Result<(Self, Vec<f64>)> {
        p.validate()?;
        let len = data.clean[0].len();
        let spec = MlpSpec {
            input: len,
            cond: len,
            embed: cfg.embed,
            hidden: vec![cfg.hidden, cfg.hidden],
            output: len,
        };
        let mut net = ScoreNet {
            params: MlpParams::init(spec, cfg.seed),
            embed: TimeEmbedding::new(cfg.embed)?,
            ouve: p,
        };
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                clip: Some(10.0),
                ..Default::default()
            },
            &net.params,
        );
        let mut rng = stream_rng(cfg.seed, stream::BATCHES);
        let n = data.clean.len();
        let mut losses = Vec::new();
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.epochs {
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let b = chunk.len();
                let rows = |v: &Vec<Tensor>| {
                    let r: Vec<&[f64]> = chunk.iter().map(|&i| v[i].data()).collect();
                    Tensor::stack_rows(&r)
                };
                let x0 = rows(&data.clean)?;
                let xc = rows(&data.corrupted)?;
                let ts: Vec<f64> = (0..b).map(|_| rng.random_range(SCORE_T_MIN..1.0)).collect();
                let z = Tensor::randn(&[b, len], &mut rng);
                let mut xt = x0.clone();
                for r in 0..b {
                    let d = (-p.gamma * ts[r]).exp();
                    let s = p.sigma(ts[r]);
                    let (a, c, zz) = (x0.row(r), xc.row(r), z.row(r));
                    let row: Vec<f64> = (0..len).map(|k| d * a[k] + (1.0 - d) * c[k] + s * zz[k]).collect();
                    xt.row_mut(r).copy_from_slice(&row);
                }
                let inp = net.input(&xt, &ts, &xc)?;
                let (out, tape) = net.params.forward(&inp)?;
                let diff = out.add(&z)?;
                let loss = diff.sum_sq() / b as f64;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        context: "score-matching loss".into(),
                        step: losses.len(),
                    });
                }
                let (g, _) = net.params.backward(&tape, &diff.scale(2.0 / b as f64))?;
                opt.step(&mut net.params, &g)?;
                losses.push(loss);
            }
        }
        Ok((net, losses))
    }
}

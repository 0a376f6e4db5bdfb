//! The signal and logit noise predictors and the conditioning layouts the
//! coupling strategies feed them.
//!
//! Signal net row: `[x_t ‖ x_cor ‖ y_t ‖ ŷ₀ ‖ emb(t)]`.
//! Logit net row:  `[y_t ‖ x_cond ‖ f(x_cond) ‖ x_cor ‖ emb(t)]`.
//! Slots that are absent or switched off by the mode flags are zero-filled,
//! so widths never change between phases.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ddpm::{eps_to_x0, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::nn::{load_params, save_params, MlpParams, MlpSpec, TimeEmbedding};
use crate::tensor::Tensor;
use crate::world::{FrozenClassifier, SIGNAL_RANGE};

/// Which conditioning slots each network consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningMode {
    pub signal_uses_y_t: bool,
    pub signal_uses_y_hat: bool,
    pub logit_uses_x_cond: bool,
}

impl ConditioningMode {
    /// Both cross slots live, as in per-step coupling.
    pub const COUPLED: Self = Self {
        signal_uses_y_t: true,
        signal_uses_y_hat: true,
        logit_uses_x_cond: true,
    };
    /// Point-estimate coupling: the `y_t` slot is zero-filled.
    pub const POINT_ESTIMATE: Self = Self {
        signal_uses_y_t: false,
        signal_uses_y_hat: true,
        logit_uses_x_cond: true,
    };
    /// No cross-conditioning at all.
    pub const INDEPENDENT: Self = Self {
        signal_uses_y_t: false,
        signal_uses_y_hat: false,
        logit_uses_x_cond: false,
    };
    /// Logit process conditioned on a signal, signal process unconditioned.
    pub const LOGIT_ONLY: Self = Self {
        signal_uses_y_t: false,
        signal_uses_y_hat: false,
        logit_uses_x_cond: true,
    };
}

/// Logit-side inputs for the signal net.
#[derive(Clone, Copy, Debug, Default)]
pub struct YCond<'a> {
    pub y_t: Option<&'a Tensor>,
    pub y_hat: Option<&'a Tensor>,
}

/// A signal used to condition the logit net together with its classifier
/// logits.
#[derive(Clone, Copy, Debug)]
pub struct XCond<'a> {
    pub signal: &'a Tensor,
    pub logits: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct DenoiserBundle {
    pub signal_net: MlpParams,
    pub logit_net: MlpParams,
    pub mode: ConditioningMode,
    /// Range the sampler clamps signal estimates to before consuming them.
    pub signal_range: Option<(f64, f64)>,
    /// Range the sampler clamps logit estimates to; see
    /// [`DenoiserBundle::calibrate_logit_range`].
    pub logit_range: Option<(f64, f64)>,
    schedule: Arc<NoiseSchedule>,
    classifier: Arc<FrozenClassifier>,
    embed: TimeEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    mode: ConditioningMode,
    schedule: ScheduleKind,
    steps: usize,
    embed: usize,
    signal_dim: usize,
    classes: usize,
    #[serde(default)]
    signal_range: Option<(f64, f64)>,
    #[serde(default)]
    logit_range: Option<(f64, f64)>,
}

/// Network shapes for a world with signal width `d` and `c` classes.
pub fn signal_spec(d: usize, c: usize, embed: usize, hidden: &[usize]) -> MlpSpec {
    MlpSpec {
        input: d,
        cond: d + 2 * c,
        embed,
        hidden: hidden.to_vec(),
        output: d,
    }
}

pub fn logit_spec(d: usize, c: usize, embed: usize, hidden: &[usize]) -> MlpSpec {
    MlpSpec {
        input: c,
        cond: 2 * d + c,
        embed,
        hidden: hidden.to_vec(),
        output: c,
    }
}

fn slot(t: Option<&Tensor>, on: bool, rows: usize, width: usize) -> Result<Tensor> {
    match t {
        Some(v) if on => {
            let v = v.as_batch();
            if v.rows() != rows || v.cols() != width {
                return Err(Error::shape(format!(
                    "conditioning slot expects [{rows}, {width}], got {:?}",
                    v.shape()
                )));
            }
            Ok(v)
        }
        _ => Ok(Tensor::zeros(&[rows, width])),
    }
}

impl DenoiserBundle {
    pub fn new(
        signal_net: MlpParams,
        logit_net: MlpParams,
        schedule: Arc<NoiseSchedule>,
        classifier: Arc<FrozenClassifier>,
        mode: ConditioningMode,
        embed: TimeEmbedding,
    ) -> Result<Self> {
        let (d, c) = (classifier.input_dim(), classifier.classes());
        let e = embed.width();
        let s = signal_net.spec();
        if (s.input, s.cond, s.embed, s.output) != (d, d + 2 * c, e, d) {
            return Err(Error::shape(format!(
                "signal net widths (input {}, cond {}, embed {}, output {}) do not match \
                 the declared conditioning (input {d}, cond {}, embed {e}, output {d})",
                s.input,
                s.cond,
                s.embed,
                s.output,
                d + 2 * c
            )));
        }
        let l = logit_net.spec();
        if (l.input, l.cond, l.embed, l.output) != (c, 2 * d + c, e, c) {
            return Err(Error::shape(format!(
                "logit net widths (input {}, cond {}, embed {}, output {}) do not match \
                 the declared conditioning (input {c}, cond {}, embed {e}, output {c})",
                l.input,
                l.cond,
                l.embed,
                l.output,
                2 * d + c
            )));
        }
        Ok(Self {
            signal_net,
            logit_net,
            mode,
            signal_range: Some(SIGNAL_RANGE),
            logit_range: None,
            schedule,
            classifier,
            embed,
        })
    }

    /// Fresh networks with the given hidden widths.
    pub fn init(
        hidden: &[usize],
        embed: TimeEmbedding,
        schedule: Arc<NoiseSchedule>,
        classifier: Arc<FrozenClassifier>,
        mode: ConditioningMode,
        seed: u64,
    ) -> Result<Self> {
        let (d, c) = (classifier.input_dim(), classifier.classes());
        let sig = MlpParams::init(signal_spec(d, c, embed.width(), hidden), seed);
        let log = MlpParams::init(logit_spec(d, c, embed.width(), hidden), seed ^ 0x5eed);
        Self::new(sig, log, schedule, classifier, mode, embed)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn classifier(&self) -> &FrozenClassifier {
        &self.classifier
    }

    pub fn embedding(&self) -> TimeEmbedding {
        self.embed
    }

    pub fn signal_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes()
    }

    /// `[rows, E]` embedding of a shared timestep.
    pub fn embed_t(&self, t: usize, rows: usize) -> Tensor {
        self.embed.embed_repeat(t as f64, rows)
    }

    /// `[rows, E]` embedding of per-row timesteps.
    pub fn embed_rows(&self, ts: &[usize]) -> Tensor {
        let f: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        self.embed.embed_batch(&f)
    }

    /// Signal-net input row for each batch row.
    pub fn signal_input(&self, x_t: &Tensor, emb: &Tensor, x_cor: &Tensor, y: YCond) -> Result<Tensor> {
        let (rows, d, c) = (x_t.rows(), self.signal_dim(), self.classes());
        let x_t = slot(Some(x_t), true, rows, d)?;
        let x_cor = slot(Some(x_cor), true, rows, d)?;
        let y_t = slot(y.y_t, self.mode.signal_uses_y_t, rows, c)?;
        let y_hat = slot(y.y_hat, self.mode.signal_uses_y_hat, rows, c)?;
        Tensor::concat_cols(&[&x_t, &x_cor, &y_t, &y_hat, emb])
    }

    /// Logit-net input row for each batch row.
    pub fn logit_input(&self, y_t: &Tensor, emb: &Tensor, x: Option<XCond>, x_cor: &Tensor) -> Result<Tensor> {
        let (rows, d, c) = (y_t.rows(), self.signal_dim(), self.classes());
        let on = self.mode.logit_uses_x_cond;
        let y_t = slot(Some(y_t), true, rows, c)?;
        let xs = slot(x.map(|x| x.signal), on, rows, d)?;
        let xl = slot(x.map(|x| x.logits), on, rows, c)?;
        let x_cor = slot(Some(x_cor), true, rows, d)?;
        Tensor::concat_cols(&[&y_t, &xs, &xl, &x_cor, emb])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.schedule.len() {
            return Err(Error::Timestep {
                t,
                reason: format!("denoisers accept 1..={}", self.schedule.len()),
            });
        }
        Ok(())
    }

    pub fn predict_eps_x(&self, x_t: &Tensor, t: usize, y: YCond, x_cor: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let inp = self.signal_input(x_t, &self.embed_t(t, x_t.rows()), x_cor, y)?;
        let out = self.signal_net.predict(&inp)?;
        Ok(if x_t.shape().len() == 1 { out.reshape(&[x_t.len()])? } else { out })
    }

    pub fn predict_eps_y(&self, y_t: &Tensor, t: usize, x: Option<XCond>, x_cor: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let inp = self.logit_input(y_t, &self.embed_t(t, y_t.rows()), x, x_cor)?;
        let out = self.logit_net.predict(&inp)?;
        Ok(if y_t.shape().len() == 1 { out.reshape(&[y_t.len()])? } else { out })
    }

    /// `eps_to_x0(x_t, predict_eps_x(…), t)`.
    pub fn estimate_x0(&self, x_t: &Tensor, t: usize, y: YCond, x_cor: &Tensor) -> Result<Tensor> {
        let eps = self.predict_eps_x(x_t, t, y, x_cor)?;
        eps_to_x0(&self.schedule, x_t, t, &eps)
    }

    /// `eps_to_x0(y_t, predict_eps_y(…), t)`.
    pub fn estimate_y0(&self, y_t: &Tensor, t: usize, x: Option<XCond>, x_cor: &Tensor) -> Result<Tensor> {
        let eps = self.predict_eps_y(y_t, t, x, x_cor)?;
        eps_to_x0(&self.schedule, y_t, t, &eps)
    }

    /// A signal estimate as the sampler consumes it: clamped to
    /// `signal_range` when one is set.
    pub fn clip_signal(&self, x: Tensor) -> Tensor {
        match self.signal_range {
            Some((lo, hi)) => x.map(|v| v.clamp(lo, hi)),
            None => x,
        }
    }

    /// A logit estimate as the sampler consumes it.
    pub fn clip_logits(&self, y: Tensor) -> Tensor {
        match self.logit_range {
            Some((lo, hi)) => y.map(|v| v.clamp(lo, hi)),
            None => y,
        }
    }

    /// Sets `logit_range` to the span of the classifier's logits on clean
    /// signals, widened by `margin` of that span on each side.
    pub fn calibrate_logit_range(&mut self, x0: &Tensor, margin: f64) -> Result<()> {
        let y = self.classifier.classify(x0)?;
        let lo = y.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = y.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::config("cannot calibrate a logit range from an empty batch"));
        }
        let pad = margin * (hi - lo);
        self.logit_range = Some((lo - pad, hi + pad));
        Ok(())
    }

    /// Same networks under a different conditioning mode.
    pub fn with_mode(&self, mode: ConditioningMode) -> Self {
        Self { mode, ..self.clone() }
    }

    /// Same networks and classifier over a different schedule of equal length.
    pub fn with_schedule(&self, schedule: Arc<NoiseSchedule>) -> Self {
        Self {
            schedule,
            ..self.clone()
        }
    }

    /// `signal.bin`, `logit.bin` and `manifest.json` under `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_params(&self.signal_net, BufWriter::new(File::create(dir.join("signal.bin"))?))?;
        save_params(&self.logit_net, BufWriter::new(File::create(dir.join("logit.bin"))?))?;
        let m = Manifest {
            mode: self.mode,
            schedule: self.schedule.kind(),
            steps: self.schedule.len(),
            embed: self.embed.width(),
            signal_dim: self.signal_dim(),
            classes: self.classes(),
            signal_range: self.signal_range,
            logit_range: self.logit_range,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path, classifier: Arc<FrozenClassifier>) -> Result<Self> {
        let open = |name: &str| {
            File::open(dir.join(name))
                .map(BufReader::new)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(name).display())))
        };
        let m: Manifest = serde_json::from_reader(open("manifest.json")?)?;
        if m.signal_dim != classifier.input_dim() || m.classes != classifier.classes() {
            return Err(Error::Checkpoint("bundle manifest does not match the classifier".into()));
        }
        let sig = load_params(open("signal.bin")?, None)?;
        let log = load_params(open("logit.bin")?, None)?;
        let schedule = Arc::new(NoiseSchedule::new(m.schedule, m.steps)?);
        let mut b = Self::new(sig, log, schedule, classifier, m.mode, TimeEmbedding::new(m.embed)?)?;
        b.signal_range = m.signal_range;
        b.logit_range = m.logit_range;
        Ok(b)
    }
}

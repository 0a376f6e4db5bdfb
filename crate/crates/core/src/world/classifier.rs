use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dataset::LabeledExample;
use super::IMAGE_PIXELS;
use crate::error::{Error, Result};
use crate::nn::{load_params, save_params, Adam, AdamConfig, MlpParams, MlpSpec};
use crate::rng::{stream, stream_rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Target smoothing; keeps logit magnitudes moderate.
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

/// The classifier `f_φ`. Parameters are private and never change once built.
#[derive(Clone, Debug)]
pub struct FrozenClassifier {
    params: MlpParams,
    classes: usize,
    clean_accuracy: f64,
}

fn softmax_xent_grad(logits: &[f64], label: usize, smoothing: f64, grad: &mut [f64]) -> f64 {
    let c = logits.len();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    let mut loss = 0.0;
    for k in 0..c {
        let p = (logits[k] - m).exp() / z;
        let target = if k == label { 1.0 - smoothing } else { 0.0 } + smoothing / c as f64;
        loss -= target * ((logits[k] - m) - z.ln());
        grad[k] = p - target;
    }
    loss
}

impl FrozenClassifier {
    /// Cross-entropy training on clean images; the clean-set accuracy is
    /// recorded at the end.
    pub fn train(examples: &[LabeledExample], classes: usize, cfg: &ClassifierConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Dataset("classifier training set is empty".into()));
        }
        let dim = examples[0].x0.len();
        let spec = MlpSpec {
            input: dim,
            cond: 0,
            embed: 0,
            hidden: cfg.hidden.clone(),
            output: classes,
        };
        let mut params = MlpParams::init(spec, cfg.seed);
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            },
            &params,
        );
        let mut rng = stream_rng(cfg.seed, stream::BATCHES);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut step = 0;
        for _ in 0..cfg.epochs {
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let rows: Vec<&[f64]> = chunk.iter().map(|&i| examples[i].x0.data()).collect();
                let x = Tensor::stack_rows(&rows)?;
                let (logits, tape) = params.forward(&x)?;
                let mut grad = Tensor::zeros(&[chunk.len(), classes]);
                let mut loss = 0.0;
                for (r, &i) in chunk.iter().enumerate() {
                    loss += softmax_xent_grad(logits.row(r), examples[i].label, cfg.label_smoothing, grad.row_mut(r));
                }
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        context: "classifier cross-entropy".into(),
                        step,
                    });
                }
                let b = chunk.len() as f64;
                let (g, _) = params.backward(&tape, &grad.scale(1.0 / b))?;
                opt.step(&mut params, &g)?;
                step += 1;
            }
        }
        let mut fc = Self {
            params,
            classes,
            clean_accuracy: 0.0,
        };
        let clean: Vec<&[f64]> = examples.iter().map(|e| e.x0.data()).collect();
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        fc.clean_accuracy = fc.accuracy(&Tensor::stack_rows(&clean)?, &labels)?;
        Ok(fc)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.params.spec().input
    }

    pub fn clean_accuracy(&self) -> f64 {
        self.clean_accuracy
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    /// Raw logits, one row per input row.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        self.params.predict(x)
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.classify(&x.as_batch())?.argmax_rows();
        if pred.len() != labels.len() {
            return Err(Error::shape("one label per row expected"));
        }
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.classes as u64).to_le_bytes())?;
        w.write_all(&self.clean_accuracy.to_le_bytes())?;
        save_params(&self.params, w)
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let classes = u64::from_le_bytes(b) as usize;
        r.read_exact(&mut b)?;
        let clean_accuracy = f64::from_le_bytes(b);
        let params = load_params(r, None)?;
        if params.spec().output != classes || params.spec().input != IMAGE_PIXELS {
            return Err(Error::Checkpoint("classifier widths do not match this world".into()));
        }
        Ok(Self {
            params,
            classes,
            clean_accuracy,
        })
    }
}

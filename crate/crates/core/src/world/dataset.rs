use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::corrupt::Corruption;
use super::glyphs::{render_glyph, GLYPH_CATALOGUE};
use super::{IMAGE_PIXELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, stream_rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub x0: Tensor,
    pub label: usize,
    pub x_cor: Tensor,
}

/// The label-free view handed to trainers: clean and corrupted signals only.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPairs {
    x0: Tensor,
    x_cor: Tensor,
}

impl TrainingPairs {
    pub fn from_examples(examples: &[LabeledExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Dataset("no training pairs".into()));
        }
        let x0: Vec<&[f64]> = examples.iter().map(|e| e.x0.data()).collect();
        let xc: Vec<&[f64]> = examples.iter().map(|e| e.x_cor.data()).collect();
        Self::new(Tensor::stack_rows(&x0)?, Tensor::stack_rows(&xc)?)
    }

    pub fn new(x0: Tensor, x_cor: Tensor) -> Result<Self> {
        x0.same_shape(&x_cor)?;
        if x0.rows() == 0 {
            return Err(Error::Dataset("no training pairs".into()));
        }
        Ok(Self {
            x0: x0.as_batch(),
            x_cor: x_cor.as_batch(),
        })
    }

    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x0.cols()
    }

    pub fn x0(&self) -> &Tensor {
        &self.x0
    }

    pub fn x_cor(&self) -> &Tensor {
        &self.x_cor
    }
}

/// `n_per_class` clean examples of each of the first `classes` glyphs,
/// interleaved by class. `x_cor` starts as a copy of `x0`.
pub fn gen_dataset(classes: usize, n_per_class: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    if classes < 2 {
        return Err(Error::config("the world needs at least two classes"));
    }
    if classes > GLYPH_CATALOGUE.len() {
        return Err(Error::config(format!(
            "{classes} classes requested but the glyph catalogue has {}",
            GLYPH_CATALOGUE.len()
        )));
    }
    let mut out = Vec::with_capacity(classes * n_per_class);
    for i in 0..n_per_class {
        for label in 0..classes {
            let idx = (i * classes + label) as u64;
            let mut rng = stream_rng(derive_seed(seed, idx), stream::DATA);
            let x0 = Tensor::from_vec(render_glyph(label, &mut rng));
            out.push(LabeledExample {
                x_cor: x0.clone(),
                x0,
                label,
            });
        }
    }
    Ok(out)
}

/// Fill every `x_cor` from its `x0` with a per-example corruption stream.
pub fn corrupt_examples(examples: &mut [LabeledExample], corruption: Corruption, seed: u64) -> Result<()> {
    corruption.validate()?;
    for (i, e) in examples.iter_mut().enumerate() {
        let mut rng = stream_rng(derive_seed(seed, i as u64), stream::CORRUPT);
        e.x_cor = corruption.apply(&e.x0, &mut rng)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub count: usize,
    pub seed: u64,
    pub corruption: Option<Corruption>,
    pub corruption_seed: u64,
}

const DATASET_MAGIC: &str = "coupled-world-dataset v1";

/// Text format: a magic line, a JSON header line, then one line per example
/// `label;x0 values;x_cor values` with shortest round-trip decimals.
pub fn write_dataset<W: Write>(header: &DatasetHeader, examples: &[LabeledExample], mut w: W) -> Result<()> {
    writeln!(w, "{DATASET_MAGIC}")?;
    writeln!(w, "{}", serde_json::to_string(header)?)?;
    for e in examples {
        let mut line = format!("{};", e.label);
        for (k, v) in e.x0.data().iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            write!(line, "{v:?}").expect("writing to a String");
        }
        line.push(';');
        for (k, v) in e.x_cor.data().iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            write!(line, "{v:?}").expect("writing to a String");
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<(DatasetHeader, Vec<LabeledExample>)> {
    let mut lines = r.lines();
    let magic = lines.next().transpose()?.unwrap_or_default();
    if magic.trim() != DATASET_MAGIC {
        return Err(Error::Dataset(format!("unrecognised dataset header {magic:?}")));
    }
    let hdr_line = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Dataset("missing header".into()))?;
    let header: DatasetHeader = serde_json::from_str(&hdr_line)?;
    if header.height != IMAGE_SIZE || header.width != IMAGE_SIZE {
        return Err(Error::Dataset("image size does not match this world".into()));
    }
    let parse = |s: &str| -> Result<Tensor> {
        let v: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Dataset(format!("bad value {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if v.len() != IMAGE_PIXELS {
            return Err(Error::Dataset(format!("expected {IMAGE_PIXELS} values, got {}", v.len())));
        }
        Ok(Tensor::from_vec(v))
    };
    let mut out = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(';');
        let (Some(l), Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Dataset("example line needs three fields".into()));
        };
        let label: usize = l
            .trim()
            .parse()
            .map_err(|e| Error::Dataset(format!("bad label {l:?}: {e}")))?;
        if label >= header.classes {
            return Err(Error::Dataset(format!("label {label} out of range")));
        }
        out.push(LabeledExample {
            x0: parse(a)?,
            label,
            x_cor: parse(b)?,
        });
    }
    if out.len() != header.count {
        return Err(Error::Dataset(format!(
            "header promises {} examples, file holds {}",
            header.count,
            out.len()
        )));
    }
    Ok((header, out))
}

/// CSV of per-example logits for debugging: `index,label,logit_0,…`.
pub fn export_logits_csv<W: Write>(logits: &Tensor, labels: &[usize], mut w: W) -> Result<()> {
    let header: Vec<String> = (0..logits.cols()).map(|k| format!("logit_{k}")).collect();
    writeln!(w, "index,label,{}", header.join(","))?;
    for r in 0..logits.rows() {
        let vals: Vec<String> = logits.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{r},{},{}", labels.get(r).copied().unwrap_or(0), vals.join(","))?;
    }
    Ok(())
}

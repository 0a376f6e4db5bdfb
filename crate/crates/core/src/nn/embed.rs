use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sinusoidal embedding of a (possibly fractional) timestep:
/// `[sin(t·f_0), …, sin(t·f_{h-1}), cos(t·f_0), …, cos(t·f_{h-1})]` with
/// `f_i = max_period^(-i/h)` and `h = width/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    width: usize,
    max_period: f64,
}

impl TimeEmbedding {
    pub const DEFAULT_MAX_PERIOD: f64 = 10_000.0;

    pub fn new(width: usize) -> Result<Self> {
        Self::with_period(width, Self::DEFAULT_MAX_PERIOD)
    }

    pub fn with_period(width: usize, max_period: f64) -> Result<Self> {
        if width % 2 != 0 {
            return Err(Error::config(format!(
                "time embedding width must be even, got {width}"
            )));
        }
        if max_period <= 1.0 || !max_period.is_finite() {
            return Err(Error::config("time embedding period must exceed 1"));
        }
        Ok(Self { width, max_period })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn embed(&self, t: f64) -> Vec<f64> {
        let h = self.width / 2;
        let mut out = vec![0.0; self.width];
        for i in 0..h {
            let f = self.max_period.powf(-(i as f64) / h as f64);
            out[i] = (t * f).sin();
            out[h + i] = (t * f).cos();
        }
        out
    }

    /// One row per entry of `ts`.
    pub fn embed_batch(&self, ts: &[f64]) -> Tensor {
        let mut data = Vec::with_capacity(ts.len() * self.width);
        for &t in ts {
            data.extend(self.embed(t));
        }
        Tensor::from_rows(ts.len(), self.width, data).expect("consistent widths")
    }

    /// `rows` copies of the embedding of `t`.
    pub fn embed_repeat(&self, t: f64, rows: usize) -> Tensor {
        let e = self.embed(t);
        let mut data = Vec::with_capacity(rows * self.width);
        for _ in 0..rows {
            data.extend_from_slice(&e);
        }
        Tensor::from_rows(rows, self.width, data).expect("consistent widths")
    }
}

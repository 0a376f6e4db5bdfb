use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::IMAGE_SIZE;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{reflect_index, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Corruption {
    /// Replace a fixed fraction of pixels with uniform white noise.
    PixelReplace { fraction: f64 },
    /// 5×5 Gaussian blur with σ = 2.
    GaussianBlur,
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Corruption::PixelReplace { fraction } if !(fraction > 0.0 && fraction < 1.0) => {
                Err(Error::config(format!("pixel fraction must lie in (0,1), got {fraction}")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Corruption::PixelReplace { fraction } => format!("pixel{:.0}", fraction * 100.0),
            Corruption::GaussianBlur => "blur".into(),
        }
    }

    pub fn apply(&self, x0: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        match *self {
            Corruption::PixelReplace { fraction } => corrupt_pixel_replace(x0, fraction, rng),
            Corruption::GaussianBlur => corrupt_gaussian_blur(x0),
        }
    }
}

fn check_image(x: &Tensor) -> Result<()> {
    if x.len() != IMAGE_SIZE * IMAGE_SIZE {
        return Err(Error::shape(format!(
            "expected a {IMAGE_SIZE}x{IMAGE_SIZE} image, got {} values",
            x.len()
        )));
    }
    Ok(())
}

/// Replace exactly `round(fraction·H·W)` distinct pixels with U(0,1) draws;
/// every other pixel is copied bit-for-bit.
pub fn corrupt_pixel_replace(x0: &Tensor, fraction: f64, rng: &mut Rng) -> Result<Tensor> {
    check_image(x0)?;
    Corruption::PixelReplace { fraction }.validate()?;
    let n = x0.len();
    let k = (fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut out = x0.clone();
    for &i in &idx[..k] {
        out.data_mut()[i] = rng.random_range(0.0..1.0f64).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Normalised 5×5 Gaussian kernel with σ = 2, row-major.
pub fn blur_kernel() -> [f64; 25] {
    let mut k = [0.0; 25];
    for i in 0..5 {
        for j in 0..5 {
            let (a, b) = (i as f64 - 2.0, j as f64 - 2.0);
            k[i * 5 + j] = (-(a * a + b * b) / 8.0).exp();
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Convolution with `blur_kernel` under mirror (reflect) padding.
pub fn corrupt_gaussian_blur(x0: &Tensor) -> Result<Tensor> {
    check_image(x0)?;
    let k = blur_kernel();
    let n = IMAGE_SIZE;
    let src = x0.data();
    let mut out = x0.clone();
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    let rr = reflect_index(r as isize + i as isize - 2, n);
                    let cc = reflect_index(c as isize + j as isize - 2, n);
                    acc += k[i * 5 + j] * src[rr * n + cc];
                }
            }
            out.data_mut()[r * n + c] = acc;
        }
    }
    Ok(out)
}

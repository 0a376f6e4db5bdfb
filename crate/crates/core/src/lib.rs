//! Coupled diffusion over signals and classifier logits.
//!
//! Two denoising processes run side by side: one restores a corrupted
//! signal, the other refines the logits a frozen classifier assigns to it.
//! The crate provides the numeric substrate (dense tensors, a small
//! conditioned MLP, Adam), the DDPM/DDIM and OUVE-SDE cores, a procedural
//! glyph world, the coupling strategies with their call ledgers, and the
//! trainers that fit the denoisers.

pub mod coupling;
pub mod ddpm;
pub mod denoisers;
pub mod error;
pub mod nn;
pub mod rng;
pub mod sde;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use tensor::Tensor;

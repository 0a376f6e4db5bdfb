//! Small conditioned MLPs, their optimiser, time embeddings and checkpoints.

mod adam;
mod checkpoint;
mod embed;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_params, save_params, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use embed::TimeEmbedding;
pub use mlp::{Gradients, MlpParams, MlpSpec, Tape};

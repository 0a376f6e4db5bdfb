//! The synthetic classification world: procedural glyph images, the
//! corruption generators, the frozen clean-data classifier and dataset files.

mod classifier;
mod corrupt;
mod dataset;
mod glyphs;

pub use classifier::{ClassifierConfig, FrozenClassifier};
pub use corrupt::{blur_kernel, corrupt_gaussian_blur, corrupt_pixel_replace, Corruption};
pub use dataset::{
    corrupt_examples, export_logits_csv, gen_dataset, read_dataset, write_dataset, DatasetHeader,
    LabeledExample, TrainingPairs,
};
pub use glyphs::{render_glyph, GLYPH_CATALOGUE};

/// Side length of the square world images.
pub const IMAGE_SIZE: usize = 12;
/// Every clean and corrupted pixel lies in this range.
pub const SIGNAL_RANGE: (f64, f64) = (0.0, 1.0);
pub const IMAGE_PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

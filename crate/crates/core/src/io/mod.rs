//! On-disk formats: model checkpoints and grayscale images.

mod checkpoint;
mod image;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC};
pub use image::{load_image, load_pfm, load_pgm, save_image, save_pfm, save_pgm};

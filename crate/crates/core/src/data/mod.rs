//! Images, the synthetic corpus, file formats and run configuration.

pub mod checkpoint;
pub mod config;
mod image;
pub mod ppm;
pub mod shapes;

pub use checkpoint::{Checkpoint, ModelKind};
pub use config::RunConfig;
pub use image::Image;
pub use ppm::{read_ppm, write_ppm};
pub use shapes::{ShapesTexSpec, Split, NUM_CLASSES};

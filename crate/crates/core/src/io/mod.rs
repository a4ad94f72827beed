//! File formats and dataset plumbing: PPM images, synthetic data
//! generation, binary tensor checkpoints and the run configuration.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod image;

pub use checkpoint::{digest_tensors, load_tensors, save_tensors};
pub use config::RunConfig;
pub use data::{
    generate_dataset, load_dataset, save_dataset, Dataset, DatasetItem, SyntheticFamily,
};
pub use image::{decode_ppm, encode_ppm, read_ppm, write_ppm};

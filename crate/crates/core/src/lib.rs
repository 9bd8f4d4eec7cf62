//! Virtual DES toolkit: LE/DES ingestion, mutual-information registration,
//! NL-means denoising, dataset construction, a desk-scale U-Net translator,
//! CycleGAN loss kernels and classification reporting.

pub mod dataset;
pub mod denoise;
pub mod eval;
pub mod gan;
pub mod image;
pub mod ingest;
pub mod registration;
pub mod synth;
pub mod translator;

pub use crate::image::{load_image, ImageGrid};

//! Classification dataset construction: tissue masks, crops, patient-level
//! splits and synchronized augmentation.

pub mod augment;
pub mod crop;
pub mod mask;
pub mod split;

use thiserror::Error;

pub use augment::{apply_transform, augment_pair, sample_transform, TransformSpec};
pub use crop::{crop_window, extract_crop, sample_normal_crop, CropSource, CropSpec, DEFAULT_CROP_SIZE};
pub use mask::{breast_mask, BinaryMask};
pub use split::{stratified_patient_split, SplitManifest, SplitSet, DEFAULT_FRACTIONS};

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("image is uniform: no tissue mask can be derived")]
    EmptyMask,
    #[error("crop of size {size} does not fit a {width}x{height} image")]
    CropTooLarge { width: usize, height: usize, size: usize },
    #[error("no window with tissue coverage >= {min_tissue} after {attempts} attempts")]
    SamplingFailed { attempts: usize, min_tissue: f64 },
    #[error("split fractions {0:?} must be positive and sum to 1")]
    InvalidFractions([f64; 3]),
    #[error("split infeasible: {reason}{}", achieved.map(|a| format!(" (achieved {:.1}/{:.1}/{:.1}%)", 100.0 * a[0], 100.0 * a[1], 100.0 * a[2])).unwrap_or_default())]
    SplitInfeasible { reason: String, achieved: Option<[f64; 3]> },
    #[error("augmentation requires a square image, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
}

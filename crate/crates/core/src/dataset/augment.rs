//! Seeded, shape-preserving augmentation applied identically to LE and DES.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::image::ImageGrid;

pub const SHARPNESS_RANGE: (f64, f64) = (0.5, 2.0);
pub const SHARPNESS_PROB: f64 = 0.5;
pub const AUTOCONTRAST_PROB: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    /// Counter-clockwise quarter turns, 0..=3.
    pub rot_quarter: u8,
    pub hflip: bool,
    pub vflip: bool,
    pub sharpness_factor: Option<f64>,
    pub autocontrast: bool,
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self {
            rot_quarter: 0,
            hflip: false,
            vflip: false,
            sharpness_factor: None,
            autocontrast: false,
        }
    }

    /// True when only pixel permutations are involved.
    pub fn is_geometric(&self) -> bool {
        self.sharpness_factor.is_none() && !self.autocontrast
    }
}

/// Draws a transform from the `(seed, step_index)` stream. Field order is
/// fixed, so the result depends on nothing else.
pub fn sample_transform(seed: u64, step_index: u64) -> TransformSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step_index);
    let rot_quarter = rng.gen_range(0..4u8);
    let hflip = rng.gen_bool(0.5);
    let vflip = rng.gen_bool(0.5);
    let sharpen = rng.gen_bool(SHARPNESS_PROB);
    let factor = rng.gen_range(SHARPNESS_RANGE.0..=SHARPNESS_RANGE.1);
    let autocontrast = rng.gen_bool(AUTOCONTRAST_PROB);
    TransformSpec {
        rot_quarter,
        hflip,
        vflip,
        sharpness_factor: sharpen.then_some(factor),
        autocontrast,
    }
}

/// Source coordinate of output pixel `(x, y)` under the geometric part of
/// `spec` on an `n`x`n` image.
pub fn source_coord(spec: &TransformSpec, n: usize, x: usize, y: usize) -> (usize, usize) {
    // Undo the steps in reverse: vflip, hflip, then the rotation.
    let y = if spec.vflip { n - 1 - y } else { y };
    let x = if spec.hflip { n - 1 - x } else { x };
    let (mut x, mut y) = (x, y);
    for _ in 0..spec.rot_quarter % 4 {
        // One counter-clockwise turn maps in(n-1-y, x) to out(x, y).
        (x, y) = (n - 1 - y, x);
    }
    (x, y)
}

/// Rotation, horizontal flip, vertical flip, sharpness, autocontrast, in
/// that order.
pub fn apply_transform(img: &ImageGrid, spec: &TransformSpec) -> Result<ImageGrid, DatasetError> {
    if img.width() != img.height() {
        return Err(DatasetError::NotSquare(img.width(), img.height()));
    }
    if spec.rot_quarter > 3 {
        return Err(DatasetError::InvalidTransform(format!("rot_quarter {}", spec.rot_quarter)));
    }
    let n = img.width();
    let mut out = ImageGrid::from_fn(n, n, |x, y| {
        let (sx, sy) = source_coord(spec, n, x, y);
        img.get(sx, sy)
    });
    if let Some(f) = spec.sharpness_factor {
        if !(SHARPNESS_RANGE.0..=SHARPNESS_RANGE.1).contains(&f) {
            return Err(DatasetError::InvalidTransform(format!("sharpness factor {f}")));
        }
        out = sharpness(&out, f);
    }
    if spec.autocontrast {
        out = autocontrast(&out);
    }
    Ok(out)
}

/// `blur + f * (img - blur)` with a 3x3 edge-replicated box blur.
pub fn sharpness(img: &ImageGrid, factor: f64) -> ImageGrid {
    ImageGrid::from_fn(img.width(), img.height(), |x, y| {
        let mut sum = 0u32;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                sum += img.get_clamped(x as isize + dx, y as isize + dy) as u32;
            }
        }
        let blur = sum as f64 / 9.0;
        let v = blur + factor * (img.get(x, y) as f64 - blur);
        v.round_ties_even().clamp(0.0, 255.0) as u8
    })
}

/// Affine stretch of `[min, max]` onto `[0, 255]`, rounding half up.
pub fn autocontrast(img: &ImageGrid) -> ImageGrid {
    let (lo, hi) = img.min_max();
    if lo == hi {
        return img.clone();
    }
    let span = (hi - lo) as u32;
    let data = img
        .data()
        .iter()
        .map(|&v| ((2 * (v - lo) as u32 * 255 + span) / (2 * span)) as u8)
        .collect();
    ImageGrid::new(img.width(), img.height(), data).expect("same dimensions")
}

/// Applies one spec to both members of a pair.
pub fn augment_pair(
    le: &ImageGrid,
    des: &ImageGrid,
    spec: &TransformSpec,
) -> Result<(ImageGrid, ImageGrid), DatasetError> {
    Ok((apply_transform(le, spec)?, apply_transform(des, spec)?))
}

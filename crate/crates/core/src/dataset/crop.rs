//! Square crop windows in the LE frame, shared with the registered DES image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::BinaryMask;
use super::DatasetError;
use crate::image::ImageGrid;
use crate::ingest::{Label, Side, View};

pub const DEFAULT_CROP_SIZE: usize = 224;
pub const MAX_SAMPLING_ATTEMPTS: usize = 1000;

/// Breast view a crop is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CropSource {
    pub patient_id: u32,
    pub side: Side,
    pub view: View,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub source: CropSource,
    /// Centre in LE pixel coordinates.
    pub center: (usize, usize),
    pub size: usize,
    pub label: Label,
}

/// Top-left corner of the `size`x`size` window centred at `center`, shifted
/// (never padded) so it lies inside a `dims` frame.
pub fn crop_window(dims: (usize, usize), center: (usize, usize), size: usize) -> Result<(usize, usize), DatasetError> {
    let (w, h) = dims;
    if size == 0 || w < size || h < size {
        return Err(DatasetError::CropTooLarge { width: w, height: h, size });
    }
    let half = size / 2;
    let x0 = center.0.saturating_sub(half).min(w - size);
    let y0 = center.1.saturating_sub(half).min(h - size);
    Ok((x0, y0))
}

pub fn extract_crop(img: &ImageGrid, spec: &CropSpec) -> Result<ImageGrid, DatasetError> {
    let (x0, y0) = crop_window(img.dims(), spec.center, spec.size)?;
    Ok(img.sub_image(x0, y0, spec.size, spec.size))
}

/// Draws crop centres uniformly until a window has at least `min_tissue`
/// mask coverage. Deterministic in `seed`.
pub fn sample_normal_crop(
    source: CropSource,
    mask: &BinaryMask,
    size: usize,
    seed: u64,
    min_tissue: f64,
) -> Result<CropSpec, DatasetError> {
    let (w, h) = (mask.width(), mask.height());
    if size == 0 || w < size || h < size {
        return Err(DatasetError::CropTooLarge { width: w, height: h, size });
    }
    let sat = mask.integral();
    let stride = w + 1;
    let area = (size * size) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_SAMPLING_ATTEMPTS {
        let x0 = rng.gen_range(0..=w - size);
        let y0 = rng.gen_range(0..=h - size);
        let (x1, y1) = (x0 + size, y0 + size);
        let covered = sat[y1 * stride + x1] + sat[y0 * stride + x0] - sat[y0 * stride + x1] - sat[y1 * stride + x0];
        if covered as f64 / area >= min_tissue && covered > 0 {
            return Ok(CropSpec {
                source,
                center: (x0 + size / 2, y0 + size / 2),
                size,
                label: Label::NonMalignant,
            });
        }
    }
    Err(DatasetError::SamplingFailed {
        attempts: MAX_SAMPLING_ATTEMPTS,
        min_tissue,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src() -> CropSource {
        CropSource {
            patient_id: 1,
            side: Side::Left,
            view: View::CC,
        }
    }

    fn spec(center: (usize, usize), size: usize) -> CropSpec {
        CropSpec {
            source: src(),
            center,
            size,
            label: Label::Malignant,
        }
    }

    #[test]
    fn window_arithmetic() {
        let img = ImageGrid::from_fn(224, 224, |x, y| ((x + y) % 256) as u8);
        assert_eq!(extract_crop(&img, &spec((3, 200), 224)).unwrap(), img);

        let big = ImageGrid::from_fn(448, 448, |x, y| ((x * 3 + y) % 256) as u8);
        assert_eq!(crop_window(big.dims(), (112, 112), 224).unwrap(), (0, 0));
        assert_eq!(crop_window(big.dims(), (5, 5), 224).unwrap(), (0, 0));
        assert_eq!(crop_window(big.dims(), (447, 440), 224).unwrap(), (224, 224));
        assert_eq!(crop_window(big.dims(), (300, 250), 224).unwrap(), (188, 138));
        let c = extract_crop(&big, &spec((112, 112), 224)).unwrap();
        assert_eq!(c, big.sub_image(0, 0, 224, 224));
    }

    #[test]
    fn crop_larger_than_image_fails() {
        let img = ImageGrid::filled(100, 300, 0);
        assert!(matches!(
            extract_crop(&img, &spec((50, 50), 224)),
            Err(DatasetError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn sampling_full_empty_and_determinism() {
        let full = BinaryMask::filled(64, 48, true);
        let s = sample_normal_crop(src(), &full, 16, 42, 0.5).unwrap();
        assert_eq!(s.size, 16);
        assert_eq!(s, sample_normal_crop(src(), &full, 16, 42, 0.5).unwrap());

        let empty = BinaryMask::filled(64, 48, false);
        assert!(matches!(
            sample_normal_crop(src(), &empty, 16, 42, 0.5),
            Err(DatasetError::SamplingFailed { .. })
        ));
    }

    #[test]
    fn sampled_windows_meet_coverage() {
        let m = BinaryMask::new(64, 64, (0..64 * 64).map(|i| (i % 64) < 24).collect());
        for seed in 0..20 {
            let s = sample_normal_crop(src(), &m, 16, seed, 0.75).unwrap();
            let (x0, y0) = crop_window((64, 64), s.center, 16).unwrap();
            let covered = (y0..y0 + 16)
                .flat_map(|y| (x0..x0 + 16).map(move |x| (x, y)))
                .filter(|&(x, y)| m.get(x, y))
                .count();
            assert!(covered as f64 / 256.0 >= 0.75);
        }
    }
}

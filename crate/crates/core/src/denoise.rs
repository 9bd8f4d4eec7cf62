//! Non-local means denoising (the "LED" image).
//!
//! Classic patch-similarity weighting with a uniform patch kernel:
//! `w(p, q) = exp(-d2(p, q) / (h^2 * A))`, where `d2` is the sum of squared
//! differences between the template patches around `p` and `q` and `A` is the
//! patch area. Borders use edge replication.

use rayon::prelude::*;
use thiserror::Error;

use crate::image::ImageGrid;

#[derive(Debug, Error, PartialEq)]
pub enum DenoiseError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("image {width}x{height} is smaller than the {template}x{template} template")]
    TooSmall {
        width: usize,
        height: usize,
        template: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NlmParams {
    pub h: f64,
    pub template: usize,
    pub search: usize,
}

impl Default for NlmParams {
    fn default() -> Self {
        Self {
            h: 10.0,
            template: 7,
            search: 21,
        }
    }
}

impl NlmParams {
    pub fn validate(&self) -> Result<(), DenoiseError> {
        let bad = |m: &str| Err(DenoiseError::InvalidParams(m.to_string()));
        if !(self.h > 0.0) || !self.h.is_finite() {
            return bad("h must be a positive finite number");
        }
        if self.template % 2 == 0 || self.search % 2 == 0 {
            return bad("template and search sides must be odd");
        }
        if self.search < self.template {
            return bad("search window must be at least as large as the template");
        }
        Ok(())
    }
}

/// Edge-replicated copy of `img` with `pad` extra pixels on each side.
struct Padded {
    data: Vec<i32>,
    stride: usize,
}

impl Padded {
    fn new(img: &ImageGrid, pad: usize) -> Self {
        let stride = img.width() + 2 * pad;
        let rows = img.height() + 2 * pad;
        let mut data = Vec::with_capacity(stride * rows);
        for y in 0..rows {
            for x in 0..stride {
                data.push(img.get_clamped(x as isize - pad as isize, y as isize - pad as isize) as i32);
            }
        }
        Self { data, stride }
    }
}

/// Denoises `img` with non-local means. Output pixels are rounded half to even.
pub fn nl_means(img: &ImageGrid, p: &NlmParams) -> Result<ImageGrid, DenoiseError> {
    p.validate()?;
    let (w, h) = img.dims();
    if w < p.template || h < p.template {
        return Err(DenoiseError::TooSmall {
            width: w,
            height: h,
            template: p.template,
        });
    }
    let t = p.template / 2;
    let s = p.search / 2;
    let pad = t + s;
    let padded = Padded::new(img, pad);
    let denom = p.h * p.h * (p.template * p.template) as f64;

    let rows: Vec<Vec<u8>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                row.push(denoise_pixel(&padded, x + pad, y + pad, t, s, denom));
            }
            row
        })
        .collect();
    let data = rows.into_iter().flatten().collect();
    Ok(ImageGrid::new(w, h, data).expect("dimensions preserved"))
}

fn patch_distance(padded: &Padded, px: usize, py: usize, qx: usize, qy: usize, t: usize) -> i64 {
    let stride = padded.stride;
    let side = 2 * t + 1;
    let mut d2: i64 = 0;
    for k in 0..side {
        let pa = (py - t + k) * stride + px - t;
        let qa = (qy - t + k) * stride + qx - t;
        let a = &padded.data[pa..pa + side];
        let b = &padded.data[qa..qa + side];
        let mut acc: i32 = 0;
        for (&u, &v) in a.iter().zip(b) {
            let d = u - v;
            acc += d * d;
        }
        d2 += acc as i64;
    }
    d2
}

fn denoise_pixel(padded: &Padded, px: usize, py: usize, t: usize, s: usize, denom: f64) -> u8 {
    let mut wsum = 0.0f64;
    let mut vsum = 0.0f64;
    for qy in py - s..=py + s {
        for qx in px - s..=px + s {
            let d2 = patch_distance(padded, px, py, qx, qy, t);
            let weight = (-(d2 as f64) / denom).exp();
            wsum += weight;
            vsum += weight * padded.data[qy * padded.stride + qx] as f64;
        }
    }
    // The centre patch always has weight 1, so wsum >= 1.
    (vsum / wsum).round_ties_even().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn small() -> NlmParams {
        NlmParams {
            h: 10.0,
            template: 3,
            search: 7,
        }
    }

    #[test]
    fn parameter_validation() {
        NlmParams::default().validate().unwrap();
        for bad in [
            NlmParams { h: 0.0, ..NlmParams::default() },
            NlmParams { template: 6, ..NlmParams::default() },
            NlmParams { search: 20, ..NlmParams::default() },
            NlmParams { template: 9, search: 7, h: 1.0 },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = ImageGrid::filled(6, 10, 3);
        assert!(matches!(
            nl_means(&img, &NlmParams::default()),
            Err(DenoiseError::TooSmall { .. })
        ));
    }

    #[test]
    fn constants_are_fixed_points() {
        for v in [0u8, 17, 255] {
            let img = ImageGrid::filled(12, 9, v);
            assert_eq!(nl_means(&img, &NlmParams::default()).unwrap(), img);
        }
    }

    #[test]
    fn tiny_h_keeps_two_valued_image() {
        let img = ImageGrid::from_fn(24, 24, |x, y| if (x / 6 + y / 4) % 2 == 0 { 40 } else { 200 });
        let out = nl_means(&img, &NlmParams { h: 0.001, ..small() }).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn output_stays_in_input_range_and_commutes_with_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 12.0).unwrap();
        let img = ImageGrid::from_fn(20, 16, |x, _| {
            let base: f64 = if x < 10 { 80.0 } else { 150.0 };
            (base + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8
        });
        let out = nl_means(&img, &small()).unwrap();
        let (lo, hi) = img.min_max();
        assert!(out.data().iter().all(|&v| v >= lo && v <= hi));

        let flip = |g: &ImageGrid| ImageGrid::from_fn(g.width(), g.height(), |x, y| g.get(g.width() - 1 - x, y));
        assert_eq!(nl_means(&flip(&img), &small()).unwrap(), flip(&out));
    }
}

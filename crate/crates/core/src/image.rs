//! 8-bit grayscale rasters and their file I/O.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid dimensions {width}x{height} for {len} samples")]
    Dimensions {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("unsupported pixel format in {path}: {format}")]
    Unsupported { path: String, format: String },
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
}

/// Row-major 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(ImageError::Dimensions {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel lookup with coordinates clamped into the frame (edge replication).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.data[cy * self.width + cx]
    }

    pub fn min_max(&self) -> (u8, u8) {
        let mut lo = u8::MAX;
        let mut hi = u8::MIN;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Copies the `w`x`h` window whose top-left corner is `(x0, y0)`.
    pub fn sub_image(&self, x0: usize, y0: usize, w: usize, h: usize) -> ImageGrid {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "window out of bounds");
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
        }
        ImageGrid {
            width: w,
            height: h,
            data,
        }
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length matches dimensions")
    }

    /// Writes the image as PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        self.to_gray_image()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| ImageError::Write {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }
}

/// Integer Rec.601 luminance, rounded half up.
#[inline]
pub fn luma601(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

/// Decodes a PNG, JPEG or PGM file into an 8-bit grayscale grid.
///
/// RGB(A) inputs are reduced with [`luma601`]; alpha is ignored. 16-bit
/// and floating-point rasters are rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid, ImageError> {
    let path = path.as_ref();
    let shown = || path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| ImageError::Read {
        path: shown(),
        source,
    })?;
    let decoded = ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| ImageError::Decode {
            path: shown(),
            message: e.to_string(),
        })?
        .decode()
        .map_err(|e| ImageError::Decode {
            path: shown(),
            message: e.to_string(),
        })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data = match decoded {
        DynamicImage::ImageLuma8(img) => img.into_raw(),
        DynamicImage::ImageLumaA8(img) => img.pixels().map(|p| p.0[0]).collect(),
        DynamicImage::ImageRgb8(img) => img.pixels().map(|p| luma601(p[0], p[1], p[2])).collect(),
        DynamicImage::ImageRgba8(img) => {
            img.pixels().map(|p| luma601(p[0], p[1], p[2])).collect()
        }
        other => {
            return Err(ImageError::Unsupported {
                path: shown(),
                format: format!("{:?}", other.color()),
            })
        }
    };
    ImageGrid::new(w, h, data)
}

/// Writes an RGB composite as PNG.
pub fn save_rgb_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| ImageError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dimensions() {
        assert!(ImageGrid::new(0, 3, vec![]).is_err());
        assert!(ImageGrid::new(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn luma_extremes_and_primaries() {
        assert_eq!(luma601(0, 0, 0), 0);
        assert_eq!(luma601(255, 255, 255), 255);
        // 0.299 * 255 = 76.245
        assert_eq!(luma601(255, 0, 0), 76);
        // 0.587 * 255 = 149.685
        assert_eq!(luma601(0, 255, 0), 150);
    }

    #[test]
    fn png_round_trip_and_small_fixtures() {
        let dir = tempfile::tempdir().unwrap();
        let zeros = ImageGrid::filled(4, 4, 0);
        let p = dir.path().join("z.png");
        zeros.save_png(&p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.dims(), (4, 4));
        assert_eq!(back.data(), &[0u8; 16]);

        let two = ImageGrid::new(2, 1, vec![0, 255]).unwrap();
        let p = dir.path().join("two.png");
        two.save_png(&p).unwrap();
        assert_eq!(load_image(&p).unwrap().data(), &[0, 255]);
    }

    #[test]
    fn rgb_input_uses_rec601() {
        let dir = tempfile::tempdir().unwrap();
        let mut rgb = RgbImage::new(2, 1);
        rgb.put_pixel(0, 0, image::Rgb([255, 0, 0]));
        rgb.put_pixel(1, 0, image::Rgb([10, 20, 30]));
        let p = dir.path().join("rgb.png");
        save_rgb_png(&rgb, &p).unwrap();
        let g = load_image(&p).unwrap();
        assert_eq!(g.data(), &[76, luma601(10, 20, 30)]);
    }

    #[test]
    fn pgm_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let mut bytes = b"P5\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(load_image(&p).unwrap().data(), &[1, 2, 3]);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageGrid::from_fn(16, 16, |x, y| (x * 7 + y * 3) as u8);
        let p = dir.path().join("t.png");
        img.save_png(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_image(&p).is_err());
        assert!(load_image(dir.path().join("missing.png")).is_err());
    }

    #[test]
    fn sixteen_bit_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(2, 2, vec![0, 1000, 2000, 65535])
            .unwrap();
        let p = dir.path().join("deep.png");
        img.save(&p).unwrap();
        assert!(matches!(load_image(&p), Err(ImageError::Unsupported { .. })));
    }
}

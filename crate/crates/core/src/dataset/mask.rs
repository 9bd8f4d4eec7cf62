//! Breast-tissue masks: Otsu threshold followed by the largest 8-connected
//! foreground component.

use std::collections::VecDeque;

use super::DatasetError;
use crate::image::ImageGrid;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask length must match dimensions");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Summed-area table with a zero first row and column.
    pub fn integral(&self) -> Vec<u32> {
        let w = self.width + 1;
        let mut sat = vec![0u32; w * (self.height + 1)];
        for y in 0..self.height {
            let mut row = 0u32;
            for x in 0..self.width {
                row += self.get(x, y) as u32;
                sat[(y + 1) * w + x + 1] = sat[y * w + x + 1] + row;
            }
        }
        sat
    }

    pub fn to_image(&self) -> ImageGrid {
        ImageGrid::new(
            self.width,
            self.height,
            self.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
        .expect("mask dimensions are positive")
    }
}

/// Otsu threshold: pixels strictly above the returned value are foreground.
/// Returns `None` for single-valued images.
pub fn otsu_threshold(img: &ImageGrid) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[v as usize] += 1;
    }
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut w0 = 0u64;
    let mut sum0 = 0.0f64;
    let mut best: Option<(u8, f64)> = None;
    for t in 0..255usize {
        w0 += hist[t];
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = sum0 / w0 as f64;
        let mu1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        if best.map_or(true, |(_, b)| between > b) {
            best = Some((t as u8, between));
        }
    }
    best.map(|(t, _)| t)
}

/// Keeps only the largest 8-connected `true` component (first in raster
/// order on ties).
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![0u32; w * h];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.data[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    BinaryMask::new(w, h, label.iter().map(|&l| l != 0 && l == best.0).collect())
}

pub fn breast_mask(img: &ImageGrid) -> Result<BinaryMask, DatasetError> {
    let t = otsu_threshold(img).ok_or(DatasetError::EmptyMask)?;
    let raw = BinaryMask::new(
        img.width(),
        img.height(),
        img.data().iter().map(|&v| v > t).collect(),
    );
    let mask = largest_component(&raw);
    if mask.count() == 0 {
        return Err(DatasetError::EmptyMask);
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bimodal_halves() {
        let img = ImageGrid::from_fn(20, 10, |x, _| if x < 10 { 200 } else { 5 });
        let m = breast_mask(&img).unwrap();
        for y in 0..10 {
            for x in 0..20 {
                assert_eq!(m.get(x, y), x < 10);
            }
        }
    }

    #[test]
    fn keeps_only_largest_blob() {
        // 10x10 blob (100 px) and 5x6 blob (30 px) on a dark background.
        let img = ImageGrid::from_fn(40, 30, |x, y| {
            if (2..12).contains(&x) && (3..13).contains(&y) {
                220
            } else if (25..30).contains(&x) && (20..26).contains(&y) {
                230
            } else {
                10
            }
        });
        let m = breast_mask(&img).unwrap();
        // Oracle: count the pixels of each blob independently.
        let big = (0..30)
            .flat_map(|y| (0..40).map(move |x| (x, y)))
            .filter(|&(x, y)| (2..12).contains(&x) && (3..13).contains(&y))
            .count();
        assert_eq!(big, 100);
        assert_eq!(m.count(), 100);
        assert!(m.get(2, 3) && !m.get(25, 20));
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let raw = BinaryMask::new(3, 3, vec![true, false, false, false, true, false, false, false, true]);
        assert_eq!(largest_component(&raw).count(), 3);
    }

    #[test]
    fn constant_image_has_no_mask() {
        assert!(matches!(
            breast_mask(&ImageGrid::filled(5, 5, 90)),
            Err(DatasetError::EmptyMask)
        ));
    }

    #[test]
    fn integral_counts_windows() {
        let m = BinaryMask::new(3, 2, vec![true, true, false, false, true, true]);
        let sat = m.integral();
        assert_eq!(sat[2 * 4 + 3], 4);
        assert_eq!(sat[4 + 2], 2);
    }
}

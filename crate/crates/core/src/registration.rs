//! Integer-translation registration by mutual-information maximization.
//!
//! The LE image is the reference, the DES image floats. Candidates are scored
//! by histogram MI over the overlap of the two frames; no interpolation is
//! ever performed, so every candidate is a whole-pixel shift.

use std::collections::HashMap;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::image::ImageGrid;

#[derive(Debug, Error, PartialEq)]
pub enum RegistrationError {
    #[error("mutual information undefined: histogram is empty")]
    EmptyHistogram,
    #[error("registration failed: no candidate translation overlaps the reference")]
    NoOverlap,
    #[error("invalid search parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Translation {
    pub tx: i32,
    pub ty: i32,
}

impl Translation {
    pub const fn new(tx: i32, ty: i32) -> Self {
        Self { tx, ty }
    }

    fn l1(self) -> i64 {
        self.tx.unsigned_abs() as i64 + self.ty.unsigned_abs() as i64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchParams {
    pub level1_range: i32,
    pub level1_step: i32,
    pub level2_halfwidth: i32,
    pub bins: usize,
    pub clamp_to_range: bool,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            level1_range: 10,
            level1_step: 5,
            level2_halfwidth: 2,
            bins: 64,
            clamp_to_range: true,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |m: &str| Err(RegistrationError::InvalidParams(m.to_string()));
        if self.level1_range < 1 || self.level1_step < 1 {
            return bad("level-1 range and step must be positive");
        }
        if self.level1_range % self.level1_step != 0 {
            return bad("level-1 step must divide the range");
        }
        if self.level2_halfwidth < 1 {
            return bad("level-2 half-width must be at least 1");
        }
        if self.bins < 2 || self.bins > 256 {
            return bad("bins must lie in 2..=256");
        }
        Ok(())
    }

    pub fn level1_candidates(&self) -> Vec<Translation> {
        let r = self.level1_range;
        let axis: Vec<i32> = (-r..=r).step_by(self.level1_step as usize).collect();
        let mut out = Vec::with_capacity(axis.len() * axis.len());
        for &ty in &axis {
            for &tx in &axis {
                out.push(Translation::new(tx, ty));
            }
        }
        out
    }

    pub fn level2_candidates(&self, center: Translation) -> Vec<Translation> {
        let h = self.level2_halfwidth;
        let r = self.level1_range;
        let mut out = Vec::new();
        for dy in -h..=h {
            for dx in -h..=h {
                let t = Translation::new(center.tx + dx, center.ty + dy);
                if self.clamp_to_range && (t.tx.abs() > r || t.ty.abs() > r) {
                    continue;
                }
                out.push(t);
            }
        }
        out
    }
}

/// Joint intensity histogram of reference vs. aligned floating pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointHistogram {
    bins: usize,
    /// Row index = reference bin, column index = floating bin.
    counts: Vec<u64>,
    total: u64,
}

impl JointHistogram {
    pub fn from_counts(bins: usize, counts: Vec<u64>) -> Self {
        assert!(bins >= 2 && counts.len() == bins * bins, "counts must be bins x bins");
        let total = counts.iter().sum();
        Self { bins, counts, total }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, ref_bin: usize, flo_bin: usize) -> u64 {
        self.counts[ref_bin * self.bins + flo_bin]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn transposed(&self) -> Self {
        let n = self.bins;
        let mut counts = vec![0; n * n];
        for a in 0..n {
            for b in 0..n {
                counts[b * n + a] = self.counts[a * n + b];
            }
        }
        Self {
            bins: n,
            counts,
            total: self.total,
        }
    }
}

#[inline]
pub fn intensity_bin(v: u8, bins: usize) -> usize {
    v as usize * bins / 256
}

/// Range of destination coordinates `d` in `[0, dst_len)` with `d - shift`
/// inside `[0, src_len)`.
fn overlap_span(dst_len: usize, src_len: usize, shift: i32) -> Option<(usize, usize)> {
    let lo = (shift as i64).max(0);
    let hi = (dst_len as i64).min(src_len as i64 + shift as i64);
    (lo < hi).then_some((lo as usize, hi as usize))
}

/// Resamples `flo` into a `ref_dims` frame with `aligned(x, y) = flo(x - tx, y - ty)`.
/// Pixels without a source stay 0 and are false in the returned mask.
pub fn apply_translation(
    flo: &ImageGrid,
    t: Translation,
    ref_dims: (usize, usize),
) -> (ImageGrid, Vec<bool>) {
    let (w, h) = ref_dims;
    let mut out = ImageGrid::filled(w, h, 0);
    let mut mask = vec![false; w * h];
    if let (Some((x0, x1)), Some((y0, y1))) = (
        overlap_span(w, flo.width(), t.tx),
        overlap_span(h, flo.height(), t.ty),
    ) {
        for y in y0..y1 {
            let sy = (y as i64 - t.ty as i64) as usize;
            for x in x0..x1 {
                let sx = (x as i64 - t.tx as i64) as usize;
                out.set(x, y, flo.get(sx, sy));
                mask[y * w + x] = true;
            }
        }
    }
    (out, mask)
}

/// Accumulates the joint histogram over the overlap of `ref` and the
/// translated `flo`. Intensity `i` falls into bin `i * bins / 256`.
pub fn joint_histogram(ref_img: &ImageGrid, flo: &ImageGrid, t: Translation, bins: usize) -> JointHistogram {
    assert!((2..=256).contains(&bins), "bins must lie in 2..=256");
    let mut counts = vec![0u64; bins * bins];
    let mut lut = [0usize; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        *slot = intensity_bin(v as u8, bins);
    }
    if let (Some((x0, x1)), Some((y0, y1))) = (
        overlap_span(ref_img.width(), flo.width(), t.tx),
        overlap_span(ref_img.height(), flo.height(), t.ty),
    ) {
        let rw = ref_img.width();
        let fw = flo.width();
        let rd = ref_img.data();
        let fd = flo.data();
        let sx0 = (x0 as i64 - t.tx as i64) as usize;
        let n = x1 - x0;
        for y in y0..y1 {
            let sy = (y as i64 - t.ty as i64) as usize;
            let rrow = &rd[y * rw + x0..y * rw + x0 + n];
            let frow = &fd[sy * fw + sx0..sy * fw + sx0 + n];
            for (&a, &b) in rrow.iter().zip(frow) {
                counts[lut[a as usize] * bins + lut[b as usize]] += 1;
            }
        }
    }
    JointHistogram::from_counts(bins, counts)
}

/// Mutual information in nats. Empty cells contribute nothing and tiny
/// negative rounding residue is floored at zero.
pub fn mutual_information(h: &JointHistogram) -> Result<f64, RegistrationError> {
    if h.total == 0 {
        return Err(RegistrationError::EmptyHistogram);
    }
    let n = h.bins;
    let total = h.total as f64;
    let mut row = vec![0u64; n];
    let mut col = vec![0u64; n];
    for a in 0..n {
        for b in 0..n {
            let c = h.counts[a * n + b];
            row[a] += c;
            col[b] += c;
        }
    }
    // p(a,b) ln(p(a,b) / (p(a) p(b))) = p(a,b) ln(c * total / (r_a * c_b))
    let mut mi = 0.0;
    for a in 0..n {
        if row[a] == 0 {
            continue;
        }
        for b in 0..n {
            let c = h.counts[a * n + b];
            if c == 0 {
                continue;
            }
            let ratio = (c as f64 * total) / (row[a] as f64 * col[b] as f64);
            mi += (c as f64 / total) * ratio.ln();
        }
    }
    Ok(mi.max(0.0))
}

/// MI of one candidate, or `None` when the overlap is empty.
pub fn score_translation(ref_img: &ImageGrid, flo: &ImageGrid, t: Translation, bins: usize) -> Option<f64> {
    mutual_information(&joint_histogram(ref_img, flo, t, bins)).ok()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub best: Translation,
    pub mi: f64,
    pub level1_best: Translation,
    /// Every distinct candidate in search order; empty overlaps carry `-inf`.
    pub evaluations: Vec<(Translation, f64)>,
}

impl RegistrationResult {
    pub fn to_json(&self) -> Value {
        let num = |v: f64| if v.is_finite() { json!(v) } else { Value::Null };
        json!({
            "tx": self.best.tx,
            "ty": self.best.ty,
            "mi": num(self.mi),
            "level1_best": [self.level1_best.tx, self.level1_best.ty],
            "evaluations": self
                .evaluations
                .iter()
                .map(|(t, mi)| json!([t.tx, t.ty, num(*mi)]))
                .collect::<Vec<_>>(),
        })
    }
}

/// True when `a` ranks strictly ahead of `b`: higher MI, then smaller
/// `|tx| + |ty|`, then lexicographically smaller `(tx, ty)`.
fn ranks_before(a: (Translation, f64), b: (Translation, f64)) -> bool {
    if a.1 != b.1 {
        return a.1 > b.1;
    }
    (a.0.l1(), a.0) < (b.0.l1(), b.0)
}

fn best_of(evals: &[(Translation, f64)]) -> Option<(Translation, f64)> {
    let mut best: Option<(Translation, f64)> = None;
    for &e in evals {
        if e.1 == f64::NEG_INFINITY {
            continue;
        }
        if best.map_or(true, |b| ranks_before(e, b)) {
            best = Some(e);
        }
    }
    best
}

/// Scores candidates (in parallel) while keeping search order and skipping
/// ones already in `cache`.
fn evaluate(
    ref_img: &ImageGrid,
    flo: &ImageGrid,
    candidates: &[Translation],
    bins: usize,
    cache: &mut HashMap<Translation, f64>,
    evaluations: &mut Vec<(Translation, f64)>,
) -> Vec<(Translation, f64)> {
    let mut fresh: Vec<Translation> = Vec::new();
    for &t in candidates {
        if !cache.contains_key(&t) && !fresh.contains(&t) {
            fresh.push(t);
        }
    }
    let scores: Vec<f64> = fresh
        .par_iter()
        .map(|&t| score_translation(ref_img, flo, t, bins).unwrap_or(f64::NEG_INFINITY))
        .collect();
    for (&t, &s) in fresh.iter().zip(&scores) {
        cache.insert(t, s);
        evaluations.push((t, s));
    }
    candidates.iter().map(|t| (*t, cache[t])).collect()
}

/// Coarse grid over `±level1_range` at `level1_step`, then a dense
/// `(2*halfwidth+1)^2` neighbourhood around the coarse winner.
pub fn register_two_level(
    ref_img: &ImageGrid,
    flo: &ImageGrid,
    p: &SearchParams,
) -> Result<RegistrationResult, RegistrationError> {
    p.validate()?;
    let mut cache = HashMap::new();
    let mut evaluations = Vec::new();
    let level1 = evaluate(ref_img, flo, &p.level1_candidates(), p.bins, &mut cache, &mut evaluations);
    let (level1_best, _) = best_of(&level1).ok_or(RegistrationError::NoOverlap)?;
    evaluate(
        ref_img,
        flo,
        &p.level2_candidates(level1_best),
        p.bins,
        &mut cache,
        &mut evaluations,
    );
    let (best, mi) = best_of(&evaluations).ok_or(RegistrationError::NoOverlap)?;
    Ok(RegistrationResult {
        best,
        mi,
        level1_best,
        evaluations,
    })
}

/// Scores every integer translation in `[-range, range]^2`.
pub fn register_exhaustive(
    ref_img: &ImageGrid,
    flo: &ImageGrid,
    range: i32,
    bins: usize,
) -> Result<RegistrationResult, RegistrationError> {
    if range < 1 {
        return Err(RegistrationError::InvalidParams("range must be at least 1".into()));
    }
    if !(2..=256).contains(&bins) {
        return Err(RegistrationError::InvalidParams("bins must lie in 2..=256".into()));
    }
    let mut candidates = Vec::with_capacity(((2 * range + 1) * (2 * range + 1)) as usize);
    for ty in -range..=range {
        for tx in -range..=range {
            candidates.push(Translation::new(tx, ty));
        }
    }
    let mut cache = HashMap::new();
    let mut evaluations = Vec::new();
    evaluate(ref_img, flo, &candidates, bins, &mut cache, &mut evaluations);
    let (best, mi) = best_of(&evaluations).ok_or(RegistrationError::NoOverlap)?;
    Ok(RegistrationResult {
        best,
        mi,
        level1_best: best,
        evaluations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlayStyle {
    Checkerboard,
    RedCyan,
}

pub const CHECKER_TILE: usize = 32;

/// Composite for visual QA of an alignment.
///
/// Checkerboard alternates 32-px tiles of the two images (reference in the
/// tile containing the origin); red-cyan puts the reference in red and the
/// aligned image in green and blue.
pub fn emit_overlay(
    ref_img: &ImageGrid,
    aligned: &ImageGrid,
    style: OverlayStyle,
) -> Result<RgbImage, RegistrationError> {
    if ref_img.dims() != aligned.dims() {
        return Err(RegistrationError::DimensionMismatch(ref_img.dims(), aligned.dims()));
    }
    let (w, h) = ref_img.dims();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let r = ref_img.get(x, y);
        let a = aligned.get(x, y);
        match style {
            OverlayStyle::Checkerboard => {
                let v = if (x / CHECKER_TILE + y / CHECKER_TILE) % 2 == 0 { r } else { a };
                Rgb([v, v, v])
            }
            OverlayStyle::RedCyan => Rgb([r, a, a]),
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(w, h, |_, _| rng.gen())
    }

    #[test]
    fn translation_identity_unit_and_disjoint() {
        let img = random_image(5, 4, 1);
        let (out, mask) = apply_translation(&img, Translation::new(0, 0), img.dims());
        assert_eq!(out, img);
        assert!(mask.iter().all(|&m| m));

        let img = ImageGrid::from_fn(3, 3, |x, y| (10 * y + x) as u8);
        let (out, mask) = apply_translation(&img, Translation::new(1, 0), (3, 3));
        for y in 0..3 {
            assert!(!mask[y * 3]);
            assert!(mask[y * 3 + 1] && mask[y * 3 + 2]);
            assert_eq!(out.get(1, y), img.get(0, y));
            assert_eq!(out.get(2, y), img.get(1, y));
        }

        let img = random_image(10, 10, 2);
        let (_, mask) = apply_translation(&img, Translation::new(50, 0), (10, 10));
        assert!(mask.iter().all(|&m| !m));
        let h = joint_histogram(&img, &img, Translation::new(50, 0), 8);
        assert_eq!(h.total(), 0);
        assert_eq!(mutual_information(&h), Err(RegistrationError::EmptyHistogram));
    }

    #[test]
    fn histogram_simple_cases() {
        let c = ImageGrid::filled(6, 5, 77);
        let h = joint_histogram(&c, &c, Translation::default(), 2);
        assert_eq!(h.total(), 30);
        assert_eq!(h.counts().iter().filter(|&&v| v > 0).count(), 1);

        let board = ImageGrid::from_fn(8, 8, |x, y| if (x + y) % 2 == 0 { 0 } else { 255 });
        let h = joint_histogram(&board, &board, Translation::default(), 2);
        assert_eq!(h.count(0, 0), 32);
        assert_eq!(h.count(1, 1), 32);
        assert_eq!(h.count(0, 1) + h.count(1, 0), 0);
    }

    #[test]
    fn histogram_matches_brute_force_overlap_loop() {
        let r = random_image(4, 4, 11);
        let f = random_image(4, 4, 12);
        let t = Translation::new(1, 1);
        let bins = 4;
        let mut expect = vec![0u64; 16];
        for y in 0..4i32 {
            for x in 0..4i32 {
                let (sx, sy) = (x - t.tx, y - t.ty);
                if (0..4).contains(&sx) && (0..4).contains(&sy) {
                    let a = r.get(x as usize, y as usize) as usize * bins / 256;
                    let b = f.get(sx as usize, sy as usize) as usize * bins / 256;
                    expect[a * bins + b] += 1;
                }
            }
        }
        let h = joint_histogram(&r, &f, t, bins);
        assert_eq!(h.counts(), expect.as_slice());
        assert_eq!(h.total(), 9);
    }

    #[test]
    fn mi_analytic_values() {
        let h = JointHistogram::from_counts(2, vec![50, 0, 0, 50]);
        assert!((mutual_information(&h).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let c = ImageGrid::filled(8, 8, 40);
        let r = random_image(8, 8, 3);
        let h = joint_histogram(&c, &r, Translation::default(), 16);
        assert!(mutual_information(&h).unwrap().abs() < 1e-12);

        // [[2,1],[1,2]] scaled by 3, summed directly.
        let h = JointHistogram::from_counts(2, vec![6, 3, 3, 6]);
        let p: [[f64; 2]; 2] = [[6.0 / 18.0, 3.0 / 18.0], [3.0 / 18.0, 6.0 / 18.0]];
        let mut expect = 0.0f64;
        for row in p {
            for v in row {
                expect += v * (v / (0.5 * 0.5)).ln();
            }
        }
        assert!((mutual_information(&h).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn search_params_validation_and_level1_count() {
        let p = SearchParams::default();
        p.validate().unwrap();
        let l1 = p.level1_candidates();
        assert_eq!(l1.len(), 25);
        assert!(l1.contains(&Translation::new(-10, 5)));
        assert!(SearchParams { level1_step: 3, ..p.clone() }.validate().is_err());
        assert!(SearchParams { bins: 1, ..p.clone() }.validate().is_err());
        assert!(SearchParams { level2_halfwidth: 0, ..p.clone() }.validate().is_err());
        // Corner winner: clamped neighbourhood keeps 3x3 of the 5x5 window.
        assert_eq!(p.level2_candidates(Translation::new(10, -10)).len(), 9);
        let unclamped = SearchParams { clamp_to_range: false, ..p };
        assert_eq!(unclamped.level2_candidates(Translation::new(10, -10)).len(), 25);
    }

    #[test]
    fn identical_images_register_at_origin() {
        let img = random_image(40, 30, 5);
        let r = register_two_level(&img, &img, &SearchParams::default()).unwrap();
        assert_eq!(r.best, Translation::new(0, 0));
        // Level 1 (25) plus the 5x5 neighbourhood minus the shared origin.
        assert_eq!(r.evaluations.len(), 25 + 24);
        let e = register_exhaustive(&img, &img, 2, 64).unwrap();
        assert_eq!(e.best, Translation::new(0, 0));
        assert_eq!(e.evaluations.len(), 25);
    }

    #[test]
    fn tie_break_prefers_small_shifts_then_lexicographic() {
        let a = (Translation::new(1, 0), 1.0);
        let b = (Translation::new(0, 1), 1.0);
        let c = (Translation::new(0, 0), 1.0);
        assert!(ranks_before(b, a));
        assert!(ranks_before(c, b));
        assert!(ranks_before((Translation::new(5, 5), 2.0), c));
        assert_eq!(best_of(&[a, b, c]), Some(c));
    }

    #[test]
    fn empty_overlaps_rank_last() {
        let evals = [
            (Translation::new(0, 0), f64::NEG_INFINITY),
            (Translation::new(3, 3), 0.0),
        ];
        assert_eq!(best_of(&evals), Some((Translation::new(3, 3), 0.0)));
        assert_eq!(best_of(&evals[..1]), None);
        // A 1x1 float still overlaps the reference at the origin.
        let img = random_image(3, 3, 9);
        let r = register_exhaustive(&img, &ImageGrid::filled(1, 1, 0), 1, 8).unwrap();
        assert_eq!(r.evaluations.len(), 9);
    }

    #[test]
    fn overlays() {
        let img = random_image(64, 64, 4);
        let rc = emit_overlay(&img, &img, OverlayStyle::RedCyan).unwrap();
        assert!(rc.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));

        let black = ImageGrid::filled(64, 64, 0);
        let white = ImageGrid::filled(64, 64, 255);
        let cb = emit_overlay(&black, &white, OverlayStyle::Checkerboard).unwrap();
        assert_eq!(cb.get_pixel(0, 0)[0], 0);
        assert_eq!(cb.get_pixel(31, 31)[0], 0);
        assert_eq!(cb.get_pixel(32, 0)[0], 255);
        assert_eq!(cb.get_pixel(0, 32)[0], 255);
        assert_eq!(cb.get_pixel(32, 32)[0], 0);

        assert!(emit_overlay(&black, &ImageGrid::filled(3, 3, 0), OverlayStyle::RedCyan).is_err());
    }

    #[test]
    fn json_shape() {
        let img = random_image(20, 20, 8);
        let r = register_two_level(&img, &img, &SearchParams::default()).unwrap();
        let v = r.to_json();
        assert_eq!(v["tx"], 0);
        assert_eq!(v["level1_best"], json!([0, 0]));
        assert_eq!(v["evaluations"].as_array().unwrap().len(), r.evaluations.len());
        assert_eq!(v["evaluations"][0].as_array().unwrap().len(), 3);
    }

    fn arb_hist() -> impl Strategy<Value = JointHistogram> {
        (2usize..6).prop_flat_map(|n| {
            proptest::collection::vec(0u64..50, n * n)
                .prop_filter("non-empty", |c| c.iter().sum::<u64>() > 0)
                .prop_map(move |c| JointHistogram::from_counts(n, c))
        })
    }

    proptest! {
        #[test]
        fn mi_symmetric_and_non_negative(h in arb_hist()) {
            let a = mutual_information(&h).unwrap();
            let b = mutual_information(&h.transposed()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= -1e-12);
        }
    }
}

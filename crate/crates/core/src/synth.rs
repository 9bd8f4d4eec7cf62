//! Deterministic synthetic images: smooth random fields, shifted
//! registration pairs, a noisy step edge and a small CESM-like study set.

use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::ImageGrid;
use crate::ingest::{write_annotations_csv, Annotation, Energy, Label, Side, StudyKey, View};

/// Sum of random Gaussian bumps plus a tilted plane, rescaled to `[0, 1]`.
pub fn smooth_field(w: usize, h: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = w.max(h) as f64;
    let mut bumps = Vec::new();
    for k in 0..24 {
        // Two octaves: broad structure and finer detail.
        let (lo, hi) = if k < 10 { (0.08, 0.25) } else { (0.02, 0.06) };
        bumps.push((
            rng.gen_range(0.0..w as f64),
            rng.gen_range(0.0..h as f64),
            rng.gen_range(lo..hi) * scale,
            rng.gen_range(-1.0..1.0),
        ));
    }
    let (gx, gy) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
    let mut field = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = gx * xf / scale + gy * yf / scale;
            for &(cx, cy, s, a) in &bumps {
                let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                v += a * (-d2 / (2.0 * s * s)).exp();
            }
            field.push(v);
        }
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    field.iter_mut().for_each(|v| *v = (*v - lo) / span);
    field
}

fn quantize(field: &[f64], w: usize, h: usize, f: impl Fn(f64) -> f64) -> ImageGrid {
    let data = field.iter().map(|&v| f(v).round().clamp(0.0, 255.0) as u8).collect();
    ImageGrid::new(w, h, data).expect("field matches dimensions")
}

/// Reference and floating images of one smooth scene with
/// `flo(x, y) = g(ref(x + tx, y + ty))` for a non-linear, decreasing `g`,
/// so the correct registration is `shift`. `margin` bounds `|tx|, |ty|`.
pub fn registration_pair(side: usize, shift: (i32, i32), margin: usize, seed: u64) -> (ImageGrid, ImageGrid) {
    assert!(shift.0.unsigned_abs() as usize <= margin && shift.1.unsigned_abs() as usize <= margin);
    let big = side + 2 * margin;
    let field = smooth_field(big, big, seed);
    let window = |ox: usize, oy: usize| -> Vec<f64> {
        (0..side)
            .flat_map(|y| (0..side).map(move |x| (x, y)))
            .map(|(x, y)| field[(oy + y) * big + ox + x])
            .collect()
    };
    let m = margin as i64;
    let r = window(margin, margin);
    let f = window((m + shift.0 as i64) as usize, (m + shift.1 as i64) as usize);
    (
        quantize(&r, side, side, |v| 20.0 + 215.0 * v),
        quantize(&f, side, side, |v| 240.0 - 200.0 * v.powf(0.7)),
    )
}

/// Vertical step edge (80 | 170) and a copy with additive Gaussian noise.
pub fn noisy_edge(side: usize, sigma: f64, seed: u64) -> (ImageGrid, ImageGrid) {
    let clean = ImageGrid::from_fn(side, side, |x, _| if x < side / 2 { 80 } else { 170 });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    let data = clean
        .data()
        .iter()
        .map(|&v| (v as f64 + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    let noisy = ImageGrid::new(side, side, data).expect("same dimensions");
    (clean, noisy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub patients: u32,
    pub side: usize,
    pub max_shift: i32,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            patients: 6,
            side: 64,
            max_shift: 3,
            seed: 7,
        }
    }
}

/// Ground truth for one written breast view.
#[derive(Clone, Debug, PartialEq)]
pub struct FixtureView {
    pub patient_id: u32,
    pub side: Side,
    pub view: View,
    pub shift: (i32, i32),
    pub lesion: Option<((usize, usize), Label)>,
}

/// Writes LE (`DM`) and DES (`CM`) PNGs named `P<id>_<side>_<energy>_<view>.png`
/// plus `annotations.csv` into `dir`. Odd patients carry a malignant lesion
/// on the left breast, even patients a benign one on the right; the other
/// breast is normal. The DES image is offset by a known translation.
pub fn write_cesm_fixture(dir: &Path, spec: &FixtureSpec) -> io::Result<Vec<FixtureView>> {
    fs::create_dir_all(dir)?;
    let n = spec.side;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut views = Vec::new();
    let mut annotations = Vec::new();
    for pid in 1..=spec.patients {
        let lesion_side = if pid % 2 == 1 { Side::Left } else { Side::Right };
        let lesion_label = if pid % 2 == 1 { Label::Malignant } else { Label::NonMalignant };
        for side in Side::ALL {
            for view in View::ALL {
                let shift = (
                    rng.gen_range(-spec.max_shift..=spec.max_shift),
                    rng.gen_range(-spec.max_shift..=spec.max_shift),
                );
                let lesion = (side == lesion_side).then(|| {
                    let cx = if side == Side::Left { rng.gen_range(n / 6..n / 3) } else { rng.gen_range(2 * n / 3..5 * n / 6) };
                    ((cx, rng.gen_range(n / 3..2 * n / 3)), lesion_label)
                });
                let texture = smooth_field(n + 2 * spec.max_shift as usize, n + 2 * spec.max_shift as usize, rng.gen());
                let (le, des) = render_view(n, side, spec.max_shift, shift, &texture, lesion.map(|l| l.0));
                for (energy, img) in [(Energy::LowEnergy, &le), (Energy::Subtracted, &des)] {
                    let key = StudyKey { patient_id: pid, side, energy, view };
                    img.save_png(&dir.join(format!("{}.png", key.render())))
                        .map_err(|e| io::Error::other(e.to_string()))?;
                }
                annotations.push(Annotation {
                    patient_id: pid,
                    side,
                    view,
                    center: lesion.map(|l| l.0),
                    label: lesion.map_or(Label::NonMalignant, |l| l.1),
                });
                views.push(FixtureView { patient_id: pid, side, view, shift, lesion });
            }
        }
    }
    let file = fs::File::create(dir.join("annotations.csv"))?;
    write_annotations_csv(&annotations, file).map_err(|e| io::Error::other(e.to_string()))?;
    Ok(views)
}

/// Breast half-disc on a dark background. The DES is rendered in a frame
/// displaced by `shift`, so registering it to the LE recovers `shift`.
fn render_view(
    n: usize,
    side: Side,
    margin: i32,
    shift: (i32, i32),
    texture: &[f64],
    lesion: Option<(usize, usize)>,
) -> (ImageGrid, ImageGrid) {
    let big = n + 2 * margin as usize;
    let radius = 0.8 * n as f64;
    let scene = |x: i64, y: i64| -> (f64, f64) {
        let cx = if side == Side::Left { 0.0 } else { n as f64 - 1.0 };
        let cy = n as f64 / 2.0;
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        if d > radius {
            return (6.0, 2.0);
        }
        let t = texture[((y + margin as i64) as usize) * big + (x + margin as i64) as usize];
        let mut le = 120.0 + 90.0 * t;
        let mut des = 40.0 + 30.0 * (1.0 - t);
        if let Some((lx, ly)) = lesion {
            let r2 = (x as f64 - lx as f64).powi(2) + (y as f64 - ly as f64).powi(2);
            let bump = (-r2 / 18.0).exp();
            le += 25.0 * bump;
            des += 170.0 * bump;
        }
        (le, des)
    };
    let clamp = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    let le = ImageGrid::from_fn(n, n, |x, y| clamp(scene(x as i64, y as i64).0));
    let des = ImageGrid::from_fn(n, n, |x, y| {
        let sx = (x as i64 + shift.0 as i64).clamp(-(margin as i64), (n as i64) + margin as i64 - 1);
        let sy = (y as i64 + shift.1 as i64).clamp(-(margin as i64), (n as i64) + margin as i64 - 1);
        clamp(scene(sx, sy).1)
    });
    (le, des)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::{register_exhaustive, Translation};

    #[test]
    fn field_is_normalized_and_seeded() {
        let a = smooth_field(20, 10, 1);
        assert_eq!(a.len(), 200);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, smooth_field(20, 10, 1));
        assert_ne!(a, smooth_field(20, 10, 2));
    }

    #[test]
    fn pair_registers_to_its_shift() {
        let (r, f) = registration_pair(48, (3, -2), 10, 5);
        let res = register_exhaustive(&r, &f, 5, 64).unwrap();
        assert_eq!(res.best, Translation::new(3, -2));
    }

    #[test]
    fn noisy_edge_statistics() {
        let (clean, noisy) = noisy_edge(64, 10.0, 7);
        let mse: f64 = clean
            .data()
            .iter()
            .zip(noisy.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / 4096.0;
        assert!((mse - 100.0).abs() < 15.0, "{mse}");
    }

    #[test]
    fn fixture_writes_all_views() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec { patients: 2, side: 32, ..FixtureSpec::default() };
        let views = write_cesm_fixture(dir.path(), &spec).unwrap();
        assert_eq!(views.len(), 8);
        let pngs = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
            .count();
        assert_eq!(pngs, 16);
        assert!(dir.path().join("annotations.csv").exists());
        assert_eq!(views.iter().filter(|v| v.lesion.is_some()).count(), 4);
    }
}

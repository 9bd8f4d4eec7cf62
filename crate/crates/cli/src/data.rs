//! `pair-scan`, `crop`, `split` and `augment`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use vdes_core::dataset::{
    apply_transform, augment_pair, breast_mask, extract_crop, sample_normal_crop, sample_transform,
    stratified_patient_split, CropSource, CropSpec, SplitSet, TransformSpec, DEFAULT_CROP_SIZE,
};
use vdes_core::ingest::{
    build_pair_manifest, labels_from_annotations, parse_filename, read_annotations_csv, read_manifest_csv,
    write_manifest_csv, Annotation, Label, Side, StudyRecord, View,
};
use vdes_core::registration::{apply_translation, Translation};
use vdes_core::translator::train::derive_seed;

use crate::fsutil;
use crate::imaging::led_path;

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "pgm", "pnm", "ppm"];

#[derive(Debug, Args)]
pub struct PairScanArgs {
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Annotations CSV supplying per-view labels; unannotated views stay unlabeled.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
}

fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    read_annotations_csv(fsutil::open_file(path)?).with_context(|| format!("cannot parse {}", path.display()))
}

pub fn pair_scan(args: &PairScanArgs) -> Result<()> {
    let labels = match &args.annotations {
        Some(p) => labels_from_annotations(&read_annotations(p)?),
        None => Default::default(),
    };
    let mut records = Vec::new();
    for path in fsutil::list_files(&args.dir)? {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default().to_ascii_lowercase();
        if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        match parse_filename(stem) {
            Ok(key) => {
                let label = labels
                    .get(&(key.patient_id, key.side, key.view))
                    .copied()
                    .unwrap_or(Label::Unlabeled);
                records.push(StudyRecord { key, path, label });
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    let pm = build_pair_manifest(&records)?;
    for r in &pm.unmatched {
        log::warn!("no counterpart for {}", r.key);
    }
    log::info!("{} images, {} LE/DES pairs", records.len(), pm.pairs.len());
    write_manifest_csv(&records, fsutil::create_file(&args.out)?)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct CropArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory of `register --manifest` results.
    #[arg(long)]
    pub registrations: PathBuf,
    /// Directory of `denoise --manifest` results.
    #[arg(long)]
    pub led_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CROP_SIZE)]
    pub size: usize,
    /// Normal-tissue crops drawn from each lesion-free non-malignant view.
    #[arg(long, default_value_t = 1)]
    pub normal_per_image: usize,
    /// Minimum breast-mask coverage of a normal crop.
    #[arg(long, default_value_t = 0.5)]
    pub min_tissue: f64,
}

/// One row of `crops.csv`; `path` is relative to the CSV and lacks the
/// `_{LE|LED|DES}.png` suffix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CropRow {
    pub path: String,
    pub patient_id: u32,
    pub side: String,
    pub view: String,
    pub index: usize,
    pub label: String,
    pub center_x: usize,
    pub center_y: usize,
    pub size: usize,
}

pub const CROP_KINDS: [&str; 3] = ["LE", "LED", "DES"];

fn read_translation(path: &Path) -> Result<Translation> {
    let v: serde_json::Value = serde_json::from_str(&fsutil::read_text(path)?)
        .with_context(|| format!("cannot parse {}", path.display()))?;
    let get = |k: &str| -> Result<i32> {
        let n = v[k].as_i64().with_context(|| format!("{}: missing integer {k}", path.display()))?;
        Ok(i32::try_from(n)?)
    };
    Ok(Translation::new(get("tx")?, get("ty")?))
}

fn view_code(side: Side, view: View) -> u64 {
    2 * (side == Side::Right) as u64 + (view == View::MLO) as u64
}

pub fn crop(args: &CropArgs, seed: u64) -> Result<()> {
    let records = read_manifest_csv(fsutil::open_file(&args.manifest)?)
        .with_context(|| format!("cannot parse {}", args.manifest.display()))?;
    let pm = build_pair_manifest(&records)?;
    let mut by_view: BTreeMap<(u32, Side, View), Vec<Annotation>> = BTreeMap::new();
    for a in read_annotations(&args.annotations)? {
        by_view.entry((a.patient_id, a.side, a.view)).or_default().push(a);
    }
    let mut rows = Vec::new();
    for pair in &pm.pairs {
        let key = pair.le().key;
        let Some(anns) = by_view.get(&(key.patient_id, key.side, key.view)) else {
            log::debug!("{}: no annotations, skipped", key.breast_view_stem());
            continue;
        };
        let le = fsutil::load(&pair.le().path)?;
        let des = fsutil::load(&pair.des().path)?;
        let led = fsutil::load(&led_path(&args.led_dir, &key.render()))?;
        if led.dims() != le.dims() {
            bail!("{}: LED and LE sizes differ", key.render());
        }
        let t = read_translation(&args.registrations.join(format!("{}.json", key.breast_view_stem())))?;
        let (aligned, _) = apply_translation(&des, t, le.dims());
        let source = CropSource {
            patient_id: key.patient_id,
            side: key.side,
            view: key.view,
        };
        let mut specs = Vec::new();
        let mut mask = None;
        for a in anns {
            match (a.center, a.label) {
                (_, Label::Unlabeled) => {}
                (Some(center), label) => specs.push(CropSpec {
                    source,
                    center,
                    size: args.size,
                    label,
                }),
                (None, Label::NonMalignant) => {
                    if mask.is_none() {
                        mask = Some(breast_mask(&le)?);
                    }
                    let m = mask.as_ref().expect("mask computed above");
                    for k in 0..args.normal_per_image {
                        let s = derive_seed(seed, key.patient_id as u64, 16 * view_code(key.side, key.view) + k as u64);
                        specs.push(sample_normal_crop(source, m, args.size, s, args.min_tissue)?);
                    }
                }
                (None, Label::Malignant) => {
                    log::warn!("{}: malignant annotation without a centre, skipped", key.breast_view_stem());
                }
            }
        }
        for spec in specs {
            let index = rows.len();
            let rel = format!("unassigned/{}/{}_{index}", spec.label.token(), key.breast_view_stem());
            for (kind, img) in CROP_KINDS.iter().zip([&le, &led, &aligned]) {
                fsutil::save(&extract_crop(img, &spec)?, &args.out.join(format!("{rel}_{kind}.png")))?;
            }
            rows.push(CropRow {
                path: rel,
                patient_id: key.patient_id,
                side: key.side.token().to_string(),
                view: key.view.token().to_string(),
                index,
                label: spec.label.token().to_string(),
                center_x: spec.center.0,
                center_y: spec.center.1,
                size: spec.size,
            });
        }
    }
    let mut w = csv::Writer::from_writer(fsutil::create_file(&args.out.join("crops.csv"))?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    log::info!("wrote {} crops", rows.len());
    Ok(())
}

pub fn read_crop_rows(path: &Path) -> Result<Vec<CropRow>> {
    let mut rdr = csv::Reader::from_reader(fsutil::open_file(path)?);
    let rows = rdr
        .deserialize()
        .collect::<Result<Vec<CropRow>, _>>()
        .with_context(|| format!("cannot parse {}", path.display()))?;
    Ok(rows)
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// `crops.csv` written by `crop`.
    #[arg(long)]
    pub crops: PathBuf,
    /// Split manifest JSON.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.70)]
    pub train: f64,
    #[arg(long, default_value_t = 0.15)]
    pub val: f64,
    #[arg(long, default_value_t = 0.15)]
    pub test: f64,
    /// Copy crops into `<layout>/<set>/<label>/`.
    #[arg(long)]
    pub layout: Option<PathBuf>,
}

pub fn split(args: &SplitArgs, seed: u64) -> Result<()> {
    let rows = read_crop_rows(&args.crops)?;
    let mut records = Vec::with_capacity(rows.len());
    for r in &rows {
        records.push((r.patient_id, r.label.parse::<Label>()?));
    }
    let manifest = stratified_patient_split(&records, [args.train, args.val, args.test], seed)?;
    let f = manifest.set_fractions(&records);
    log::info!(
        "split {:.1}/{:.1}/{:.1}% over {} patients",
        100.0 * f[0],
        100.0 * f[1],
        100.0 * f[2],
        manifest.assignment.len()
    );
    fsutil::write_bytes(&args.out, format!("{}\n", manifest.to_json()).as_bytes())?;
    if let Some(layout) = &args.layout {
        let base = args.crops.parent().unwrap_or(Path::new(""));
        for r in &rows {
            let Some(set) = manifest.set_of(r.patient_id) else {
                continue;
            };
            let name = Path::new(&r.path).file_name().and_then(|n| n.to_str()).unwrap_or_default();
            for kind in CROP_KINDS {
                let from = base.join(format!("{}_{kind}.png", r.path));
                let to = layout.join(set.dir_name()).join(&r.label).join(format!("{name}_{kind}.png"));
                fsutil::ensure_parent(&to)?;
                fs::copy(&from, &to).with_context(|| format!("cannot copy {}", from.display()))?;
            }
        }
        for set in SplitSet::ALL {
            fs::create_dir_all(layout.join(set.dir_name()))?;
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Directory searched recursively for `*_LE.png` crops.
    #[arg(long)]
    pub in_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Augmented copies per crop.
    #[arg(long)]
    pub count: usize,
    /// Also copy the untouched crops into the output tree.
    #[arg(long)]
    pub keep_original: bool,
}

#[derive(Serialize)]
struct AugmentRecord {
    source: String,
    output: String,
    step_index: u64,
    spec: TransformSpec,
}

pub fn augment(args: &AugmentArgs, seed: u64) -> Result<()> {
    let mut log_rows = Vec::new();
    let sources = fsutil::find_suffix(&args.in_dir, "_LE.png")?;
    for (i, le_path) in sources.iter().enumerate() {
        let rel_dir = le_path
            .parent()
            .and_then(|p| p.strip_prefix(&args.in_dir).ok())
            .unwrap_or(Path::new(""));
        let stem = fsutil::crop_stem(le_path);
        let le = fsutil::load(le_path)?;
        let des = fsutil::load(&fsutil::sibling(le_path, "DES"))?;
        let led_src = fsutil::sibling(le_path, "LED");
        let led = if led_src.exists() { Some(fsutil::load(&led_src)?) } else { None };
        let out_dir = args.out.join(rel_dir);
        if args.keep_original {
            fsutil::save(&le, &out_dir.join(format!("{stem}_LE.png")))?;
            fsutil::save(&des, &out_dir.join(format!("{stem}_DES.png")))?;
            if let Some(l) = &led {
                fsutil::save(l, &out_dir.join(format!("{stem}_LED.png")))?;
            }
        }
        for k in 0..args.count {
            let step_index = (i * args.count + k) as u64;
            let spec = sample_transform(seed, step_index);
            let (a, b) = augment_pair(&le, &des, &spec)?;
            let name = format!("{stem}_aug{k}");
            fsutil::save(&a, &out_dir.join(format!("{name}_LE.png")))?;
            fsutil::save(&b, &out_dir.join(format!("{name}_DES.png")))?;
            if let Some(l) = &led {
                fsutil::save(&apply_transform(l, &spec)?, &out_dir.join(format!("{name}_LED.png")))?;
            }
            log_rows.push(AugmentRecord {
                source: rel_dir.join(&stem).display().to_string(),
                output: rel_dir.join(&name).display().to_string(),
                step_index,
                spec,
            });
        }
    }
    fsutil::write_json(&args.out.join("transforms.json"), &log_rows)?;
    log::info!("{} crops, {} augmented copies", sources.len(), log_rows.len());
    Ok(())
}

//! `register` and `denoise`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde_json::json;
use vdes_core::denoise::{nl_means, NlmParams};
use vdes_core::image::save_rgb_png;
use vdes_core::ingest::{build_pair_manifest, read_manifest_csv, Energy};
use vdes_core::registration::{
    apply_translation, emit_overlay, register_exhaustive, register_two_level, OverlayStyle, RegistrationResult,
    SearchParams,
};

use crate::fsutil;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Style {
    Checkerboard,
    #[value(alias = "redcyan")]
    RedCyan,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Reference (LE) image.
    #[arg(long = "ref", required_unless_present = "manifest", conflicts_with = "manifest")]
    pub ref_path: Option<PathBuf>,
    /// Floating (DES) image.
    #[arg(long, required_unless_present = "manifest")]
    pub flo: Option<PathBuf>,
    /// Result JSON for a single pair.
    #[arg(long, required_unless_present = "manifest")]
    pub out: Option<PathBuf>,
    /// Register every LE/DES pair of a manifest instead.
    #[arg(long, requires = "out_dir")]
    pub manifest: Option<PathBuf>,
    /// Directory for `<P_side_view>.json` results in manifest mode.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub bins: usize,
    /// Search half-range in pixels.
    #[arg(long, default_value_t = 10)]
    pub range: i32,
    /// Level-1 grid step.
    #[arg(long, default_value_t = 5)]
    pub step: i32,
    /// Score every translation in the range instead of the two-level search.
    #[arg(long)]
    pub exhaustive: bool,
    /// Overlay PNG of the reference and the aligned image.
    #[arg(long, conflicts_with = "manifest")]
    pub viz: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Style::Checkerboard)]
    pub style: Style,
    /// Aligned floating image PNG.
    #[arg(long, conflicts_with = "manifest")]
    pub aligned: Option<PathBuf>,
}

fn search(args: &RegisterArgs, ref_img: &vdes_core::ImageGrid, flo: &vdes_core::ImageGrid) -> Result<RegistrationResult> {
    let res = if args.exhaustive {
        register_exhaustive(ref_img, flo, args.range, args.bins)?
    } else {
        let p = SearchParams {
            level1_range: args.range,
            level1_step: args.step,
            bins: args.bins,
            ..SearchParams::default()
        };
        register_two_level(ref_img, flo, &p)?
    };
    Ok(res)
}

fn result_json(res: &RegistrationResult, args: &RegisterArgs) -> serde_json::Value {
    let mut v = res.to_json();
    v["method"] = json!(if args.exhaustive { "exhaustive" } else { "two-level" });
    v["bins"] = json!(args.bins);
    v
}

pub fn register(args: &RegisterArgs) -> Result<()> {
    if let Some(manifest) = &args.manifest {
        let out_dir = args.out_dir.as_deref().expect("clap enforces --out-dir");
        let records = read_manifest_csv(fsutil::open_file(manifest)?)
            .with_context(|| format!("cannot parse {}", manifest.display()))?;
        let pm = build_pair_manifest(&records)?;
        for pair in &pm.pairs {
            let ref_img = fsutil::load(&pair.le().path)?;
            let flo = fsutil::load(&pair.des().path)?;
            let res = search(args, &ref_img, &flo).with_context(|| format!("registering {}", pair.le().key))?;
            log::info!("{}: ({}, {}) mi {:.4}", pair.le().key.breast_view_stem(), res.best.tx, res.best.ty, res.mi);
            let out = out_dir.join(format!("{}.json", pair.le().key.breast_view_stem()));
            fsutil::write_json(&out, &result_json(&res, args))?;
        }
        return Ok(());
    }
    let (ref_path, flo_path, out) = (
        args.ref_path.as_deref().expect("clap enforces --ref"),
        args.flo.as_deref().expect("clap enforces --flo"),
        args.out.as_deref().expect("clap enforces --out"),
    );
    let ref_img = fsutil::load(ref_path)?;
    let flo = fsutil::load(flo_path)?;
    let res = search(args, &ref_img, &flo)?;
    log::info!("best translation ({}, {}) mi {:.4}", res.best.tx, res.best.ty, res.mi);
    fsutil::write_json(out, &result_json(&res, args))?;
    if args.viz.is_some() || args.aligned.is_some() {
        let (aligned, _) = apply_translation(&flo, res.best, ref_img.dims());
        if let Some(p) = &args.aligned {
            fsutil::save(&aligned, p)?;
        }
        if let Some(p) = &args.viz {
            let style = match args.style {
                Style::Checkerboard => OverlayStyle::Checkerboard,
                Style::RedCyan => OverlayStyle::RedCyan,
            };
            fsutil::ensure_parent(p)?;
            save_rgb_png(&emit_overlay(&ref_img, &aligned, style)?, p)?;
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long = "in", required_unless_present = "manifest", conflicts_with = "manifest")]
    pub input: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    pub out: Option<PathBuf>,
    /// Denoise every LE image of a manifest into `<out-dir>/<stem>_LED.png`.
    #[arg(long, requires = "out_dir")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Filter strength.
    #[arg(long, default_value_t = 10.0)]
    pub h: f64,
    /// Template patch side (odd).
    #[arg(long, default_value_t = 7)]
    pub template: usize,
    /// Search window side (odd).
    #[arg(long, default_value_t = 21)]
    pub search: usize,
}

pub fn led_path(dir: &Path, le_stem: &str) -> PathBuf {
    dir.join(format!("{le_stem}_LED.png"))
}

pub fn denoise(args: &DenoiseArgs) -> Result<()> {
    let p = NlmParams {
        h: args.h,
        template: args.template,
        search: args.search,
    };
    p.validate()?;
    if let Some(manifest) = &args.manifest {
        let out_dir = args.out_dir.as_deref().expect("clap enforces --out-dir");
        let records = read_manifest_csv(fsutil::open_file(manifest)?)
            .with_context(|| format!("cannot parse {}", manifest.display()))?;
        let le: Vec<_> = records.iter().filter(|r| r.key.energy == Energy::LowEnergy).collect();
        // Images are independent; each one is written by exactly one task.
        le.par_iter().try_for_each(|r| -> Result<()> {
            let img = fsutil::load(&r.path)?;
            let led = nl_means(&img, &p).with_context(|| format!("denoising {}", r.path.display()))?;
            fsutil::save(&led, &led_path(out_dir, &r.key.render()))
        })?;
        log::info!("denoised {} LE images", le.len());
        return Ok(());
    }
    let input = args.input.as_deref().expect("clap enforces --in");
    let out = args.out.as_deref().expect("clap enforces --out");
    let img = fsutil::load(input)?;
    fsutil::save(&nl_means(&img, &p)?, out)
}

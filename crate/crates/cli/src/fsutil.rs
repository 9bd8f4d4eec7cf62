//! File helpers shared by the subcommands. All listings are sorted so that
//! outputs never depend on directory iteration order.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use vdes_core::ImageGrid;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).with_context(|| format!("cannot create {}", p.display()))
        }
        _ => Ok(()),
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn load(path: &Path) -> Result<ImageGrid> {
    Ok(vdes_core::load_image(path)?)
}

pub fn save(img: &ImageGrid, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    Ok(img.save_png(path)?)
}

pub fn create_file(path: &Path) -> Result<fs::File> {
    ensure_parent(path)?;
    fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))
}

pub fn open_file(path: &Path) -> Result<fs::File> {
    fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

/// Regular files directly inside `dir`, sorted by name.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Files under `dir` (recursively) whose name ends with `suffix`, sorted.
pub fn find_suffix(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("cannot list {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// `dir/P1_L_CC_0_LE.png` with `LE` replaced by `kind`.
pub fn sibling(le_path: &Path, kind: &str) -> PathBuf {
    let name = le_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name.strip_suffix("_LE.png").unwrap_or(name);
    le_path.with_file_name(format!("{stem}_{kind}.png"))
}

/// Crop stem (`P1_L_CC_0`) of an `_LE.png` path.
pub fn crop_stem(le_path: &Path) -> String {
    let name = le_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.strip_suffix("_LE.png").unwrap_or(name).to_string()
}

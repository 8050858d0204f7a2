//! Dataset directories: four PNG layers per example under `images/` and a
//! JSON Lines manifest at `manifest.jsonl`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::Lang;
use super::synth::TrainingExample;
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPaths {
    pub src: String,
    pub back: String,
    pub tgt: String,
    pub tgt_text_img: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub lang_tag: Lang,
    pub src_text: String,
    pub tgt_text: String,
    /// Relative to the manifest's directory.
    pub paths: LayerPaths,
    pub seed: u64,
}

/// Writes `examples` into `dir` (created if needed) and returns the records
/// written to the manifest.
pub fn write_dataset(dir: &Path, examples: &[TrainingExample]) -> Result<Vec<ManifestRecord>> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let id = format!("{i:06}");
        let rel = |layer: &str| format!("images/{id}_{layer}.png");
        let paths = LayerPaths {
            src: rel("src"),
            back: rel("back"),
            tgt: rel("tgt"),
            tgt_text_img: rel("tgt_text"),
        };
        for (img, p) in [
            (&e.src_image, &paths.src),
            (&e.background, &paths.back),
            (&e.tgt_image, &paths.tgt),
            (&e.tgt_text_image, &paths.tgt_text_img),
        ] {
            img.write_png(&dir.join(p))?;
        }
        records.push(ManifestRecord {
            id,
            lang_tag: e.lang,
            src_text: e.src_text.clone(),
            tgt_text: e.tgt_text.clone(),
            paths,
            seed: e.seed,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    let mut out = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for r in &records {
        writeln!(out, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(records)
}

/// Accepts either the manifest file or its directory.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Loads the four layers of `record`, resolving paths against `root`.
pub fn load_example(root: &Path, record: &ManifestRecord) -> Result<TrainingExample> {
    let read = |p: &str| Image::read_png(&root.join(p));
    Ok(TrainingExample {
        src_image: read(&record.paths.src)?,
        background: read(&record.paths.back)?,
        tgt_image: read(&record.paths.tgt)?,
        tgt_text_image: read(&record.paths.tgt_text_img)?,
        src_text: record.src_text.clone(),
        tgt_text: record.tgt_text.clone(),
        lang: record.lang_tag,
        seed: record.seed,
    })
}

pub fn load_dataset(path: &Path) -> Result<Vec<TrainingExample>> {
    let manifest = manifest_path(path);
    let root = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(&manifest)?
        .iter()
        .map(|r| load_example(root, r))
        .collect()
}

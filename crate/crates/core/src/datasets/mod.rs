//! Labelled image records, the JSON Lines manifest, the synthetic
//! shape-versus-texture generator and the texture perturbations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::pipeline::BoundingBox;
use crate::plane::{load_gray, save_gray, Plane};

pub mod perturb;
pub mod synth;

pub use perturb::{
    add_tissue_patch, low_freq_swap, low_freq_swap_unclamped, perturb_dataset, PerturbConfig,
    Provenance,
};
pub use synth::{generate_synthetic, generate_with_shapes, rule_oracle, ShapeParams, SynthConfig};

/// One manifest line. `image` is a path relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    pub label: Label,
    pub patient_id: String,
    #[serde(default)]
    pub boxes: Vec<BoundingBox>,
}

/// A grayscale image with its label, patient and ground-truth boxes. `id` is
/// the image's manifest path.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: GrayImage,
    pub label: Label,
    pub patient_id: String,
    pub boxes: Vec<BoundingBox>,
}

impl LabeledImage {
    pub fn plane(&self) -> Plane {
        Plane::from_gray(&self.image)
    }

    pub fn record(&self) -> ManifestRecord {
        ManifestRecord {
            image: self.id.clone(),
            label: self.label,
            patient_id: self.patient_id.clone(),
            boxes: self.boxes.clone(),
        }
    }
}

/// Parses a manifest without touching the images it references.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let r: ManifestRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if r.image.is_empty() {
            return Err(err("empty image path".into()));
        }
        if r.patient_id.is_empty() {
            return Err(err("empty patient_id".into()));
        }
        for b in &r.boxes {
            b.validate().map_err(|e| err(e.to_string()))?;
        }
        out.push(r);
    }
    Ok(out)
}

/// Directory that manifest-relative image paths are resolved against.
pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads a manifest and every image it names, preserving order.
pub fn load_manifest(path: &Path) -> Result<Vec<LabeledImage>> {
    let root = manifest_root(path);
    read_manifest(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let image = load_gray(&root.join(&r.image))?;
            let (w, h) = (image.width() as i64, image.height() as i64);
            if let Some(b) = r
                .boxes
                .iter()
                .find(|b| b.x_min < 0 || b.y_min < 0 || b.x_max > w || b.y_max > h)
            {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("box {b:?} exceeds the {w}x{h} image"),
                });
            }
            Ok(LabeledImage {
                id: r.image,
                image,
                label: r.label,
                patient_id: r.patient_id,
                boxes: r.boxes,
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialise");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Writes every image as PNG under `dir` (at its `id` path) and a manifest
/// named `manifest` next to them.
pub fn write_dataset(dir: &Path, manifest: &str, images: &[LabeledImage]) -> Result<PathBuf> {
    for img in images {
        let p = dir.join(&img.id);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_gray(&p, &img.image)?;
    }
    let path = dir.join(manifest);
    let records: Vec<ManifestRecord> = images.iter().map(LabeledImage::record).collect();
    write_manifest(&path, &records)?;
    Ok(path)
}

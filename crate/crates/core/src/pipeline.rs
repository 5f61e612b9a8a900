//! Two-stage inference: candidate regions, per-region classification and
//! the image-level label rule.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curriculum::{argmax, Sample};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::msop::MsSopClassifier;
use crate::plane::Plane;

/// Axis-aligned box in pixel coordinates, covering columns
/// `x_min..x_max` and rows `y_min..y_max` (upper bounds exclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
}

impl BoundingBox {
    pub fn new(x_min: i64, y_min: i64, x_max: i64, y_max: i64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::arg(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn whole(width: usize, height: usize) -> Self {
        Self {
            x_min: 0,
            y_min: 0,
            x_max: width as i64,
            y_max: height as i64,
        }
    }

    pub fn width(&self) -> i64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> i64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        (self.width().max(0) * self.height().max(0)) as f64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) as f64 / 2.0,
            (self.y_min + self.y_max) as f64 / 2.0,
        )
    }

    /// Boundary points count as inside.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        (self.x_min as f64..=self.x_max as f64).contains(&x)
            && (self.y_min as f64..=self.y_max as f64).contains(&y)
    }

    /// Intersection with the image, or `None` when nothing is left.
    pub fn clamp(&self, width: usize, height: usize) -> Option<Self> {
        let b = Self {
            x_min: self.x_min.max(0),
            y_min: self.y_min.max(0),
            x_max: self.x_max.min(width as i64),
            y_max: self.y_max.min(height as i64),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0);
        let inter = (iw * ih) as f64;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// Copies the part of `img` under `bbox` after clamping to the image.
pub fn crop_region(img: &Plane, bbox: &BoundingBox) -> Result<Plane> {
    let b = bbox
        .clamp(img.width(), img.height())
        .ok_or_else(|| Error::arg(format!("box {bbox:?} is empty inside the image")))?;
    let (x0, y0) = (b.x_min as usize, b.y_min as usize);
    Ok(Plane::from_fn(
        b.width() as usize,
        b.height() as usize,
        |x, y| img.get(x0 + x, y0 + y),
    ))
}

/// Image-level label from region labels: malignant if any region is,
/// normal if every region is, benign otherwise.
pub fn aggregate_predictions(labels: &[Label]) -> Result<Label> {
    if labels.is_empty() {
        return Err(Error::arg(
            "cannot aggregate an empty list of region labels",
        ));
    }
    Ok(if labels.contains(&Label::Malignant) {
        Label::Malignant
    } else if labels.iter().all(|&l| l == Label::Normal) {
        Label::Normal
    } else {
        Label::Benign
    })
}

/// Anything that maps an image region to class probabilities.
pub trait RegionClassifier {
    fn classify(&self, region: &Plane) -> Result<Vec<f64>>;
}

impl RegionClassifier for MsSopClassifier {
    /// Bilinear resize to the network input, then a forward pass.
    fn classify(&self, region: &Plane) -> Result<Vec<f64>> {
        let s = self.config().input_size;
        self.predict_proba(&region.resize_bilinear(s, s)?.to_rgb_tensor())
    }
}

/// One detector output record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
    pub confidence: f64,
}

pub const DEFAULT_CONFIDENCE: f64 = 0.5;

/// Source of candidate regions.
#[derive(Clone, Debug, PartialEq)]
pub enum RoiProvider {
    /// The boxes stored with each record.
    Manifest,
    /// Detector outputs keyed by image id, already filtered by confidence.
    External(HashMap<String, Vec<BoundingBox>>),
    /// No boxes, so every image goes through the whole-image fallback.
    WholeImage,
}

impl RoiProvider {
    /// Parses detector records (one JSON object per line) and keeps those
    /// with `confidence >= threshold`.
    pub fn from_detections(path: &Path, threshold: f64) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut boxes: HashMap<String, Vec<BoundingBox>> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let d: Detection =
                serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(parse_err(
                    i + 1,
                    format!("confidence {} is outside [0, 1]", d.confidence),
                ));
            }
            let b = BoundingBox::new(d.x_min, d.y_min, d.x_max, d.y_max)
                .map_err(|e| parse_err(i + 1, e.to_string()))?;
            let entry = boxes.entry(d.image_id).or_default();
            if d.confidence >= threshold {
                entry.push(b);
            }
        }
        Ok(RoiProvider::External(boxes))
    }

    pub fn boxes(&self, image_id: &str, manifest_boxes: &[BoundingBox]) -> Vec<BoundingBox> {
        match self {
            RoiProvider::Manifest => manifest_boxes.to_vec(),
            RoiProvider::External(map) => map.get(image_id).cloned().unwrap_or_default(),
            RoiProvider::WholeImage => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPrediction {
    /// `None` for the whole-image fallback.
    pub bbox: Option<BoundingBox>,
    pub label: Label,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub image_id: String,
    pub regions: Vec<RegionPrediction>,
    pub label: Label,
    pub fallback_used: bool,
}

fn region_prediction(
    model: &impl RegionClassifier,
    region: &Plane,
    bbox: Option<BoundingBox>,
) -> Result<RegionPrediction> {
    let probs = model.classify(region)?;
    let label = Label::from_index(argmax(&probs))
        .ok_or_else(|| Error::Invariant(format!("classifier returned {} classes", probs.len())))?;
    Ok(RegionPrediction { bbox, label, probs })
}

/// Classifies every candidate region and aggregates. Boxes that fall
/// entirely outside the image are ignored; with no usable box the whole
/// image is classified instead.
pub fn predict_image(
    image_id: &str,
    img: &Plane,
    boxes: &[BoundingBox],
    model: &impl RegionClassifier,
) -> Result<ImagePrediction> {
    let mut regions = Vec::new();
    for b in boxes {
        if let Some(c) = b.clamp(img.width(), img.height()) {
            regions.push(region_prediction(model, &crop_region(img, &c)?, Some(c))?);
        }
    }
    let fallback_used = regions.is_empty();
    if fallback_used {
        regions.push(region_prediction(model, img, None)?);
    }
    let labels: Vec<Label> = regions.iter().map(|r| r.label).collect();
    Ok(ImagePrediction {
        image_id: image_id.to_string(),
        label: aggregate_predictions(&labels)?,
        regions,
        fallback_used,
    })
}

/// Training examples from one labelled image: each box crop (or the whole
/// image when there is none) resized to `size x size`.
pub fn region_samples(
    img: &Plane,
    boxes: &[BoundingBox],
    label: Label,
    size: usize,
) -> Result<Vec<Sample>> {
    let usable: Vec<BoundingBox> = boxes
        .iter()
        .filter_map(|b| b.clamp(img.width(), img.height()))
        .collect();
    let crops = if usable.is_empty() {
        vec![img.clone()]
    } else {
        usable
            .iter()
            .map(|b| crop_region(img, b))
            .collect::<Result<_>>()?
    };
    crops
        .into_iter()
        .map(|c| {
            Ok(Sample {
                image: c.resize_bilinear(size, size)?,
                label,
            })
        })
        .collect()
}

//! Dataset manifests, detection files, validation, and deterministic splits.
//!
//! Two file formats live here:
//!
//! - **Manifest**: one JSON document describing a named dataset of annotated
//!   images (`{"name", "provenance", "images": [{"id", "file", "width",
//!   "height", "boxes": [...]}]}`). Boxes are ground truth for the single
//!   `fruit_fly` class; no class labels appear anywhere.
//! - **Detection file**: UTF-8 text, one JSON object per line
//!   (`{"image_id", "boxes": [{"x_min", ..., "confidence"}]}`). Image ids
//!   absent from the file mean "zero detections", which is how a detector
//!   that finds nothing behaves.
//!
//! Boxes use a half-open pixel rectangle convention
//! `[x_min, x_max) x [y_min, y_max)`, so `area = (x_max - x_min) * (y_max -
//! y_min)` exactly and integer-coordinate boxes tile the pixel grid.

use std::collections::BTreeMap;
use std::collections::btree_map::Entry;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}")]
    ManifestParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: malformed detection line: {reason}")]
    DetectionParse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: duplicate detection record for image `{image_id}`")]
    DuplicateDetectionRecord {
        path: PathBuf,
        line: usize,
        image_id: String,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid dataset `{name}`: {}", format_violations(.violations))]
    Invalid {
        name: String,
        violations: Vec<Violation>,
    },
    #[error("train fraction {0} outside (0, 1)")]
    InvalidTrainFraction(f64),
    #[error("invalid bounding box: {0}")]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("box ({x_min}, {y_min}, {x_max}, {y_max}) has no positive area")]
    EmptyBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("box has a non-finite or negative coordinate")]
    BadCoordinate,
    #[error("confidence {0} outside [0, 1]")]
    BadConfidence(f64),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(Violation::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// One dataset-invariant violation, naming the image and field at fault.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub image_id: String,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "image `{}` {}: {}", self.image_id, self.field, self.message)
    }
}

/// Axis-aligned rectangle in pixel coordinates, half-open on both axes.
///
/// Construction enforces finite, non-negative coordinates and strictly
/// positive area, so a value of this type always has well-defined geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = GeometryError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BoundingBox::new(raw.x_min, raw.y_min, raw.x_max, raw.y_max)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(GeometryError::BadCoordinate);
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(GeometryError::EmptyBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    /// Overlap area with `other`; zero when disjoint.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    fn within(&self, width: u32, height: u32) -> bool {
        self.x_max <= f64::from(width) && self.y_max <= f64::from(height)
    }
}

/// One annotated image: id, file location, pixel size, ground-truth boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    #[serde(rename = "id")]
    pub image_id: String,
    #[serde(rename = "file")]
    pub file_path: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BoundingBox>,
}

/// How a dataset was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Blurry,
    SaltPepper,
    Dust,
    Flare,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Provenance::Original => "original",
            Provenance::Blurry => "blurry",
            Provenance::SaltPepper => "salt_pepper",
            Provenance::Dust => "dust",
            Provenance::Flare => "flare",
        };
        f.write_str(s)
    }
}

/// A named collection of annotated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub provenance: Provenance,
    pub images: Vec<AnnotatedImage>,
}

/// One detection: a box plus the detector's confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, confidence: f64) -> Result<Self, GeometryError> {
        if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
            return Err(GeometryError::BadConfidence(confidence));
        }
        Ok(Self { bbox, confidence })
    }
}

/// All detections reported for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

/// Detection records keyed by image id.
pub type DetectionMap = BTreeMap<String, DetectionRecord>;

#[derive(Debug, Serialize, Deserialize)]
struct RawDetectionBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    confidence: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDetectionLine {
    image_id: String,
    boxes: Vec<RawDetectionBox>,
}

/// Parse one line of the detection-lines format.
///
/// Shared by [`load_detections`] and the bench adapter protocol, which uses
/// the same schema for its per-image responses.
pub fn parse_detection_line(line: &str) -> Result<DetectionRecord, String> {
    let raw: RawDetectionLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let mut detections = Vec::with_capacity(raw.boxes.len());
    for b in raw.boxes {
        let bbox = BoundingBox::new(b.x_min, b.y_min, b.x_max, b.y_max).map_err(|e| e.to_string())?;
        let det = Detection::new(bbox, b.confidence).map_err(|e| e.to_string())?;
        detections.push(det);
    }
    Ok(DetectionRecord {
        image_id: raw.image_id,
        detections,
    })
}

fn detection_record_to_line(record: &DetectionRecord) -> String {
    let raw = RawDetectionLine {
        image_id: record.image_id.clone(),
        boxes: record
            .detections
            .iter()
            .map(|d| RawDetectionBox {
                x_min: d.bbox.x_min(),
                y_min: d.bbox.y_min(),
                x_max: d.bbox.x_max(),
                y_max: d.bbox.y_max(),
                confidence: d.confidence,
            })
            .collect(),
    };
    serde_json::to_string(&raw).expect("detection line serialization cannot fail")
}

/// Load and fully validate a dataset manifest.
pub fn load_manifest(path: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let dataset: Dataset =
        serde_json::from_str(&text).map_err(|source| DatasetError::ManifestParse {
            path: path.to_path_buf(),
            source,
        })?;
    if dataset.images.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let violations = validate_dataset(&dataset);
    if !violations.is_empty() {
        return Err(DatasetError::Invalid {
            name: dataset.name.clone(),
            violations,
        });
    }
    Ok(dataset)
}

/// Write a dataset in the manifest format. Reloading the file yields a
/// structurally identical dataset.
pub fn write_manifest(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let json =
        serde_json::to_string_pretty(dataset).expect("manifest serialization cannot fail");
    fs::write(path, json).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Check every dataset invariant, returning one entry per violation.
///
/// An empty result means the dataset is valid. Violations are returned, not
/// thrown, so callers can report all problems at once.
pub fn validate_dataset(dataset: &Dataset) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = BTreeMap::new();
    for image in &dataset.images {
        if let Some(count) = seen.get_mut(&image.image_id) {
            *count += 1;
        } else {
            seen.insert(image.image_id.clone(), 1usize);
        }
        if image.width == 0 || image.height == 0 {
            violations.push(Violation {
                image_id: image.image_id.clone(),
                field: "width/height".into(),
                message: "image dimensions must be positive".into(),
            });
            continue;
        }
        for (i, b) in image.boxes.iter().enumerate() {
            if !b.within(image.width, image.height) {
                violations.push(Violation {
                    image_id: image.image_id.clone(),
                    field: format!("boxes[{i}]"),
                    message: format!(
                        "box extends to ({}, {}) outside {}x{} image",
                        b.x_max(),
                        b.y_max(),
                        image.width,
                        image.height
                    ),
                });
            }
        }
    }
    for (id, count) in seen {
        if count > 1 {
            violations.push(Violation {
                image_id: id,
                field: "id".into(),
                message: format!("duplicated {count} times"),
            });
        }
    }
    violations
}

/// Load a detection file (one JSON object per line) into a map keyed by
/// image id. Blank lines are ignored; a file with no records is an empty map.
pub fn load_detections(path: &Path) -> Result<DetectionMap, DatasetError> {
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut map = DetectionMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            parse_detection_line(&line).map_err(|reason| DatasetError::DetectionParse {
                path: path.to_path_buf(),
                line: line_no,
                reason,
            })?;
        match map.entry(record.image_id.clone()) {
            Entry::Vacant(slot) => {
                slot.insert(record);
            }
            Entry::Occupied(_) => {
                return Err(DatasetError::DuplicateDetectionRecord {
                    path: path.to_path_buf(),
                    line: line_no,
                    image_id: record.image_id,
                });
            }
        }
    }
    Ok(map)
}

/// Write a detection map in the detection-lines format, one record per line
/// in image-id order.
pub fn write_detections(map: &DetectionMap, path: &Path) -> Result<(), DatasetError> {
    let mut file = fs::File::create(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    for record in map.values() {
        writeln!(file, "{}", detection_record_to_line(record)).map_err(|source| {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        })?;
    }
    Ok(())
}

/// Split a dataset into train/test partitions.
///
/// The split shuffles image ids by a seeded permutation after sorting them
/// lexicographically, so the same `(dataset, fraction, seed)` always yields
/// the same partition regardless of manifest order or platform. The train
/// side receives `round(train_fraction * n)` images.
pub fn split_dataset(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DatasetError> {
    if dataset.images.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    if !train_fraction.is_finite() || train_fraction <= 0.0 || train_fraction >= 1.0 {
        return Err(DatasetError::InvalidTrainFraction(train_fraction));
    }

    // Shuffle references sorted by id, so the permutation depends only on
    // the seed and the set of ids, not on manifest order.
    let mut sorted: Vec<&AnnotatedImage> = dataset.images.iter().collect();
    sorted.sort_unstable_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut rng = SplitMix64::new(seed);
    for i in (1..sorted.len()).rev() {
        let j = rng.next_below(i as u64 + 1) as usize;
        sorted.swap(i, j);
    }

    let n_train = (train_fraction * dataset.images.len() as f64).round() as usize;
    let collect = |slice: &[&AnnotatedImage]| -> Vec<AnnotatedImage> {
        let mut picked: Vec<AnnotatedImage> = slice.iter().map(|img| (*img).clone()).collect();
        picked.sort_unstable_by(|a, b| a.image_id.cmp(&b.image_id));
        picked
    };

    let train = Dataset {
        name: format!("{}-train", dataset.name),
        provenance: dataset.provenance,
        images: collect(&sorted[..n_train]),
    };
    let test = Dataset {
        name: format!("{}-test", dataset.name),
        provenance: dataset.provenance,
        images: collect(&sorted[n_train..]),
    };
    Ok((train, test))
}

//! Dataset manifest schema and image loading shared by the generator,
//! the training pipeline, and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::geometry::BBox;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// One image: path (relative to the manifest), patient id, polarity flag,
/// and ground-truth boxes (empty exactly when negative).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image: PathBuf,
    pub patient_id: String,
    pub polarity: Polarity,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file =
            std::fs::File::create(path).map_err(|e| Error::io("creating manifest", path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self).map_err(|e| {
            Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let file =
            std::fs::File::open(path).map_err(|e| Error::io("opening manifest", path, e))?;
        let m: Manifest =
            serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            match r.polarity {
                Polarity::Positive if r.boxes.is_empty() => {
                    return Err(Error::Invalid(format!(
                        "positive record {} has no boxes",
                        r.image.display()
                    )))
                }
                Polarity::Negative if !r.boxes.is_empty() => {
                    return Err(Error::Invalid(format!(
                        "negative record {} carries boxes",
                        r.image.display()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn positives(&self) -> Vec<&ImageRecord> {
        self.records
            .iter()
            .filter(|r| r.polarity == Polarity::Positive)
            .collect()
    }

    pub fn negatives(&self) -> Vec<&ImageRecord> {
        self.records
            .iter()
            .filter(|r| r.polarity == Polarity::Negative)
            .collect()
    }
}

/// Load a grayscale PNG as a [1, S, S] tensor with intensities in [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<f64> = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Ok(Tensor::new(vec![1, h as usize, w as usize], data))
}

/// Resolve a record's image path relative to its manifest location.
pub fn image_path(manifest_path: &Path, record: &ImageRecord) -> PathBuf {
    match manifest_path.parent() {
        Some(dir) => dir.join(&record.image),
        None => record.image.clone(),
    }
}

//! Dataset ingestion, synthetic data and image I/O.
//!
//! The canonical image format is binary PGM (P5, maxval 255). A dataset
//! directory pairs `<id>.pgm` with `<id>_mask.pgm`; images are resized
//! bilinearly to the working resolution, masks with nearest-neighbor so they
//! stay binary.

mod pgm;
mod resize;
mod synth;

pub use pgm::{load_image_pgm, save_heatmap, save_image_pgm, GrayImage};
pub use resize::{resize_bilinear, resize_nearest};
pub use synth::{synth_dataset, synth_dataset_with_meta, Ellipse};

use std::path::{Path, PathBuf};

/// Errors from file ingestion and writing.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid PGM at byte {offset}: {reason}")]
    Pgm {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("resize: target extents must be positive")]
    EmptyResize,
    #[error("dataset: {0}")]
    Dataset(String),
}

/// One image/mask pair at the working resolution.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub h: usize,
    pub w: usize,
    /// Grayscale intensities in `[0, 1]`.
    pub image: Vec<f32>,
    /// Binary mask, strictly 0/1.
    pub mask: Vec<u8>,
}

/// An in-memory dataset of uniformly sized samples.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub h: usize,
    pub w: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Thresholds an intensity map into a 0/1 mask; `>= threshold` maps to 1.
pub fn binarize_mask(values: &[f32], threshold: f32) -> Vec<u8> {
    values.iter().map(|&v| u8::from(v >= threshold)).collect()
}

/// Loads every `<id>.pgm` / `<id>_mask.pgm` pair under `dir`, sorted by id,
/// resized to `edge x edge`.
pub fn load_dataset_dir(dir: &Path, edge: usize) -> Result<Dataset, DataError> {
    let entries = std::fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut ids: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".pgm") {
            if !stem.ends_with("_mask") {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(DataError::Dataset(format!(
            "no .pgm images found in {}",
            dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let image = load_image_pgm(&dir.join(format!("{id}.pgm")))?;
        let mask_img = load_image_pgm(&dir.join(format!("{id}_mask.pgm")))?;
        let image = resize_bilinear(&image, edge, edge)?;
        let mask_small = resize_nearest(&mask_img, edge, edge)?;
        samples.push(Sample {
            id,
            h: edge,
            w: edge,
            image: image.data,
            mask: binarize_mask(&mask_small.data, 0.5),
        });
    }
    Ok(Dataset {
        samples,
        h: edge,
        w: edge,
    })
}

/// Writes a dataset as `<id>.pgm` / `<id>_mask.pgm` pairs.
pub fn save_dataset_dir(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for s in &dataset.samples {
        let img = GrayImage {
            w: s.w,
            h: s.h,
            data: s.image.clone(),
        };
        save_image_pgm(&img, &dir.join(format!("{}.pgm", s.id)))?;
        let mask = GrayImage {
            w: s.w,
            h: s.h,
            data: s.mask.iter().map(|&m| f32::from(m)).collect(),
        };
        save_image_pgm(&mask, &dir.join(format!("{}_mask.pgm", s.id)))?;
    }
    Ok(())
}

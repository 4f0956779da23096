//! Chip datasets: storage format, split planning, augmentation, synthesis.

mod augment;
mod split;
mod synth;

pub use augment::{augment_batch, AugmentPolicy};
pub use split::{IncrementView, SplitPlan, DEFAULT_INCREMENTS};
pub use synth::{default6_classes, generate_synthetic, stripe_mask, ClassKind, ClassSpec};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgio::{self, ImageError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHIP_SIDE: usize = 32;
pub const CHIP_CHANNELS: usize = 3;
pub const CHIP_BYTES: usize = CHIP_SIDE * CHIP_SIDE * CHIP_CHANNELS;

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error("{file} holds {actual} bytes, {expected} expected")]
    BlobSize {
        file: String,
        expected: usize,
        actual: usize,
    },
    #[error("sample {index} has label {label} but only {classes} classes are declared")]
    BadLabel {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid {what}: {reason}")]
    Param { what: &'static str, reason: String },
    #[error("import: {0}")]
    Import(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn param(what: &'static str, reason: impl Into<String>) -> Self {
        DataError::Param {
            what,
            reason: reason.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Fixed-size RGB chips with integer labels, immutable once constructed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChipDataset {
    images: Vec<u8>,
    labels: Vec<u16>,
    class_names: Vec<String>,
    provenance: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    n: usize,
    width: usize,
    height: usize,
    channels: usize,
    class_names: Vec<String>,
    labels_file: String,
    images_file: String,
    provenance: String,
}

impl ChipDataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<u16>,
        class_names: Vec<String>,
        provenance: String,
    ) -> Result<Self, DataError> {
        if class_names.is_empty() {
            return Err(DataError::param("dataset", "no class names"));
        }
        if images.len() != labels.len() * CHIP_BYTES {
            return Err(DataError::BlobSize {
                file: "images".into(),
                expected: labels.len() * CHIP_BYTES,
                actual: images.len(),
            });
        }
        for (index, &label) in labels.iter().enumerate() {
            if label as usize >= class_names.len() {
                return Err(DataError::BadLabel {
                    index,
                    label: label as usize,
                    classes: class_names.len(),
                });
            }
        }
        Ok(ChipDataset {
            images,
            labels,
            class_names,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn chip(&self, i: usize) -> &[u8] {
        &self.images[i * CHIP_BYTES..(i + 1) * CHIP_BYTES]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Gather chips into a normalized `[B, 3, 32, 32]` batch (pixels / 255).
    pub fn batch<F: Scalar>(&self, indices: &[usize]) -> Tensor<F> {
        let mut bytes = Vec::with_capacity(indices.len() * CHIP_BYTES);
        for &i in indices {
            bytes.extend_from_slice(self.chip(i));
        }
        bytes_to_batch(&bytes, indices.len())
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label(i)).collect()
    }

    /// Mean pixel value per channel over the whole dataset, in [0,1].
    pub fn mean_color<F: Scalar>(&self) -> [F; CHIP_CHANNELS] {
        let mut sums = [0u64; CHIP_CHANNELS];
        for px in self.images.chunks_exact(CHIP_CHANNELS) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as u64;
            }
        }
        let denom = (self.len() * CHIP_SIDE * CHIP_SIDE) as f64 * 255.0;
        sums.map(|s| F::from_f64(s as f64 / denom))
    }

    /// Write `manifest.json`, `labels.bin` and `chips.bin` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            n: self.len(),
            width: CHIP_SIDE,
            height: CHIP_SIDE,
            channels: CHIP_CHANNELS,
            class_names: self.class_names.clone(),
            labels_file: "labels.bin".into(),
            images_file: "chips.bin".into(),
            provenance: self.provenance.clone(),
        };
        let mut label_bytes = Vec::with_capacity(self.labels.len() * 2);
        for &l in &self.labels {
            label_bytes.extend_from_slice(&l.to_le_bytes());
        }
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        for (name, bytes) in [
            ("manifest.json", &json),
            ("labels.bin", &label_bytes),
            ("chips.bin", &self.images),
        ] {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| DataError::io(&path, e))?;
        }
        Ok(())
    }

    /// Load from a manifest path or a directory containing `manifest.json`.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let manifest_path = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path.to_path_buf()
        };
        let bad = |reason: String| DataError::Manifest {
            path: manifest_path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(&manifest_path).map_err(|e| DataError::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(bad(format!(
                "unsupported format_version {}",
                manifest.format_version
            )));
        }
        if (manifest.width, manifest.height, manifest.channels) != (CHIP_SIDE, CHIP_SIDE, CHIP_CHANNELS)
        {
            return Err(bad(format!(
                "unsupported geometry {}x{}x{}",
                manifest.width, manifest.height, manifest.channels
            )));
        }
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let labels_path = base.join(&manifest.labels_file);
        let label_bytes = fs::read(&labels_path).map_err(|e| DataError::io(&labels_path, e))?;
        if label_bytes.len() != manifest.n * 2 {
            return Err(DataError::BlobSize {
                file: manifest.labels_file.clone(),
                expected: manifest.n * 2,
                actual: label_bytes.len(),
            });
        }
        let labels: Vec<u16> = label_bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let images_path = base.join(&manifest.images_file);
        let images = fs::read(&images_path).map_err(|e| DataError::io(&images_path, e))?;
        if images.len() != manifest.n * CHIP_BYTES {
            return Err(DataError::BlobSize {
                file: manifest.images_file.clone(),
                expected: manifest.n * CHIP_BYTES,
                actual: images.len(),
            });
        }
        ChipDataset::new(images, labels, manifest.class_names, manifest.provenance)
    }
}

/// Convert `n` interleaved RGB chips to a normalized `[n, 3, 32, 32]` tensor.
pub fn bytes_to_batch<F: Scalar>(bytes: &[u8], n: usize) -> Tensor<F> {
    assert_eq!(bytes.len(), n * CHIP_BYTES, "chip byte count");
    let inv = F::from_f64(1.0 / 255.0);
    let mut data = vec![F::zero(); n * CHIP_BYTES];
    let plane = CHIP_SIDE * CHIP_SIDE;
    for i in 0..n {
        let src = &bytes[i * CHIP_BYTES..(i + 1) * CHIP_BYTES];
        let dst_base = i * CHIP_BYTES;
        for p in 0..plane {
            for c in 0..CHIP_CHANNELS {
                data[dst_base + c * plane + p] =
                    F::from_f64(src[p * CHIP_CHANNELS + c] as f64) * inv;
            }
        }
    }
    Tensor::new(vec![n, CHIP_CHANNELS, CHIP_SIDE, CHIP_SIDE], data).expect("batch shape")
}

/// Pack a directory tree of per-class PPM files into a dataset. Class names
/// are the subdirectory names, sorted; files within a class are taken in
/// sorted order. Every image must be a 32x32 binary P6.
pub fn import_ppm_tree(src: &Path, provenance: &str) -> Result<ChipDataset, DataError> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(src)
        .map_err(|e| DataError::io(src, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(DataError::Import(format!(
            "{} holds {} class directories, at least 2 required",
            src.display(),
            class_dirs.len()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (class_idx, dir) in class_dirs.iter().enumerate() {
        class_names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| DataError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = imgio::read_netpbm(&file)?;
            if img.channels != 3 {
                return Err(DataError::Import(format!(
                    "{} is grayscale, RGB required",
                    file.display()
                )));
            }
            if img.width != CHIP_SIDE || img.height != CHIP_SIDE {
                return Err(DataError::Import(format!(
                    "{} is {}x{}, chips must be {CHIP_SIDE}x{CHIP_SIDE}",
                    file.display(),
                    img.width,
                    img.height
                )));
            }
            images.extend_from_slice(&img.pixels);
            labels.push(class_idx as u16);
        }
    }
    if labels.is_empty() {
        return Err(DataError::Import(format!(
            "{} holds no images",
            src.display()
        )));
    }
    ChipDataset::new(images, labels, class_names, provenance.to_string())
}

//! Dataset handling: manifest loading, image preprocessing, augmentation,
//! stratified splitting, and synthetic data for tests.
//!
//! A `Dataset` either holds decoded tensors in memory (synthetic data) or
//! paths that are decoded and preprocessed on every access (full image
//! archives do not fit in memory as 64-bit tensors). Batch assembly per
//! index is deterministic regardless of worker scheduling because every
//! random stream is derived from (seed, epoch, sample id).

pub mod augment;
pub mod image;
pub mod manifest;
pub mod split;
pub mod synth;

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed label vocabulary, alphabetical; all label indices point here.
pub const CLASS_NAMES: [&str; 7] = ["AKIEC", "BCC", "BKL", "DF", "MEL", "NV", "VASC"];

enum Source<T: Scalar> {
    Memory(Vec<Tensor<T>>),
    Disk { paths: Vec<PathBuf>, size: usize },
}

pub struct Dataset<T: Scalar> {
    classes: Vec<String>,
    ids: Vec<String>,
    labels: Vec<usize>,
    source: Source<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_memory(
        classes: Vec<String>,
        ids: Vec<String>,
        labels: Vec<usize>,
        images: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != images.len() {
            return Err(Error::contract("dataset", "ids, labels, and images must align"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::contract("dataset", format!("label {} out of range", bad)));
        }
        Ok(Dataset { classes, ids, labels, source: Source::Memory(images) })
    }

    /// Dataset backed by image files; each access decodes and
    /// preprocesses to 3 x size x size.
    pub fn from_manifest(m: &manifest::Manifest, size: usize) -> Self {
        Dataset {
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            ids: m.records.iter().map(|r| r.id.clone()).collect(),
            labels: m.records.iter().map(|r| r.label).collect(),
            source: Source::Disk { paths: m.records.iter().map(|r| r.path.clone()).collect(), size },
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// The preprocessed 3 x S x S tensor for sample `i`.
    pub fn fetch(&self, i: usize) -> Result<Tensor<T>> {
        if i >= self.len() {
            return Err(Error::contract("dataset", format!("index {} out of {}", i, self.len())));
        }
        match &self.source {
            Source::Memory(images) => Ok(images[i].clone()),
            Source::Disk { paths, size } => {
                let (rgb, w, h) = image::decode_image(&paths[i])?;
                image::preprocess(&rgb, w, h, *size)
            }
        }
    }

    /// A new dataset holding the selected samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::contract("dataset", format!("subset index {} out of {}", bad, self.len())));
        }
        let ids = indices.iter().map(|&i| self.ids[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let source = match &self.source {
            Source::Memory(images) => Source::Memory(indices.iter().map(|&i| images[i].clone()).collect()),
            Source::Disk { paths, size } => {
                Source::Disk { paths: indices.iter().map(|&i| paths[i].clone()).collect(), size: *size }
            }
        };
        Ok(Dataset { classes: self.classes.clone(), ids, labels, source })
    }
}

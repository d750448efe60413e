//! Images, label masks, manifests, and synthetic data.

pub mod corrupt;
pub mod manifest;
pub mod pnm;
pub mod synth;

use std::path::PathBuf;

use rayon::prelude::*;
use thiserror::Error;

pub use manifest::{load_manifest, write_manifest, ManifestError, SampleRecord, Split};
pub use pnm::{read_pnm, write_pnm, PnmError};
pub use synth::{synth_dataset, SynthSpec};

use crate::tensor::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Pnm { path: PathBuf, source: PnmError },
    #[error("{path}: expected a {expected} file")]
    WrongKind { path: PathBuf, expected: &'static str },
    #[error("sample {id}: image is {image:?} but mask is {mask:?}")]
    SizeMismatch { id: String, image: (usize, usize), mask: (usize, usize) },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Spec(String),
}

/// Dense class-id map, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self { height, width, labels: vec![label; height * width] }
    }

    pub fn to_pnm(&self) -> pnm::PnmImage {
        pnm::PnmImage { kind: pnm::PnmKind::Gray, width: self.width, height: self.height, data: self.labels.clone() }
    }

    pub fn from_pnm(img: pnm::PnmImage) -> Option<Self> {
        (img.kind == pnm::PnmKind::Gray).then_some(Self { height: img.height, width: img.width, labels: img.data })
    }

    /// Labels widened for the loss.
    pub fn targets(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

/// One decoded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, 3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub robot_id: String,
    pub split: Split,
}

pub fn load_image(path: &std::path::Path) -> Result<Tensor<f32>, DataError> {
    let img = pnm::read(path).map_err(|source| DataError::Pnm { path: path.into(), source })?;
    if img.kind != pnm::PnmKind::Rgb {
        return Err(DataError::WrongKind { path: path.into(), expected: "P6" });
    }
    Ok(pnm::image_to_tensor(&img))
}

pub fn load_mask(path: &std::path::Path) -> Result<Mask, DataError> {
    let img = pnm::read(path).map_err(|source| DataError::Pnm { path: path.into(), source })?;
    Mask::from_pnm(img).ok_or(DataError::WrongKind { path: path.into(), expected: "P5" })
}

pub fn load_sample(r: &SampleRecord) -> Result<Sample, DataError> {
    let image = load_image(&r.image_path)?;
    let mask = load_mask(&r.mask_path)?;
    let dims = (image.shape()[2], image.shape()[3]);
    if dims != (mask.height, mask.width) {
        return Err(DataError::SizeMismatch {
            id: r.sample_id.clone(),
            image: dims,
            mask: (mask.height, mask.width),
        });
    }
    Ok(Sample { id: r.sample_id.clone(), image, mask, robot_id: r.robot_id.clone(), split: r.split })
}

/// Decodes every record, in order.
pub fn load_samples(records: &[SampleRecord]) -> Result<Vec<Sample>, DataError> {
    records.par_iter().map(load_sample).collect()
}

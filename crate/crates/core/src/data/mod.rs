//! Samples, synthetic scenes, image I/O, tiling, augmentation and flip TTA.

pub mod augment;
pub mod dataset;
pub mod netpbm;
pub mod synth;
pub mod tile;
pub mod tta;

pub use augment::{augment, AugmentOps};
pub use dataset::{Dataset, DatasetMeta};
pub use synth::{synth_generate, SynthSpec};
pub use tile::{pad_and_tile, untile, TileLayout, TileSpec};
pub use tta::tta_flip_infer;

use thiserror::Error;

use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Netpbm(#[from] netpbm::NetpbmError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

/// An RGB image `[3, H, W]` in `[0, 1]` with its label map `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Vec<u8>) -> Result<Self, DataError> {
        match image.shape() {
            &[3, h, w] if h * w == mask.len() => Ok(Sample { image, mask }),
            s => Err(DataError::Invalid(format!(
                "image {s:?} does not match a mask of {} labels",
                mask.len()
            ))),
        }
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Stacks equally sized samples into `[B, 3, H, W]` and a flat `[B, H, W]`
/// label map.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<u8>), DataError> {
    let first = samples
        .first()
        .ok_or_else(|| DataError::Invalid("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(DataError::Invalid(format!(
                "batch mixes {h}x{w} with {}x{}",
                s.height(),
                s.width()
            )));
        }
        data.extend_from_slice(s.image.data());
        mask.extend_from_slice(&s.mask);
    }
    Ok((Tensor::from_vec(&[samples.len(), 3, h, w], data)?, mask))
}

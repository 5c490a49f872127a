//! Datasets, augmentation, sampling and the synthetic domain-shift benchmark.

mod manifest;
mod sampling;
mod synth;
mod transform;

pub use manifest::{load_dataset, read_png, save_dataset, write_png, Manifest, ManifestRecord, MANIFEST_VERSION};
pub use sampling::{epoch_batches, oversample_source, PoolEntry};
pub use synth::{photometric_shift, synth_generate, ShiftParams, SynthConfig, SynthDataset};
pub use transform::{augment, gaussian_blur, resize_with_labels, warp_image, Affine, AugmentConfig, Augmented, ResizeTransform};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One grayscale image, optionally labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `[height, width]`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    /// `(width, height)` of the image as stored on disk.
    pub original_size: [usize; 2],
    /// Millimeters per original pixel along x and y.
    pub spacing_mm: [f64; 2],
    /// Pixel coordinates in the current `pixels` frame.
    pub landmarks: Option<Vec<[f64; 2]>>,
    pub domain: Domain,
    pub subdomain: Option<String>,
}

impl ImageSample {
    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    /// `(width, height)` of the current pixel buffer.
    pub fn size(&self) -> [usize; 2] {
        [self.width(), self.height()]
    }
}

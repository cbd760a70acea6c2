//! CIFAR-10 binary batch codec.
//!
//! The on-disk layout is the classic batch format: records of 3073 bytes,
//! one label byte (0..=9) followed by 3072 pixel bytes stored planar —
//! 1024 red, 1024 green, 1024 blue, each a row-major 32x32 plane.
//! [`CifarBatch`] keeps the raw bytes so that decode/encode round-trips are
//! bit-exact; [`CifarBatch::to_dataset`] produces the normalised float view
//! models consume.

use std::io::Read;
use std::path::Path;

use crate::data::{LabeledDataset, Targets};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bytes per record: one label plus a 32x32x3 image.
pub const CIFAR_RECORD_BYTES: usize = 3073;
/// Pixel bytes per record.
pub const CIFAR_PIXEL_BYTES: usize = 3072;
/// Pixels per colour plane.
pub const CIFAR_PLANE: usize = 1024;
/// Number of classes.
pub const CIFAR_CLASSES: usize = 10;

/// Per-channel normalisation mean (R, G, B) on the 0..1 pixel scale.
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
/// Per-channel normalisation standard deviation (R, G, B).
pub const CIFAR_STD: [f64; 3] = [0.2023, 0.1994, 0.2010];

/// A decoded batch: labels and raw pixel bytes, exactly as stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarBatch {
    labels: Vec<u8>,
    /// `len * 3072` bytes, planar per record.
    pixels: Vec<u8>,
}

impl CifarBatch {
    /// Decodes a batch from raw bytes, validating record structure.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::format("cifar batch", "file is empty"));
        }
        if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
            return Err(Error::format(
                "cifar batch",
                format!(
                    "length {} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record size",
                    bytes.len()
                ),
            ));
        }
        let n = bytes.len() / CIFAR_RECORD_BYTES;
        let mut labels = Vec::with_capacity(n);
        let mut pixels = Vec::with_capacity(n * CIFAR_PIXEL_BYTES);
        for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
            let label = record[0];
            if label as usize >= CIFAR_CLASSES {
                return Err(Error::format(
                    "cifar batch",
                    format!("record {i} has label {label}, outside 0..{CIFAR_CLASSES}"),
                ));
            }
            labels.push(label);
            pixels.extend_from_slice(&record[1..]);
        }
        Ok(CifarBatch { labels, pixels })
    }

    /// Re-encodes the batch; `from_bytes(b).to_bytes() == b` bit-for-bit.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.labels.len() * CIFAR_RECORD_BYTES);
        for (i, &label) in self.labels.iter().enumerate() {
            out.push(label);
            out.extend_from_slice(&self.pixels[i * CIFAR_PIXEL_BYTES..(i + 1) * CIFAR_PIXEL_BYTES]);
        }
        out
    }

    /// Number of images in the batch.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Batches are never empty post-validation.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Label of image `i`.
    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// Raw planar pixel bytes of image `i`.
    pub fn pixels(&self, i: usize) -> &[u8] {
        &self.pixels[i * CIFAR_PIXEL_BYTES..(i + 1) * CIFAR_PIXEL_BYTES]
    }

    /// Converts to a float dataset: pixels scaled to 0..1 then normalised
    /// per channel as `(p/255 - mean[c]) / std[c]`.
    pub fn to_dataset<S: Scalar>(
        &self,
        mean: &[f64; 3],
        std: &[f64; 3],
    ) -> Result<LabeledDataset<S>> {
        if let Some(c) = std.iter().position(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "channel {c} standard deviation must be finite and positive, got {}",
                std[c]
            )));
        }
        let mut features = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let raw = self.pixels(i);
            let mut x = Vec::with_capacity(CIFAR_PIXEL_BYTES);
            for (j, &p) in raw.iter().enumerate() {
                let channel = j / CIFAR_PLANE;
                let v = (p as f64 / 255.0 - mean[channel]) / std[channel];
                x.push(S::from_f64_lit(v));
            }
            features.push(x);
        }
        let labels = self.labels.iter().map(|&l| l as usize).collect();
        LabeledDataset::new(
            features,
            Targets::Labels {
                labels,
                n_classes: CIFAR_CLASSES,
            },
        )
    }
}

/// Reads a CIFAR-10 batch file.
pub fn load_cifar10(path: impl AsRef<Path>) -> Result<CifarBatch> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    CifarBatch::from_bytes(&bytes)
}

/// Writes a CIFAR-10 batch file.
pub fn save_cifar10(batch: &CifarBatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, batch.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

//! Manifests, PPM images, the synthetic task and in-memory image sets.

mod manifest;
mod ppm;
mod synthetic;

pub use manifest::{load_manifest, subsample, Manifest, Record, Split};
pub use ppm::{decode_image, decode_ppm, encode_ppm, encode_ppm_u8};
pub use synthetic::{generate_synthetic, render, render_all, Rendered, SyntheticSpec};

use rayon::prelude::*;

use crate::error::Result;
use crate::eval::BBox;
use crate::tensor::Tensor;

/// Decoded images of one split, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub boxes: Vec<Option<BBox>>,
    pub classes: usize,
}

impl ImageSet {
    pub fn load(m: &Manifest, split: Split) -> Result<Self> {
        let recs: Vec<&Record> = m.split(split).collect();
        let images = recs
            .par_iter()
            .map(|r| decode_image(&m.root.join(&r.path)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageSet {
            images,
            labels: recs.iter().map(|r| r.label).collect(),
            boxes: recs.iter().map(|r| r.bbox).collect(),
            classes: m.classes,
        })
    }

    /// Decode rendered synthetic images without touching the disk.
    pub fn from_rendered(images: &[Rendered], split: Split, size: usize, classes: usize) -> Result<Self> {
        let mine: Vec<&Rendered> = images.iter().filter(|r| r.split == split).collect();
        let tensors = mine
            .iter()
            .map(|r| decode_ppm(&encode_ppm_u8(size, size, &r.rgb), std::path::Path::new("<memory>")))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageSet {
            images: tensors,
            labels: mine.iter().map(|r| r.label).collect(),
            boxes: mine.iter().map(|r| Some(r.bbox)).collect(),
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` images (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        ImageSet {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            boxes: self.boxes[..n].to_vec(),
            classes: self.classes,
        }
    }
}

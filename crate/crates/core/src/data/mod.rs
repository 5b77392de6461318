//! Image corpora, synthetic generation, non-IID partitioning and file formats.

mod io;
mod partition;
mod synth;

pub use io::{
    load_corpus, load_ppm, load_tensor, load_tensors, read_ppm, read_tensor, save_corpus, save_ppm,
    save_tensor, save_tensors, write_ppm, write_tensor, MAGIC, VERSION,
};
pub use partition::{dirichlet_partition, dirichlet_partition_subset, train_validation_split, Partition};
pub use synth::{synth_corpus, SynthSpec};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// A set of equally shaped `[C, H, W]` images with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    images: Vec<Tensor>,
    labels: Option<Vec<usize>>,
}

impl Corpus {
    pub fn new(images: Vec<Tensor>, labels: Option<Vec<usize>>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::config("corpus has no images"))?;
        if first.shape().len() != 3 {
            return Err(Error::config(format!(
                "images must be [C, H, W], got {:?}",
                first.shape()
            )));
        }
        for (i, img) in images.iter().enumerate() {
            if img.shape() != first.shape() {
                return Err(Error::config(format!(
                    "image {i} has shape {:?}, expected {:?}",
                    img.shape(),
                    first.shape()
                )));
            }
            if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::config(format!("image {i} has pixel {v} outside [0, 1]")));
            }
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::config(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// FNV-1a over the raw bits of every pixel and label.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |word: u64| {
            for b in word.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for img in &self.images {
            img.data().iter().for_each(|v| eat(v.to_bits()));
        }
        if let Some(labels) = &self.labels {
            labels.iter().for_each(|&l| eat(l as u64));
        }
        h
    }
}

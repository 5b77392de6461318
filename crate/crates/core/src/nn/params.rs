use std::ops::Range;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// The four sub-networks of the semantic-communication model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Section {
    SemanticEncoder,
    ChannelEncoder,
    ChannelDecoder,
    SemanticDecoder,
}

impl Section {
    pub const ALL: [Section; 4] = [
        Section::SemanticEncoder,
        Section::ChannelEncoder,
        Section::ChannelDecoder,
        Section::SemanticDecoder,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Full parameter set, stored flat with one contiguous range per [`Section`].
///
/// Flat storage lets the optimizer, clipping, aggregation and checkpointing
/// treat the model as one list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
    ranges: [Range<usize>; 4],
}

impl ModelParams {
    /// Parameter lists in [`Section::ALL`] order.
    pub fn from_sections(sections: [Vec<Tensor>; 4]) -> Self {
        let mut tensors = Vec::new();
        let mut ranges: [Range<usize>; 4] = Default::default();
        for (i, list) in sections.into_iter().enumerate() {
            let start = tensors.len();
            tensors.extend(list);
            ranges[i] = start..tensors.len();
        }
        Self { tensors, ranges }
    }

    /// Rebuild with the same section layout as `self` from a flat list.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::usage(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (a, b) in self.tensors.iter().zip(&tensors) {
            a.check_same_shape(b)?;
        }
        Ok(Self {
            tensors,
            ranges: self.ranges.clone(),
        })
    }

    pub fn section(&self, s: Section) -> &[Tensor] {
        &self.tensors[self.ranges[s.index()].clone()]
    }

    pub fn section_mut(&mut self, s: Section) -> &mut [Tensor] {
        let r = self.ranges[s.index()].clone();
        &mut self.tensors[r]
    }

    pub fn section_range(&self, s: Section) -> Range<usize> {
        self.ranges[s.index()].clone()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Zero tensors with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            ranges: self.ranges.clone(),
        }
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.ranges == other.ranges
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// `self += c * other`, element-wise over every tensor.
    pub fn axpy(&mut self, c: f64, other: &ModelParams) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::usage("model parameter layouts differ"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(c, b)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

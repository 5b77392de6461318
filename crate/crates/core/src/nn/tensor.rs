use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::usage(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::usage(format!(
                "tensor shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data, new shape. Fails if the element count differs.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::usage(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::usage(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Concatenate `[C1, ..]` and `[C2, ..]` along the leading axis.
    pub fn concat_leading(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != other.shape.len() || self.shape[1..] != other.shape[1..] {
            return Err(Error::usage(format!(
                "cannot concatenate {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        let mut shape = self.shape.clone();
        shape[0] += other.shape[0];
        let mut data = Vec::with_capacity(self.numel() + other.numel());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor { shape, data })
    }

    /// Inverse of [`Tensor::concat_leading`]: split off the first `lead` slices.
    pub fn split_leading(&self, lead: usize) -> Result<(Tensor, Tensor)> {
        if lead == 0 || lead >= self.shape[0] {
            return Err(Error::usage(format!(
                "cannot split {:?} at {lead}",
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut a_shape = self.shape.clone();
        a_shape[0] = lead;
        let mut b_shape = self.shape.clone();
        b_shape[0] -= lead;
        let (a, b) = self.data.split_at(lead * inner);
        Ok((
            Tensor {
                shape: a_shape,
                data: a.to_vec(),
            },
            Tensor {
                shape: b_shape,
                data: b.to_vec(),
            },
        ))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

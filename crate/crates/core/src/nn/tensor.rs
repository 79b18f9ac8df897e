use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor of up to four dimensions, laid out as
/// (batch, channels, time, freq).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(Error::Config(format!(
                "tensors have at most 4 dimensions, got {}",
                shape.len()
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::from_vec", &[n], &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Shape without the leading batch dimension.
    pub fn sample_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("Tensor::reshape", &[n], &[self.data.len()]));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

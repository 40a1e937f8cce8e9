use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named dense tensor held in `f64`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let t = Self {
            name: name.into(),
            shape,
            values,
        };
        let expected = t.numel();
        if expected != t.values.len() {
            return Err(Error::ShapeMismatch {
                expected,
                found: t.values.len(),
            });
        }
        Ok(t)
    }

    /// A 1-D tensor.
    pub fn from_vec(name: impl Into<String>, values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            name: name.into(),
            shape: vec![n],
            values,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Rejects empty tensors and non-finite entries.
    pub fn check_quantizable(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::EmptyTensor(self.name.clone()));
        }
        if self.numel() != self.values.len() {
            return Err(Error::ShapeMismatch {
                expected: self.numel(),
                found: self.values.len(),
            });
        }
        match self.values.iter().find(|v| !v.is_finite()) {
            Some(&v) => Err(Error::NonFinite(v)),
            None => Ok(()),
        }
    }
}

//! Contiguous row-major f64 arrays.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A dense array of 64-bit floats with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NumArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expected,
            "shape {:?} expects {} elements, got {}",
            shape,
            expected,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_shape(&self, expected: &[usize], context: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                context: context.to_string(),
                expected: expected.to_vec(),
                got: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &NumArray) -> f64 {
        assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn add(&self, other: &NumArray) -> NumArray {
        assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        NumArray { shape: self.shape.clone(), data }
    }

    pub fn sub(&self, other: &NumArray) -> NumArray {
        assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        NumArray { shape: self.shape.clone(), data }
    }

    pub fn scale(&self, c: f64) -> NumArray {
        NumArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// `self + c * other`, elementwise.
    pub fn add_scaled(&self, other: &NumArray, c: f64) -> NumArray {
        assert_eq!(self.shape, other.shape);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + c * b)
            .collect();
        NumArray { shape: self.shape.clone(), data }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.len() as f64
    }
}

/// Mean of a set of equally-shaped vectors.
pub(crate) fn centroid(points: &[NumArray]) -> NumArray {
    assert!(!points.is_empty());
    let mut acc = NumArray::zeros(points[0].shape.clone());
    for p in points {
        acc = acc.add(p);
    }
    acc.scale(1.0 / points.len() as f64)
}

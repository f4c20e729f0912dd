use serde::{Deserialize, Serialize};

use super::NnError;
use crate::Scalar;

/// Dense tensor: a shape and a flat row-major buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor, rejecting a buffer whose length disagrees with the shape.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, NnError> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(NnError::ShapeMismatch {
                context: format!("Tensor::new with {} data elements", data.len()),
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Reinterprets the buffer under a new shape of identical volume.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        let want: usize = shape.iter().product();
        assert_eq!(want, self.data.len(), "reshape must preserve volume");
        self.shape = shape.to_vec();
        self
    }

    /// Converts element-wise to another scalar type through f64.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::of(v.to_f64())).collect(),
        }
    }

    /// Sum of all elements; a finite sum certifies there is no NaN and no
    /// infinity of a single sign (mixed infinities still produce NaN).
    /// Accumulates in eight independent lanes so the scan vectorizes; any
    /// grouping works since only finiteness of the total is meaningful.
    pub fn checksum(&self) -> F {
        let mut lanes = [F::zero(); 8];
        let mut chunks = self.data.chunks_exact(8);
        for chunk in &mut chunks {
            for (l, &v) in lanes.iter_mut().zip(chunk) {
                *l += v;
            }
        }
        let mut total = F::zero();
        for l in lanes {
            total += l;
        }
        for &v in chunks.remainder() {
            total += v;
        }
        total
    }
}

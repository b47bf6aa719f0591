//! Dense row-major f64 array with an optional gradient buffer.

use crate::error::{NdError, Result};

/// Dense numeric array. The value buffer always holds exactly
/// `shape.iter().product()` doubles in row-major order; `grad`, when present,
/// has the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl DiffArray {
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(NdError::Invalid(format!(
                "shape {:?} expects {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(DiffArray {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        DiffArray {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        DiffArray {
            shape,
            values: vec![1.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        DiffArray {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.values.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Scalar payload; errors unless the array holds exactly one value.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() == 1 {
            Ok(self.values[0])
        } else {
            Err(NdError::Invalid(format!(
                "item() on array of shape {:?}",
                self.shape
            )))
        }
    }

    /// Row/column counts for rank-2 arrays.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(NdError::Invalid(format!(
                "expected rank-2 array, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_len() {
        assert!(DiffArray::new(vec![1.0, 2.0], vec![2]).is_ok());
        assert!(DiffArray::new(vec![1.0, 2.0], vec![3]).is_err());
        assert!(DiffArray::new(vec![], vec![0, 3]).is_ok());
    }

    #[test]
    fn scalar_item() {
        let s = DiffArray::scalar(4.25);
        assert_eq!(s.item().unwrap(), 4.25);
        assert_eq!(s.shape(), &[1]);
        let m = DiffArray::zeros(vec![2, 2]);
        assert!(m.item().is_err());
    }

    #[test]
    fn grad_buffer_tracks_shape() {
        let mut a = DiffArray::new(vec![1.0, 2.0, 3.0], vec![3])
            .unwrap()
            .with_grad();
        assert!(a.requires_grad());
        assert!(a.grad().is_none());
        a.set_grad(vec![0.0, 0.5, 1.0]);
        assert_eq!(a.grad().unwrap(), &[0.0, 0.5, 1.0]);
    }
}

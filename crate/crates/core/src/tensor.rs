//! Dense row-major tensors with optional gradient storage.

use crate::scalar::Scalar;

/// Errors produced by tensor and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid parameter: {detail}")]
    InvalidParam { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::InvalidParam {
            op,
            detail: detail.into(),
        }
    }
}

/// An n-dimensional value array, row-major, with an optional gradient of the
/// same length. The shape is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    /// Build a tensor from a shape and row-major data. Every dimension must
    /// be positive and the data length must equal the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::shape(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![F::zero(); numel]).expect("zeros: shape must be positive")
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("filled: shape must be positive")
    }

    pub fn scalar(value: F) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    /// Mark the tensor as a gradient target (builder style).
    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Mutable access to the values. The shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<F>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() needs a single-element tensor");
        self.data[0]
    }

    /// Reinterpret as a matrix: all leading dimensions fold into rows, the
    /// last dimension is the column count.
    pub(crate) fn as_rows(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensor has at least one dim");
        (self.data.len() / cols, cols)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Convert element type, rounding through f64.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| G::from_f64(Scalar::to_f64(v)))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn rejects_zero_dimension() {
        let err = Tensor::<f64>::new(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn grad_roundtrip() {
        let mut t = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap().requires_grad();
        assert!(t.grad().is_none());
        t.set_grad(vec![0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[0.5, 0.5]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }
}

use crate::error::{Result, TensorError};

/// Dense row-major tensor of `f64` values.
///
/// `grad` is only populated for tensors that participate in training (model
/// parameters); intermediate values recorded in a [`crate::Graph`] keep their
/// gradients inside the backward pass instead.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} elements but {} were given", data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Same elements under a new shape; the element count must not change.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::mismatch("reshape", &self.shape, &shape));
        }
        Ok(Tensor { shape, data: self.data.clone(), requires_grad: self.requires_grad, grad: None })
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Clears the accumulated gradient. Gradients are never reset implicitly.
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::shape(
                "accumulate_grad",
                format!("gradient of length {} for tensor {:?}", g.len(), self.shape),
            ));
        }
        match self.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

use ndarray::Array2;

use super::Scalar;
use crate::error::{Error, Result};

/// A trainable (or frozen) array together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub value: Array2<S>,
    pub requires_grad: bool,
    pub grad: Option<Array2<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(value: Array2<S>, requires_grad: bool) -> Self {
        Tensor {
            value,
            requires_grad,
            grad: None,
        }
    }

    pub fn trainable(value: Array2<S>) -> Self {
        Self::new(value, true)
    }

    pub fn frozen(value: Array2<S>) -> Self {
        Self::new(value, false)
    }

    pub fn shape(&self) -> [usize; 2] {
        let (r, c) = self.value.dim();
        [r, c]
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient.
    pub fn accumulate_grad(&mut self, g: &Array2<S>) -> Result<()> {
        if g.dim() != self.value.dim() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("grad {:?} vs value {:?}", g.dim(), self.value.dim()),
            ));
        }
        match &mut self.grad {
            Some(acc) => *acc += g,
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
    }
}

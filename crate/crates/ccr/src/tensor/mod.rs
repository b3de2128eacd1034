//! Minimal reverse-mode autodiff over dense `f64` tensors.
//!
//! The design is a classic arena tape: a [`Graph`] owns every value
//! buffer produced during a forward pass, operations hand back [`Var`]
//! handles (indices into the arena), and [`Graph::backward`] replays the
//! recorded operations in reverse, accumulating gradients per node.
//! Buffers are never mutated once another operation has consumed them,
//! so a handle always denotes the value it had at record time.
//!
//! Shapes are row-major with explicit extents; image batches use
//! `[batch, channels, height, width]`. Everything is `f64`: at desk
//! scale the bandwidth cost is irrelevant and the gradient checks get a
//! comfortable numerical floor.

mod adam;
mod gradcheck;
mod graph;
mod kernels;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{gradcheck, gradcheck_multi};
pub use graph::{DistanceKind, DownsampleMode, Graph, UpsampleMode, Var};

use crate::error::{Error, Result};

/// A dense tensor that lives outside any graph: parameters, inputs,
/// loaded data. Graphs copy tensor values in at `leaf` time, so editing
/// a `Tensor` afterwards never invalidates a recorded pass.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Whether graphs should track gradients for leaves made from this.
    pub requires_grad: bool,
    /// Accumulated gradient, if any; same length as `data`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            ));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {:?}", shape)));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {:?}", shape);
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(v);
        t
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
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
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Resets the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.fill(0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Adds `g` into the gradient buffer elementwise.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, src) in buf.iter_mut().zip(g) {
            *dst += *src;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 3.0, 4.0][..]));
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0, 0.0, 0.0][..]));
    }
}

//! Plain tensor storage for parameters at rest (between training steps).
//!
//! Computation happens on the [`Tape`](super::Tape); a `Tensor` is what the
//! optimizer updates and the checkpoint serializes. `grad` is present iff
//! `requires_grad`, and is filled in by the training step after backward.

use super::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![F::ZERO; n])
    }

    /// Trainable tensor: requires_grad with a zeroed gradient buffer.
    pub fn param(shape: Vec<usize>, data: Vec<F>) -> Self {
        let mut t = Tensor::from_vec(shape, data);
        t.requires_grad = true;
        t.grad = Some(vec![F::ZERO; t.data.len()]);
        t
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = F::ZERO);
        }
    }

    pub fn accumulate_grad(&mut self, incoming: &[F]) {
        let g = self
            .grad
            .as_mut()
            .expect("accumulate_grad on a tensor without requires_grad");
        assert_eq!(g.len(), incoming.len(), "gradient length mismatch");
        for (dst, src) in g.iter_mut().zip(incoming) {
            *dst += *src;
        }
    }
}

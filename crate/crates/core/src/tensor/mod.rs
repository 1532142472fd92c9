//! Dense tensors and a reverse-mode tape.
//!
//! [`Tensor`] is plain owned data (shape + values + optional grad); it is the
//! persistent side of the world: parameters, inputs, constants. [`Tape`]
//! records a dynamic graph of operations over [`Var`] handles and replays it
//! backwards to produce gradients. There is no compile step; every training
//! step builds a fresh tape.

mod kernels;
mod ops;
mod tape;

pub use ops::{concat_cols, concat_rows, softmax};
pub use tape::{BatchStats, Gradients, Tape, Var};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::rng::Prng;
use crate::scalar::Real;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn shape_string(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| format!("{d}")).collect();
    format!("[{}]", parts.join("x"))
}

/// Owned dense array with an identity used to key gradients.
#[derive(Debug)]
pub struct Tensor<F: Real> {
    id: u64,
    shape: Vec<usize>,
    values: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {}",
            shape_string(&shape)
        );
        assert_eq!(
            values.len(),
            numel(&shape),
            "value count {} does not match shape {}",
            values.len(),
            shape_string(&shape)
        );
        Tensor {
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            values,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor::new(shape, vec![F::zero(); n])
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let n = numel(&shape);
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: F) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Self {
        Tensor::new(shape, values.iter().map(|&v| F::from_f64(v)).collect())
    }

    /// Truncated-normal init (std Gaussian clipped at two sigmas).
    pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut Prng) -> Self {
        let n = numel(&shape);
        let values = (0..n).map(|_| rng.trunc_normal(std)).collect();
        Tensor::new(shape, values)
    }

    pub fn uniform(shape: Vec<usize>, lo: F, hi: F, rng: &mut Prng) -> Self {
        let n = numel(&shape);
        let values = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::new(shape, values)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<F>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.values.len(), "grad shape must match values");
        }
        self.grad = grad;
    }

    /// Pull this tensor's gradient out of a backward-pass result.
    pub fn install_grad(&mut self, grads: &Gradients<F>) {
        self.grad = grads.of_tensor(self).map(|g| g.to_vec());
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Convert element precision, keeping the shape. The id is fresh.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor::new(
            self.shape.clone(),
            self.values.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        )
    }
}

impl<F: Real> Clone for Tensor<F> {
    /// Clones get a fresh id: two tensors never alias in a gradient map.
    fn clone(&self) -> Self {
        Tensor {
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.shape.clone(),
            values: self.values.clone(),
            grad: self.grad.clone(),
        }
    }
}

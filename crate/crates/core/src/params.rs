//! Parameter visiting: every persistent tensor in the model is reachable by
//! a dot-path, which is what checkpoints, the optimizer and gradient tests
//! key on.

use alloc::string::String;

use crate::scalar::Real;
use crate::tensor::Tensor;

/// Trainable parameters receive gradients; state tensors (batch-norm running
/// statistics) are persisted but never touched by the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    State,
}

pub trait ParamVisit<F: Real> {
    fn visit_params<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a Tensor<F>, ParamKind),
    );

    fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &mut Tensor<F>, ParamKind),
    );
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        alloc::format!("{prefix}.{name}")
    }
}

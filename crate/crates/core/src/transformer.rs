//! Pre-norm transformer encoder block shared by the backbone, the global
//! refinement stage and the part encoder.

use alloc::vec::Vec;

use crate::params::{join, ParamKind, ParamVisit};
use crate::rng::Prng;
use crate::scalar::Real;
use crate::tensor::{concat_cols, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear<F: Real> {
    /// `[in, out]`
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

impl<F: Real> Linear<F> {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Prng) -> Self {
        Linear {
            weight: Tensor::trunc_normal(alloc::vec![in_dim, out_dim], INIT_STD, rng),
            bias: Some(Tensor::zeros(alloc::vec![out_dim])),
        }
    }

    /// The key projection goes without a bias: a constant added to every
    /// key shifts each score row uniformly, which softmax cancels exactly,
    /// so such a bias could never train.
    pub fn init_no_bias(in_dim: usize, out_dim: usize, rng: &mut Prng) -> Self {
        Linear {
            weight: Tensor::trunc_normal(alloc::vec![in_dim, out_dim], INIT_STD, rng),
            bias: None,
        }
    }

    pub fn forward<'t>(&self, x: Var<'t, F>) -> Var<'t, F> {
        let tape = x.tape();
        let out = x.matmul(tape.param(&self.weight));
        match &self.bias {
            Some(b) => out.add_row(tape.param(b)),
            None => out,
        }
    }
}

impl<F: Real> ParamVisit<F> for Linear<F> {
    fn visit_params<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &'a Tensor<F>, ParamKind),
    ) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }

    fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &mut Tensor<F>, ParamKind),
    ) {
        f(join(prefix, "weight"), &mut self.weight, ParamKind::Trainable);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<F: Real> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub eps: F,
}

impl<F: Real> LayerNorm<F> {
    pub fn init(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(alloc::vec![dim], F::one()),
            beta: Tensor::zeros(alloc::vec![dim]),
            eps: F::from_f64(1e-6),
        }
    }

    pub fn forward<'t>(&self, x: Var<'t, F>) -> Var<'t, F> {
        let tape = x.tape();
        x.layer_norm(tape.param(&self.gamma), tape.param(&self.beta), self.eps)
    }
}

impl<F: Real> ParamVisit<F> for LayerNorm<F> {
    fn visit_params<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &'a Tensor<F>, ParamKind),
    ) {
        f(join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(join(prefix, "beta"), &self.beta, ParamKind::Trainable);
    }

    fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &mut Tensor<F>, ParamKind),
    ) {
        f(join(prefix, "gamma"), &mut self.gamma, ParamKind::Trainable);
        f(join(prefix, "beta"), &mut self.beta, ParamKind::Trainable);
    }
}

/// Pre-norm block: `x + proj(mhsa(ln1 x))`, then `x + fc2(gelu(fc1(ln2 x)))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock<F: Real> {
    pub dim: usize,
    pub heads: usize,
    pub ln1: LayerNorm<F>,
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub proj: Linear<F>,
    pub ln2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Real> EncoderBlock<F> {
    pub fn init(dim: usize, heads: usize, rng: &mut Prng) -> Self {
        assert!(dim % heads == 0, "dim must be divisible by head count");
        EncoderBlock {
            dim,
            heads,
            ln1: LayerNorm::init(dim),
            q: Linear::init(dim, dim, rng),
            k: Linear::init_no_bias(dim, dim, rng),
            v: Linear::init(dim, dim, rng),
            proj: Linear::init(dim, dim, rng),
            ln2: LayerNorm::init(dim),
            fc1: Linear::init(dim, 4 * dim, rng),
            fc2: Linear::init(4 * dim, dim, rng),
        }
    }

    /// `x: [N, dim]` over the token axis. `dropout` is applied after the
    /// attention projection and the MLP output when a rate and rng are given.
    pub fn forward<'t>(
        &self,
        x: Var<'t, F>,
        mut dropout: Option<(&mut Prng, f64)>,
    ) -> Var<'t, F> {
        let shape = x.shape();
        assert_eq!(shape.len(), 2);
        assert_eq!(shape[1], self.dim, "encoder width mismatch");
        let dh = self.dim / self.heads;
        let scale = F::from_f64(1.0 / crate::scalar::f64math::sqrt(dh as f64));

        let normed = self.ln1.forward(x);
        let q = self.q.forward(normed);
        let k = self.k.forward(normed);
        let v = self.v.forward(normed);
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh);
            let kh = k.slice_cols(h * dh, dh);
            let vh = v.slice_cols(h * dh, dh);
            let attn = qh.matmul_nt(kh).scale(scale).softmax_rows();
            head_outputs.push(attn.matmul(vh));
        }
        let merged = concat_cols(x.tape(), &head_outputs);
        let mut attn_out = self.proj.forward(merged);
        if let Some((rng, p)) = dropout.as_mut() {
            attn_out = apply_dropout(attn_out, rng, *p);
        }
        let x = x.add(attn_out);

        let normed = self.ln2.forward(x);
        let mut mlp = self.fc2.forward(self.fc1.forward(normed).gelu());
        if let Some((rng, p)) = dropout.as_mut() {
            mlp = apply_dropout(mlp, rng, *p);
        }
        x.add(mlp)
    }
}

/// Inverted-scaling dropout via a constant mask; a rate of zero draws
/// nothing from the rng.
pub fn apply_dropout<'t, F: Real>(x: Var<'t, F>, rng: &mut Prng, p: f64) -> Var<'t, F> {
    if p <= 0.0 {
        return x;
    }
    assert!(p < 1.0, "dropout rate must be below 1");
    let n = x.numel();
    let keep = F::from_f64(1.0 / (1.0 - p));
    let mask: Vec<F> = (0..n)
        .map(|_| if rng.coin(p) { F::zero() } else { keep })
        .collect();
    x.mul_values(&mask)
}

impl<F: Real> ParamVisit<F> for EncoderBlock<F> {
    fn visit_params<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &'a Tensor<F>, ParamKind),
    ) {
        self.ln1.visit_params(&join(prefix, "ln1"), f);
        self.q.visit_params(&join(prefix, "q"), f);
        self.k.visit_params(&join(prefix, "k"), f);
        self.v.visit_params(&join(prefix, "v"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
        self.ln2.visit_params(&join(prefix, "ln2"), f);
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &mut Tensor<F>, ParamKind),
    ) {
        self.ln1.visit_params_mut(&join(prefix, "ln1"), f);
        self.q.visit_params_mut(&join(prefix, "q"), f);
        self.k.visit_params_mut(&join(prefix, "k"), f);
        self.v.visit_params_mut(&join(prefix, "v"), f);
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
        self.ln2.visit_params_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn zero_residual_branches(block: &mut EncoderBlock<f64>) {
        for v in block.proj.weight.values_mut() {
            *v = 0.0;
        }
        for v in block.proj.bias.as_mut().unwrap().values_mut() {
            *v = 0.0;
        }
        for v in block.fc2.weight.values_mut() {
            *v = 0.0;
        }
        for v in block.fc2.bias.as_mut().unwrap().values_mut() {
            *v = 0.0;
        }
    }

    #[test]
    fn zeroed_residual_branches_give_identity() {
        let mut rng = Prng::seed_from_u64(1);
        let mut block = EncoderBlock::<f64>::init(8, 2, &mut rng);
        zero_residual_branches(&mut block);
        let tape = Tape::new();
        let x = Tensor::uniform(alloc::vec![5, 8], -1.0, 1.0, &mut rng);
        let out = block.forward(tape.constant_of(&x), None);
        assert_eq!(out.value().as_ref(), x.values());
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let mut rng = Prng::seed_from_u64(2);
        let block = EncoderBlock::<f64>::init(8, 4, &mut rng);
        let x = Tensor::uniform(alloc::vec![6, 8], -1.0, 1.0, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];

        let tape = Tape::new();
        let direct = block.forward(tape.constant_of(&x).gather_rows(&perm), None);
        let swapped = block.forward(tape.constant_of(&x), None).gather_rows(&perm);
        let (a, b) = (direct.value(), swapped.value());
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_zero_is_identity_and_draws_nothing() {
        let mut rng = Prng::seed_from_u64(3);
        let tape = Tape::<f64>::new();
        let x = Tensor::uniform(alloc::vec![4, 4], -1.0, 1.0, &mut rng);
        let before = rng.state();
        let out = apply_dropout(tape.constant_of(&x), &mut rng, 0.0);
        assert_eq!(rng.state(), before);
        assert_eq!(out.value().as_ref(), x.values());
    }
}

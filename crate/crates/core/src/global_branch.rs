//! Clip-level identity pathway: one refinement block with cross-frame
//! attention, a 2D+1D convolutional temporal attention scorer, weighted
//! [CLS] aggregation, and the prediction head.

use crate::params::{join, ParamKind, ParamVisit};
use crate::rng::Prng;
use crate::scalar::Real;
use crate::tensor::{BatchStats, Tensor, Var};
use crate::transformer::{EncoderBlock, INIT_STD};

/// 2D conv over the `[T, D]` [CLS] map followed by a 1D conv over time.
/// The 1D stage is bias-free: a score bias would shift every frame equally
/// and vanish in the softmax.
#[derive(Debug, Clone)]
pub struct TemporalAttention<F: Real> {
    pub c_mid: usize,
    pub conv2_weight: Tensor<F>,
    pub conv2_bias: Tensor<F>,
    pub conv1_weight: Tensor<F>,
}

impl<F: Real> TemporalAttention<F> {
    pub fn init(c_mid: usize, rng: &mut Prng) -> Self {
        TemporalAttention {
            c_mid,
            conv2_weight: Tensor::trunc_normal(alloc::vec![c_mid, 1, 3, 3], INIT_STD, rng),
            conv2_bias: Tensor::zeros(alloc::vec![c_mid]),
            conv1_weight: Tensor::trunc_normal(alloc::vec![1, c_mid, 3], INIT_STD, rng),
        }
    }

    /// `g_cls: [T, D]` -> `(a_raw: [T], alpha: [T])` with alpha on the
    /// probability simplex.
    pub fn forward<'t>(&self, g_cls: Var<'t, F>) -> (Var<'t, F>, Var<'t, F>) {
        let tape = g_cls.tape();
        let shape = g_cls.shape();
        assert_eq!(shape.len(), 2, "temporal attention expects [T, D]");
        let (t, d) = (shape[0], shape[1]);
        let x = g_cls.reshape(&[1, t, d]);
        let feat = x
            .conv2d_same(tape.param(&self.conv2_weight), tape.param(&self.conv2_bias))
            .gelu()
            .mean_last_axis(); // [c_mid, T]
        let zero_bias = tape.constant(alloc::vec![1], alloc::vec![F::zero()]);
        let a_raw = feat
            .conv1d_same(tape.param(&self.conv1_weight), zero_bias)
            .reshape(&[t]);
        let alpha = a_raw.softmax_rows();
        (a_raw, alpha)
    }
}

impl<F: Real> ParamVisit<F> for TemporalAttention<F> {
    fn visit_params<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &'a Tensor<F>, ParamKind),
    ) {
        f(join(prefix, "conv2.weight"), &self.conv2_weight, ParamKind::Trainable);
        f(join(prefix, "conv2.bias"), &self.conv2_bias, ParamKind::Trainable);
        f(join(prefix, "conv1.weight"), &self.conv1_weight, ParamKind::Trainable);
    }

    fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &mut Tensor<F>, ParamKind),
    ) {
        f(join(prefix, "conv2.weight"), &mut self.conv2_weight, ParamKind::Trainable);
        f(join(prefix, "conv2.bias"), &mut self.conv2_bias, ParamKind::Trainable);
        f(join(prefix, "conv1.weight"), &mut self.conv1_weight, ParamKind::Trainable);
    }
}

/// Batch normalization over features with tracked running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm1d<F: Real> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub eps: F,
    pub momentum: f64,
}

impl<F: Real> BatchNorm1d<F> {
    pub fn init(dim: usize) -> Self {
        BatchNorm1d {
            gamma: Tensor::full(alloc::vec![dim], F::one()),
            beta: Tensor::zeros(alloc::vec![dim]),
            running_mean: Tensor::zeros(alloc::vec![dim]),
            running_var: Tensor::full(alloc::vec![dim], F::one()),
            eps: F::from_f64(1e-5),
            momentum: 0.1,
        }
    }

    pub fn forward<'t>(&self, x: Var<'t, F>, train: bool) -> (Var<'t, F>, Option<BatchStats<F>>) {
        let tape = x.tape();
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        if train {
            let (y, stats) = x.batch_norm_train(gamma, beta, self.eps);
            (y, Some(stats))
        } else {
            (
                x.batch_norm_eval(
                    gamma,
                    beta,
                    self.running_mean.values(),
                    self.running_var.values(),
                    self.eps,
                ),
                None,
            )
        }
    }

    /// Fold batch statistics into the running estimates (unbiased variance,
    /// the usual momentum update). Called only after a successful step.
    pub fn update_running(&mut self, stats: &BatchStats<F>) {
        let m = F::from_f64(self.momentum);
        let keep = F::one() - m;
        let unbias = if stats.batch > 1 {
            F::from_f64(stats.batch as f64 / (stats.batch as f64 - 1.0))
        } else {
            F::one()
        };
        for (r, &b) in self.running_mean.values_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.values_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * (b * unbias);
        }
    }
}

impl<F: Real> ParamVisit<F> for BatchNorm1d<F> {
    fn visit_params<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &'a Tensor<F>, ParamKind),
    ) {
        f(join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(join(prefix, "beta"), &self.beta, ParamKind::Trainable);
        f(join(prefix, "running_mean"), &self.running_mean, ParamKind::State);
        f(join(prefix, "running_var"), &self.running_var, ParamKind::State);
    }

    fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &mut Tensor<F>, ParamKind),
    ) {
        f(join(prefix, "gamma"), &mut self.gamma, ParamKind::Trainable);
        f(join(prefix, "beta"), &mut self.beta, ParamKind::Trainable);
        f(join(prefix, "running_mean"), &mut self.running_mean, ParamKind::State);
        f(join(prefix, "running_var"), &mut self.running_var, ParamKind::State);
    }
}

/// BNNeck-style head: metric losses consume the pre-norm feature, the
/// bias-free classifier consumes the post-norm feature.
#[derive(Debug, Clone)]
pub struct PredictionHead<F: Real> {
    pub bn: BatchNorm1d<F>,
    /// `[dim, classes]`, bias-free.
    pub classifier: Tensor<F>,
}

pub struct HeadOutput<'t, F: Real> {
    /// Post-norm feature `[B, dim]` (the embedding used at inference).
    pub feature: Var<'t, F>,
    /// `[B, classes]`
    pub logits: Var<'t, F>,
    pub stats: Option<BatchStats<F>>,
}

impl<F: Real> PredictionHead<F> {
    pub fn init(dim: usize, classes: usize, rng: &mut Prng) -> Self {
        PredictionHead {
            bn: BatchNorm1d::init(dim),
            classifier: Tensor::trunc_normal(alloc::vec![dim, classes], INIT_STD, rng),
        }
    }

    pub fn forward<'t>(&self, f: Var<'t, F>, train: bool) -> HeadOutput<'t, F> {
        let tape = f.tape();
        let (feature, stats) = self.bn.forward(f, train);
        let logits = feature.matmul(tape.param(&self.classifier));
        HeadOutput {
            feature,
            logits,
            stats,
        }
    }
}

impl<F: Real> ParamVisit<F> for PredictionHead<F> {
    fn visit_params<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &'a Tensor<F>, ParamKind),
    ) {
        self.bn.visit_params(&join(prefix, "bn"), f);
        f(join(prefix, "classifier"), &self.classifier, ParamKind::Trainable);
    }

    fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &mut Tensor<F>, ParamKind),
    ) {
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
        f(join(prefix, "classifier"), &mut self.classifier, ParamKind::Trainable);
    }
}

/// Global branch: refinement over all tokens jointly, temporal attention,
/// weighted aggregation, prediction head.
#[derive(Clone)]
pub struct GlobalBranch<F: Real> {
    pub refine: EncoderBlock<F>,
    pub attention: TemporalAttention<F>,
    pub head: PredictionHead<F>,
}

impl<F: Real> GlobalBranch<F> {
    pub fn init(dim: usize, heads: usize, classes: usize, c_mid: usize, rng: &mut Prng) -> Self {
        GlobalBranch {
            refine: EncoderBlock::init(dim, heads, rng),
            attention: TemporalAttention::init(c_mid, rng),
            head: PredictionHead::init(dim, classes, rng),
        }
    }

    /// One encoder block across all `T*(n+1)` tokens (cross-frame mixing).
    pub fn refine_tokens<'t>(
        &self,
        tokens: Var<'t, F>,
        dropout: Option<(&mut Prng, f64)>,
    ) -> Var<'t, F> {
        self.refine.forward(tokens, dropout)
    }
}

impl<F: Real> ParamVisit<F> for GlobalBranch<F> {
    fn visit_params<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &'a Tensor<F>, ParamKind),
    ) {
        self.refine.visit_params(&join(prefix, "refine"), f);
        self.attention.visit_params(&join(prefix, "attn"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &mut Tensor<F>, ParamKind),
    ) {
        self.refine.visit_params_mut(&join(prefix, "refine"), f);
        self.attention.visit_params_mut(&join(prefix, "attn"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

/// Weighted sum of per-frame [CLS] tokens: `alpha: [T]`, `g_cls: [T, D]`.
pub fn aggregate<'t, F: Real>(g_cls: Var<'t, F>, alpha: Var<'t, F>) -> Var<'t, F> {
    let t = g_cls.shape()[0];
    assert_eq!(alpha.numel(), t, "one weight per frame");
    alpha.reshape(&[1, t]).matmul(g_cls)
}

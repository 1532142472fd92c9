//! Differentiable primitives. Each op pushes one node whose backward closure
//! scatters the incoming cotangent into its parents.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc};
use super::tape::{BatchStats, Tape, Var};
use super::{numel, shape_string};
use crate::error::CoreError;
use crate::scalar::Real;
use crate::Result;

fn assert_same_tape<F: Real>(a: &Var<'_, F>, b: &Var<'_, F>) {
    debug_assert!(
        core::ptr::eq(a.tape, b.tape),
        "vars belong to different tapes"
    );
}

/// Numerically stable softmax of one row into `out`.
fn softmax_row<F: Real>(row: &[F], out: &mut [F]) {
    let mut max = row[0];
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Standalone softmax with the input-validation contract: rejects non-finite
/// entries, returns a probability vector.
pub fn softmax<F: Real>(x: &[F]) -> Result<Vec<F>> {
    if x.is_empty() {
        return Err(CoreError::invalid("softmax of an empty vector"));
    }
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(CoreError::non_finite(format!(
            "softmax input at index {pos}: {}",
            x[pos]
        )));
    }
    let mut out = vec![F::zero(); x.len()];
    softmax_row(x, &mut out);
    Ok(out)
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().expect("rank >= 1");
    (numel(shape) / last, last)
}

impl<'t, F: Real> Var<'t, F> {
    // ----- elementwise -----

    pub fn add(self, rhs: Var<'t, F>) -> Var<'t, F> {
        assert_same_tape(&self, &rhs);
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let value: Vec<F> = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        let (ai, bi, n) = (self.idx, rhs.idx, a.len());
        self.tape.push(
            self.shape(),
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                for (d, &gv) in store.slot(ai, n).iter_mut().zip(g) {
                    *d = *d + gv;
                }
                for (d, &gv) in store.slot(bi, n).iter_mut().zip(g) {
                    *d = *d + gv;
                }
            })),
        )
    }

    pub fn sub(self, rhs: Var<'t, F>) -> Var<'t, F> {
        assert_same_tape(&self, &rhs);
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let value: Vec<F> = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
        let (ai, bi, n) = (self.idx, rhs.idx, a.len());
        self.tape.push(
            self.shape(),
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                for (d, &gv) in store.slot(ai, n).iter_mut().zip(g) {
                    *d = *d + gv;
                }
                for (d, &gv) in store.slot(bi, n).iter_mut().zip(g) {
                    *d = *d - gv;
                }
            })),
        )
    }

    pub fn mul(self, rhs: Var<'t, F>) -> Var<'t, F> {
        assert_same_tape(&self, &rhs);
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let value: Vec<F> = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        let (ai, bi, n) = (self.idx, rhs.idx, a.len());
        self.tape.push(
            self.shape(),
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                {
                    let da = store.slot(ai, n);
                    for i in 0..n {
                        da[i] = da[i] + g[i] * b[i];
                    }
                }
                let db = store.slot(bi, n);
                for i in 0..n {
                    db[i] = db[i] + g[i] * a[i];
                }
            })),
        )
    }

    pub fn scale(self, c: F) -> Var<'t, F> {
        let a = self.value();
        let value: Vec<F> = a.iter().map(|&x| x * c).collect();
        let (ai, n) = (self.idx, a.len());
        self.tape.push(
            self.shape(),
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let da = store.slot(ai, n);
                for i in 0..n {
                    da[i] = da[i] + g[i] * c;
                }
            })),
        )
    }

    /// Elementwise product with a constant array (dropout masks, smoothed
    /// targets, anything that needs no gradient of its own).
    pub fn mul_values(self, weights: &[F]) -> Var<'t, F> {
        let a = self.value();
        assert_eq!(a.len(), weights.len(), "mul_values: length mismatch");
        let value: Vec<F> = a.iter().zip(weights).map(|(&x, &w)| x * w).collect();
        let w = weights.to_vec();
        let (ai, n) = (self.idx, a.len());
        self.tape.push(
            self.shape(),
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let da = store.slot(ai, n);
                for i in 0..n {
                    da[i] = da[i] + g[i] * w[i];
                }
            })),
        )
    }

    /// Rows of a 2-d tensor each scaled by a constant weight.
    pub fn scale_rows(self, weights: &[F]) -> Var<'t, F> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "scale_rows: expected 2-d");
        let (m, n) = (shape[0], shape[1]);
        assert_eq!(weights.len(), m, "scale_rows: one weight per row");
        let a = self.value();
        let mut value = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                value[i * n + j] = a[i * n + j] * weights[i];
            }
        }
        let w = weights.to_vec();
        let ai = self.idx;
        self.tape.push(
            shape,
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let da = store.slot(ai, m * n);
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = da[i * n + j] + g[i * n + j] * w[i];
                    }
                }
            })),
        )
    }

    /// `[m,n] + [n]` broadcast over rows (bias add).
    pub fn add_row(self, bias: Var<'t, F>) -> Var<'t, F> {
        assert_same_tape(&self, &bias);
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "add_row: expected 2-d");
        let (m, n) = (shape[0], shape[1]);
        assert_eq!(bias.numel(), n, "add_row: bias width mismatch");
        let (a, b) = (self.value(), bias.value());
        let mut value = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                value[i * n + j] = a[i * n + j] + b[j];
            }
        }
        let (ai, bi) = (self.idx, bias.idx);
        self.tape.push(
            shape,
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                for (d, &gv) in store.slot(ai, m * n).iter_mut().zip(g) {
                    *d = *d + gv;
                }
                let db = store.slot(bi, n);
                for i in 0..m {
                    for j in 0..n {
                        db[j] = db[j] + g[i * n + j];
                    }
                }
            })),
        )
    }

    pub fn relu(self) -> Var<'t, F> {
        let a = self.value();
        let value: Vec<F> = a.iter().map(|&x| x.max(F::zero())).collect();
        let (ai, n) = (self.idx, a.len());
        self.tape.push(
            self.shape(),
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let da = store.slot(ai, n);
                for i in 0..n {
                    if a[i] > F::zero() {
                        da[i] = da[i] + g[i];
                    }
                }
            })),
        )
    }

    /// Exact (erf-based) GELU. The forward CDF is cached for the backward.
    pub fn gelu(self) -> Var<'t, F> {
        let a = self.value();
        let half = F::half();
        let inv_sqrt2 = F::from_f64(core::f64::consts::FRAC_1_SQRT_2);
        let mut cdf = Vec::with_capacity(a.len());
        let value: Vec<F> = a
            .iter()
            .map(|&x| {
                let c = half * (F::one() + (x * inv_sqrt2).erf());
                cdf.push(c);
                x * c
            })
            .collect();
        let (ai, n) = (self.idx, a.len());
        self.tape.push(
            self.shape(),
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let inv_sqrt_tau =
                    F::from_f64(1.0 / crate::scalar::f64math::sqrt(core::f64::consts::TAU));
                let da = store.slot(ai, n);
                for i in 0..n {
                    let x = a[i];
                    let phi_pdf = inv_sqrt_tau * (-(x * x) * half).exp();
                    da[i] = da[i] + g[i] * (cdf[i] + x * phi_pdf);
                }
            })),
        )
    }

    pub fn sqrt_elem(self) -> Var<'t, F> {
        let a = self.value();
        let value: Vec<F> = a.iter().map(|&x| x.sqrt()).collect();
        let y = value.clone();
        let (ai, n) = (self.idx, a.len());
        self.tape.push(
            self.shape(),
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let da = store.slot(ai, n);
                for i in 0..n {
                    da[i] = da[i] + g[i] * F::half() / y[i];
                }
            })),
        )
    }

    /// max(x, c); the clamp kills the gradient where it is active.
    pub fn clamp_min(self, c: F) -> Var<'t, F> {
        let a = self.value();
        let value: Vec<F> = a.iter().map(|&x| x.max(c)).collect();
        let (ai, n) = (self.idx, a.len());
        self.tape.push(
            self.shape(),
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let da = store.slot(ai, n);
                for i in 0..n {
                    if a[i] > c {
                        da[i] = da[i] + g[i];
                    }
                }
            })),
        )
    }

    // ----- matmul family -----

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(self, rhs: Var<'t, F>) -> Var<'t, F> {
        assert_same_tape(&self, &rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: {} x {}",
            shape_string(&sa),
            shape_string(&sb)
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.value(), rhs.value());
        let mut value = vec![F::zero(); m * n];
        matmul_nn_acc(&a, &b, m, k, n, &mut value);
        let (ai, bi) = (self.idx, rhs.idx);
        self.tape.push(
            vec![m, n],
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                matmul_nt_acc(g, &b, m, n, k, store.slot(ai, m * k));
                matmul_tn_acc(&a, g, m, k, n, store.slot(bi, k * n));
            })),
        )
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(self, rhs: Var<'t, F>) -> Var<'t, F> {
        assert_same_tape(&self, &rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1],
            "matmul_nt: {} x {}",
            shape_string(&sa),
            shape_string(&sb)
        );
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let (a, b) = (self.value(), rhs.value());
        let mut value = vec![F::zero(); m * n];
        matmul_nt_acc(&a, &b, m, k, n, &mut value);
        let (ai, bi) = (self.idx, rhs.idx);
        self.tape.push(
            vec![m, n],
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                matmul_nn_acc(g, &b, m, n, k, store.slot(ai, m * k));
                matmul_tn_acc(g, &a, m, n, k, store.slot(bi, n * k));
            })),
        )
    }

    // ----- shape -----

    pub fn reshape(self, new_shape: &[usize]) -> Var<'t, F> {
        let a = self.value();
        assert_eq!(
            numel(new_shape),
            a.len(),
            "reshape: {} -> {}",
            shape_string(&self.shape()),
            shape_string(new_shape)
        );
        let (ai, n) = (self.idx, a.len());
        self.tape.push(
            new_shape.to_vec(),
            a.as_ref().clone(),
            Some(alloc::boxed::Box::new(move |g, store| {
                for (d, &gv) in store.slot(ai, n).iter_mut().zip(g) {
                    *d = *d + gv;
                }
            })),
        )
    }

    pub fn transpose(self) -> Var<'t, F> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "transpose: expected 2-d");
        self.permute(&[1, 0])
    }

    /// General axis permutation.
    pub fn permute(self, perm: &[usize]) -> Var<'t, F> {
        let shape = self.shape();
        assert_eq!(perm.len(), shape.len(), "permute: rank mismatch");
        let a = self.value();
        let (value, new_shape) = permute_values(&a, &shape, perm);
        let mut inverse = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let ai = self.idx;
        let n = a.len();
        let out_shape = new_shape.clone();
        self.tape.push(
            new_shape,
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let (gp, _) = permute_values(g, &out_shape, &inverse);
                for (d, gv) in store.slot(ai, n).iter_mut().zip(gp) {
                    *d = *d + gv;
                }
            })),
        )
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'t, F> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "slice_rows: expected 2-d");
        let (m, n) = (shape[0], shape[1]);
        assert!(start + len <= m, "slice_rows: out of range");
        let a = self.value();
        let value = a[start * n..(start + len) * n].to_vec();
        let ai = self.idx;
        self.tape.push(
            vec![len, n],
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let da = store.slot(ai, m * n);
                for (d, &gv) in da[start * n..(start + len) * n].iter_mut().zip(g) {
                    *d = *d + gv;
                }
            })),
        )
    }

    pub fn row(self, i: usize) -> Var<'t, F> {
        self.slice_rows(i, 1)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t, F> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "slice_cols: expected 2-d");
        let (m, n) = (shape[0], shape[1]);
        assert!(start + len <= n, "slice_cols: out of range");
        let a = self.value();
        let mut value = vec![F::zero(); m * len];
        for i in 0..m {
            value[i * len..(i + 1) * len].copy_from_slice(&a[i * n + start..i * n + start + len]);
        }
        let ai = self.idx;
        self.tape.push(
            vec![m, len],
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let da = store.slot(ai, m * n);
                for i in 0..m {
                    for j in 0..len {
                        da[i * n + start + j] = da[i * n + start + j] + g[i * len + j];
                    }
                }
            })),
        )
    }

    /// Select rows by index; repeated indices accumulate in the backward.
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t, F> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "gather_rows: expected 2-d");
        let (m, n) = (shape[0], shape[1]);
        assert!(
            indices.iter().all(|&i| i < m),
            "gather_rows: index out of range"
        );
        let a = self.value();
        let mut value = vec![F::zero(); indices.len() * n];
        for (r, &src) in indices.iter().enumerate() {
            value[r * n..(r + 1) * n].copy_from_slice(&a[src * n..(src + 1) * n]);
        }
        let idxs = indices.to_vec();
        let ai = self.idx;
        let rows = indices.len();
        self.tape.push(
            vec![rows, n],
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let da = store.slot(ai, m * n);
                for (r, &src) in idxs.iter().enumerate() {
                    for j in 0..n {
                        da[src * n + j] = da[src * n + j] + g[r * n + j];
                    }
                }
            })),
        )
    }

    // ----- normalization -----

    /// Softmax along the last axis.
    pub fn softmax_rows(self) -> Var<'t, F> {
        let shape = self.shape();
        let (rows, n) = last_axis(&shape);
        let a = self.value();
        let mut value = vec![F::zero(); rows * n];
        for r in 0..rows {
            softmax_row(&a[r * n..(r + 1) * n], &mut value[r * n..(r + 1) * n]);
        }
        let y = value.clone();
        let ai = self.idx;
        self.tape.push(
            shape,
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let da = store.slot(ai, rows * n);
                for r in 0..rows {
                    let o = r * n;
                    let mut dot = F::zero();
                    for j in 0..n {
                        dot = dot + g[o + j] * y[o + j];
                    }
                    for j in 0..n {
                        da[o + j] = da[o + j] + y[o + j] * (g[o + j] - dot);
                    }
                }
            })),
        )
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax_rows(self) -> Var<'t, F> {
        let shape = self.shape();
        let (rows, n) = last_axis(&shape);
        let a = self.value();
        let mut value = vec![F::zero(); rows * n];
        for r in 0..rows {
            let row = &a[r * n..(r + 1) * n];
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = F::zero();
            for &v in row {
                sum = sum + (v - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..n {
                value[r * n + j] = row[j] - lse;
            }
        }
        let y = value.clone();
        let ai = self.idx;
        self.tape.push(
            shape,
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let da = store.slot(ai, rows * n);
                for r in 0..rows {
                    let o = r * n;
                    let mut gsum = F::zero();
                    for j in 0..n {
                        gsum = gsum + g[o + j];
                    }
                    for j in 0..n {
                        da[o + j] = da[o + j] + g[o + j] - y[o + j].exp() * gsum;
                    }
                }
            })),
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(self, gamma: Var<'t, F>, beta: Var<'t, F>, eps: F) -> Var<'t, F> {
        assert_same_tape(&self, &gamma);
        assert_same_tape(&self, &beta);
        let shape = self.shape();
        let (rows, n) = last_axis(&shape);
        assert_eq!(gamma.numel(), n, "layer_norm: gamma width");
        assert_eq!(beta.numel(), n, "layer_norm: beta width");
        let a = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let inv_n = F::one() / F::from_f64(n as f64);
        let mut xhat = vec![F::zero(); rows * n];
        let mut inv_std = vec![F::zero(); rows];
        let mut value = vec![F::zero(); rows * n];
        for r in 0..rows {
            let o = r * n;
            let row = &a[o..o + n];
            let mut mean = F::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = F::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                xhat[o + j] = xh;
                value[o + j] = gv[j] * xh + bv[j];
            }
        }
        let (ai, gi, bi) = (self.idx, gamma.idx, beta.idx);
        self.tape.push(
            shape,
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                {
                    let dgamma = store.slot(gi, n);
                    for r in 0..rows {
                        for j in 0..n {
                            dgamma[j] = dgamma[j] + g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                {
                    let dbeta = store.slot(bi, n);
                    for r in 0..rows {
                        for j in 0..n {
                            dbeta[j] = dbeta[j] + g[r * n + j];
                        }
                    }
                }
                let da = store.slot(ai, rows * n);
                for r in 0..rows {
                    let o = r * n;
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..n {
                        let dxh = g[o + j] * gv[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xhat[o + j];
                    }
                    m1 = m1 * inv_n;
                    m2 = m2 * inv_n;
                    for j in 0..n {
                        let dxh = g[o + j] * gv[j];
                        da[o + j] = da[o + j] + inv_std[r] * (dxh - m1 - xhat[o + j] * m2);
                    }
                }
            })),
        )
    }

    /// Train-mode batch normalization over axis 0 of a `[B, n]` input.
    /// Normalizes by biased batch statistics and returns them so the caller
    /// can update running estimates.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t, F>,
        beta: Var<'t, F>,
        eps: F,
    ) -> (Var<'t, F>, BatchStats<F>) {
        assert_same_tape(&self, &gamma);
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "batch_norm: expected 2-d");
        let (m, n) = (shape[0], shape[1]);
        assert_eq!(gamma.numel(), n, "batch_norm: gamma width");
        assert_eq!(beta.numel(), n, "batch_norm: beta width");
        let a = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let inv_m = F::one() / F::from_f64(m as f64);
        let mut mean = vec![F::zero(); n];
        let mut var = vec![F::zero(); n];
        for i in 0..m {
            for j in 0..n {
                mean[j] = mean[j] + a[i * n + j];
            }
        }
        for mj in mean.iter_mut() {
            *mj = *mj * inv_m;
        }
        for i in 0..m {
            for j in 0..n {
                let d = a[i * n + j] - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        for vj in var.iter_mut() {
            *vj = *vj * inv_m;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); m * n];
        let mut value = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let xh = (a[i * n + j] - mean[j]) * inv_std[j];
                xhat[i * n + j] = xh;
                value[i * n + j] = gv[j] * xh + bv[j];
            }
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            batch: m,
        };
        let (ai, gi, bi) = (self.idx, gamma.idx, beta.idx);
        let out = self.tape.push(
            shape,
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                {
                    let dgamma = store.slot(gi, n);
                    for i in 0..m {
                        for j in 0..n {
                            dgamma[j] = dgamma[j] + g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                {
                    let dbeta = store.slot(bi, n);
                    for i in 0..m {
                        for j in 0..n {
                            dbeta[j] = dbeta[j] + g[i * n + j];
                        }
                    }
                }
                let da = store.slot(ai, m * n);
                let inv_mf = F::one() / F::from_f64(m as f64);
                for j in 0..n {
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for i in 0..m {
                        let dxh = g[i * n + j] * gv[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xhat[i * n + j];
                    }
                    m1 = m1 * inv_mf;
                    m2 = m2 * inv_mf;
                    for i in 0..m {
                        let dxh = g[i * n + j] * gv[j];
                        da[i * n + j] =
                            da[i * n + j] + inv_std[j] * (dxh - m1 - xhat[i * n + j] * m2);
                    }
                }
            })),
        );
        (out, stats)
    }

    /// Eval-mode batch normalization: a fixed affine map per feature.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, F>,
        beta: Var<'t, F>,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
    ) -> Var<'t, F> {
        assert_same_tape(&self, &gamma);
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "batch_norm: expected 2-d");
        let (m, n) = (shape[0], shape[1]);
        assert_eq!(running_mean.len(), n);
        assert_eq!(running_var.len(), n);
        let a = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let inv_std: Vec<F> = running_var
            .iter()
            .map(|&v| F::one() / (v + eps).sqrt())
            .collect();
        let mean = running_mean.to_vec();
        let mut xhat = vec![F::zero(); m * n];
        let mut value = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let xh = (a[i * n + j] - mean[j]) * inv_std[j];
                xhat[i * n + j] = xh;
                value[i * n + j] = gv[j] * xh + bv[j];
            }
        }
        let (ai, gi, bi) = (self.idx, gamma.idx, beta.idx);
        self.tape.push(
            shape,
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                {
                    let dgamma = store.slot(gi, n);
                    for i in 0..m {
                        for j in 0..n {
                            dgamma[j] = dgamma[j] + g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                {
                    let dbeta = store.slot(bi, n);
                    for i in 0..m {
                        for j in 0..n {
                            dbeta[j] = dbeta[j] + g[i * n + j];
                        }
                    }
                }
                let da = store.slot(ai, m * n);
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = da[i * n + j] + g[i * n + j] * gv[j] * inv_std[j];
                    }
                }
            })),
        )
    }

    // ----- convolutions (stride 1, same padding, odd kernels) -----

    /// `x: [C_in,H,W]`, `w: [C_out,C_in,kh,kw]`, `b: [C_out]` -> `[C_out,H,W]`
    pub fn conv2d_same(self, weight: Var<'t, F>, bias: Var<'t, F>) -> Var<'t, F> {
        assert_same_tape(&self, &weight);
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 3, "conv2d: input must be [C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d: weight must be [O,C,kh,kw]");
        assert_eq!(ws[1], xs[0], "conv2d: channel mismatch");
        assert!(ws[2] % 2 == 1 && ws[3] % 2 == 1, "conv2d: odd kernels only");
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        assert_eq!(bias.numel(), c_out, "conv2d: bias width");
        let (ph, pw) = (kh / 2, kw / 2);
        let x = self.value();
        let wv = weight.value();
        let bv = bias.value();
        let mut value = vec![F::zero(); c_out * h * w];
        for o in 0..c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = bv[o];
                    for c in 0..c_in {
                        for i in 0..kh {
                            let yy = y + i;
                            if yy < ph || yy - ph >= h {
                                continue;
                            }
                            let yy = yy - ph;
                            for j in 0..kw {
                                let xj = xx + j;
                                if xj < pw || xj - pw >= w {
                                    continue;
                                }
                                let xj = xj - pw;
                                s = s + x[(c * h + yy) * w + xj]
                                    * wv[((o * c_in + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    value[(o * h + y) * w + xx] = s;
                }
            }
        }
        let (ai, wi, bi) = (self.idx, weight.idx, bias.idx);
        self.tape.push(
            vec![c_out, h, w],
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                {
                    let db = store.slot(bi, c_out);
                    for o in 0..c_out {
                        for p in 0..h * w {
                            db[o] = db[o] + g[o * h * w + p];
                        }
                    }
                }
                {
                    let dw = store.slot(wi, c_out * c_in * kh * kw);
                    for o in 0..c_out {
                        for c in 0..c_in {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let mut s = F::zero();
                                    for y in 0..h {
                                        let yy = y + i;
                                        if yy < ph || yy - ph >= h {
                                            continue;
                                        }
                                        let yy = yy - ph;
                                        for xx in 0..w {
                                            let xj = xx + j;
                                            if xj < pw || xj - pw >= w {
                                                continue;
                                            }
                                            let xj = xj - pw;
                                            s = s + g[(o * h + y) * w + xx]
                                                * x[(c * h + yy) * w + xj];
                                        }
                                    }
                                    let widx = ((o * c_in + c) * kh + i) * kw + j;
                                    dw[widx] = dw[widx] + s;
                                }
                            }
                        }
                    }
                }
                let dx = store.slot(ai, c_in * h * w);
                for o in 0..c_out {
                    for y in 0..h {
                        for xx in 0..w {
                            let gv = g[(o * h + y) * w + xx];
                            if gv == F::zero() {
                                continue;
                            }
                            for c in 0..c_in {
                                for i in 0..kh {
                                    let yy = y + i;
                                    if yy < ph || yy - ph >= h {
                                        continue;
                                    }
                                    let yy = yy - ph;
                                    for j in 0..kw {
                                        let xj = xx + j;
                                        if xj < pw || xj - pw >= w {
                                            continue;
                                        }
                                        let xj = xj - pw;
                                        let xidx = (c * h + yy) * w + xj;
                                        dx[xidx] = dx[xidx]
                                            + gv * wv[((o * c_in + c) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                    }
                }
            })),
        )
    }

    /// `x: [C_in,L]`, `w: [C_out,C_in,k]`, `b: [C_out]` -> `[C_out,L]`
    pub fn conv1d_same(self, weight: Var<'t, F>, bias: Var<'t, F>) -> Var<'t, F> {
        assert_same_tape(&self, &weight);
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 2, "conv1d: input must be [C,L]");
        assert_eq!(ws.len(), 3, "conv1d: weight must be [O,C,k]");
        assert_eq!(ws[1], xs[0], "conv1d: channel mismatch");
        assert!(ws[2] % 2 == 1, "conv1d: odd kernel only");
        let (c_in, l) = (xs[0], xs[1]);
        let (c_out, k) = (ws[0], ws[2]);
        assert_eq!(bias.numel(), c_out, "conv1d: bias width");
        let p = k / 2;
        let x = self.value();
        let wv = weight.value();
        let bv = bias.value();
        let mut value = vec![F::zero(); c_out * l];
        for o in 0..c_out {
            for t in 0..l {
                let mut s = bv[o];
                for c in 0..c_in {
                    for i in 0..k {
                        let tt = t + i;
                        if tt < p || tt - p >= l {
                            continue;
                        }
                        s = s + x[c * l + (tt - p)] * wv[(o * c_in + c) * k + i];
                    }
                }
                value[o * l + t] = s;
            }
        }
        let (ai, wi, bi) = (self.idx, weight.idx, bias.idx);
        self.tape.push(
            vec![c_out, l],
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                {
                    let db = store.slot(bi, c_out);
                    for o in 0..c_out {
                        for t in 0..l {
                            db[o] = db[o] + g[o * l + t];
                        }
                    }
                }
                {
                    let dw = store.slot(wi, c_out * c_in * k);
                    for o in 0..c_out {
                        for c in 0..c_in {
                            for i in 0..k {
                                let mut s = F::zero();
                                for t in 0..l {
                                    let tt = t + i;
                                    if tt < p || tt - p >= l {
                                        continue;
                                    }
                                    s = s + g[o * l + t] * x[c * l + (tt - p)];
                                }
                                dw[(o * c_in + c) * k + i] = dw[(o * c_in + c) * k + i] + s;
                            }
                        }
                    }
                }
                let dx = store.slot(ai, c_in * l);
                for o in 0..c_out {
                    for t in 0..l {
                        let gv = g[o * l + t];
                        if gv == F::zero() {
                            continue;
                        }
                        for c in 0..c_in {
                            for i in 0..k {
                                let tt = t + i;
                                if tt < p || tt - p >= l {
                                    continue;
                                }
                                let xi = c * l + (tt - p);
                                dx[xi] = dx[xi] + gv * wv[(o * c_in + c) * k + i];
                            }
                        }
                    }
                }
            })),
        )
    }

    // ----- reductions -----

    pub fn sum(self) -> Var<'t, F> {
        let a = self.value();
        let total = a.iter().fold(F::zero(), |acc, &v| acc + v);
        let (ai, n) = (self.idx, a.len());
        self.tape.push(
            vec![1],
            vec![total],
            Some(alloc::boxed::Box::new(move |g, store| {
                let da = store.slot(ai, n);
                for d in da.iter_mut() {
                    *d = *d + g[0];
                }
            })),
        )
    }

    pub fn mean(self) -> Var<'t, F> {
        let n = self.numel();
        self.sum().scale(F::one() / F::from_f64(n as f64))
    }

    /// Mean over the last axis: `[..., L] -> [...]`.
    pub fn mean_last_axis(self) -> Var<'t, F> {
        let shape = self.shape();
        let (rows, l) = last_axis(&shape);
        let a = self.value();
        let inv = F::one() / F::from_f64(l as f64);
        let mut value = vec![F::zero(); rows];
        for r in 0..rows {
            let mut s = F::zero();
            for j in 0..l {
                s = s + a[r * l + j];
            }
            value[r] = s * inv;
        }
        let out_shape = shape[..shape.len() - 1].to_vec();
        let ai = self.idx;
        self.tape.push(
            if out_shape.is_empty() {
                vec![1]
            } else {
                out_shape
            },
            value,
            Some(alloc::boxed::Box::new(move |g, store| {
                let da = store.slot(ai, rows * l);
                for r in 0..rows {
                    for j in 0..l {
                        da[r * l + j] = da[r * l + j] + g[r] * inv;
                    }
                }
            })),
        )
    }

    /// Euclidean norm of the whole tensor as a scalar. A tiny clamp keeps
    /// the gradient finite when the input is exactly zero.
    pub fn l2_norm(self) -> Var<'t, F> {
        self.mul(self).sum().clamp_min(F::from_f64(1e-24)).sqrt_elem()
    }
}

/// Row-stack 2-d vars with a common column count.
pub fn concat_rows<'t, F: Real>(tape: &'t Tape<F>, parts: &[Var<'t, F>]) -> Var<'t, F> {
    assert!(!parts.is_empty(), "concat_rows: no parts");
    let n = parts[0].shape()[1];
    let mut rows = 0usize;
    let mut value = Vec::new();
    let mut spans = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        assert_eq!(s.len(), 2, "concat_rows: expected 2-d");
        assert_eq!(s[1], n, "concat_rows: column mismatch");
        let v = p.value();
        spans.push((p.idx, rows, s[0]));
        rows += s[0];
        value.extend_from_slice(&v);
    }
    tape.push(
        vec![rows, n],
        value,
        Some(alloc::boxed::Box::new(move |g, store| {
            for &(idx, start, len) in &spans {
                let da = store.slot(idx, len * n);
                for (d, &gv) in da.iter_mut().zip(&g[start * n..(start + len) * n]) {
                    *d = *d + gv;
                }
            }
        })),
    )
}

/// Column-concatenate 2-d vars with a common row count.
pub fn concat_cols<'t, F: Real>(tape: &'t Tape<F>, parts: &[Var<'t, F>]) -> Var<'t, F> {
    assert!(!parts.is_empty(), "concat_cols: no parts");
    let m = parts[0].shape()[0];
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            let s = p.shape();
            assert_eq!(s.len(), 2, "concat_cols: expected 2-d");
            assert_eq!(s[0], m, "concat_cols: row mismatch");
            s[1]
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut value = vec![F::zero(); m * total];
    let mut offsets = Vec::with_capacity(parts.len());
    let mut off = 0usize;
    for (p, &w) in parts.iter().zip(&widths) {
        let v = p.value();
        for i in 0..m {
            value[i * total + off..i * total + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
        }
        offsets.push((p.idx, off, w));
        off += w;
    }
    tape.push(
        vec![m, total],
        value,
        Some(alloc::boxed::Box::new(move |g, store| {
            for &(idx, off, w) in &offsets {
                let da = store.slot(idx, m * w);
                for i in 0..m {
                    for j in 0..w {
                        da[i * w + j] = da[i * w + j] + g[i * total + off + j];
                    }
                }
            }
        })),
    )
}

/// Materialized axis permutation used by `permute` in both directions.
fn permute_values<F: Real>(values: &[F], shape: &[usize], perm: &[usize]) -> (Vec<F>, Vec<usize>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![F::zero(); values.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[d]];
        }
        *slot = values[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, new_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn softmax_symmetry_and_normalization() {
        let y = softmax(&[0.0f64, 0.0, 0.0, 0.0]).unwrap();
        for v in &y {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let y = softmax(&[3.7f64]).unwrap();
        assert_eq!(y, vec![1.0]);
    }

    #[test]
    fn softmax_hand_value() {
        // e^x / sum for x = [ln 1, ln 3]
        let y = softmax(&[0.0f64, 3.0f64.ln()]).unwrap();
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax(&[1.0f64, f64::NAN]).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { .. }));
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = [0.3f64, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 17.25).collect();
        let a = softmax(&x).unwrap();
        let b = softmax(&shifted).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matmul_values_and_grads() {
        let tape = Tape::<f64>::new();
        let a = Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_f64(vec![2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let va = tape.param(&a);
        let vb = tape.param(&b);
        let c = va.matmul(vb);
        assert_eq!(c.value().as_ref(), &vec![19.0, 22.0, 43.0, 50.0]);
        let loss = c.sum();
        let grads = tape.backward(loss);
        // d(sum(AB))/dA = ones * B^T
        assert_eq!(grads.of_tensor(&a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.of_tensor(&b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        let tape = Tape::<f64>::new();
        let a = Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let va = tape.param(&a);
        let g = va.gather_rows(&[1, 1, 0]);
        assert_eq!(g.value().as_ref(), &vec![3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let grads = tape.backward(g.sum());
        assert_eq!(grads.of_tensor(&a).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn permute_round_trip() {
        let tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let a = Tensor::new(vec![2, 3, 4], vals.clone());
        let va = tape.constant_of(&a);
        let p = va.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), vec![4, 2, 3]);
        let back = p.permute(&[1, 2, 0]);
        assert_eq!(back.value().as_ref(), &vals);
    }

    #[test]
    fn batch_norm_eval_deterministic_affine() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let gamma = Tensor::from_f64(vec![3], &[1.0, 1.0, 1.0]);
        let beta = Tensor::from_f64(vec![3], &[0.0, 0.0, 0.0]);
        let rm = [0.0, 0.0, 0.0];
        let rv = [1.0, 1.0, 1.0];
        let vg = tape.param(&gamma);
        let vb = tape.param(&beta);
        let y1 = tape
            .constant_of(&x)
            .batch_norm_eval(vg, vb, &rm, &rv, 0.0)
            .value();
        let y2 = tape
            .constant_of(&x)
            .batch_norm_eval(vg, vb, &rm, &rv, 0.0)
            .value();
        assert_eq!(y1.as_ref(), y2.as_ref());
        assert_eq!(y1.as_ref(), x.values());
    }
}

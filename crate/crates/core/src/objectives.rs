//! Loss terms and their composition: label-smoothed identity loss,
//! batch-hard triplet, center loss, attention regularization, and the
//! global/local trade-off that forms the total objective.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LossWeights {
    /// Global/local trade-off.
    pub alpha: f64,
    /// Center-loss weight.
    pub beta: f64,
    /// Label-smoothing epsilon.
    pub smoothing: f64,
    /// Triplet margin.
    pub margin: f64,
    /// Step size for the separate center update.
    pub center_lr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.75,
            beta: 0.0005,
            smoothing: 0.1,
            margin: 0.3,
            center_lr: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CoreError::invalid("alpha must lie in [0,1]"));
        }
        if self.beta < 0.0 || self.margin < 0.0 {
            return Err(CoreError::invalid("beta and margin must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(CoreError::invalid("smoothing must lie in [0,1)"));
        }
        if !(0.0 < self.center_lr && self.center_lr <= 1.0) {
            return Err(CoreError::invalid("center_lr must lie in (0,1]"));
        }
        Ok(())
    }
}

/// Per-class center banks: one `[C, D]` bank for the global feature and one
/// `[C, T*D]` bank per part.
#[derive(Debug, Clone)]
pub struct Centers<F: Real> {
    pub global: Tensor<F>,
    pub parts: Vec<Tensor<F>>,
}

impl<F: Real> Centers<F> {
    pub fn zeros(classes: usize, global_dim: usize, part_dim: usize, parts: usize) -> Self {
        Centers {
            global: Tensor::zeros(vec![classes, global_dim]),
            parts: (0..parts)
                .map(|_| Tensor::zeros(vec![classes, part_dim]))
                .collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.global.shape()[0]
    }
}

/// Cross-entropy against smoothed targets `q_c = (1-eps)[c=y] + eps/C`,
/// averaged over the batch. `logits: [B, C]`.
pub fn id_loss<'t, F: Real>(
    logits: Var<'t, F>,
    labels: &[usize],
    smoothing: f64,
) -> Result<Var<'t, F>> {
    let shape = logits.shape();
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(CoreError::shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(CoreError::invalid(format!(
            "label {bad} outside the {c} classes"
        )));
    }
    let off = smoothing / c as f64;
    let on = 1.0 - smoothing + off;
    let mut targets = vec![F::from_f64(off); b * c];
    for (i, &y) in labels.iter().enumerate() {
        targets[i * c + y] = F::from_f64(on);
    }
    let log_probs = logits.log_softmax_rows();
    Ok(log_probs
        .mul_values(&targets)
        .sum()
        .scale(F::from_f64(-1.0 / b as f64)))
}

fn row_distance<F: Real>(values: &[F], d: usize, i: usize, j: usize) -> F {
    let (a, b) = (&values[i * d..(i + 1) * d], &values[j * d..(j + 1) * d]);
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        let diff = x - y;
        s = s + diff * diff;
    }
    s.sqrt()
}

/// On-tape Euclidean distance between two feature rows.
fn pair_distance<'t, F: Real>(features: Var<'t, F>, a: usize, b: usize) -> Var<'t, F> {
    features.row(a).sub(features.row(b)).l2_norm()
}

/// Batch-hard triplet loss: per anchor, the farthest same-label sample and
/// the nearest different-label sample form the triplet; the loss is the mean
/// hinge `max(0, d_pos - d_neg + margin)` over anchors that have at least
/// one positive. Ties resolve to the lowest index.
pub fn triplet_batch_hard<'t, F: Real>(
    features: Var<'t, F>,
    labels: &[usize],
    margin: f64,
) -> Result<Var<'t, F>> {
    let shape = features.shape();
    let (b, d) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(CoreError::shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let first = labels.first().ok_or(CoreError::SingleClassBatch)?;
    if labels.iter().all(|l| l == first) {
        return Err(CoreError::SingleClassBatch);
    }

    // Mining happens on forward values; only selected pairs enter the graph.
    let values = features.value();
    let mut hinges = Vec::new();
    let tape = features.tape();
    for anchor in 0..b {
        let mut pos: Option<(usize, F)> = None;
        let mut neg: Option<(usize, F)> = None;
        for other in 0..b {
            if other == anchor {
                continue;
            }
            let dist = row_distance(&values, d, anchor, other);
            if labels[other] == labels[anchor] {
                if pos.map(|(_, best)| dist > best).unwrap_or(true) {
                    pos = Some((other, dist));
                }
            } else if neg.map(|(_, best)| dist < best).unwrap_or(true) {
                neg = Some((other, dist));
            }
        }
        let (Some((p, _)), Some((n, _))) = (pos, neg) else {
            continue; // anchor without a positive is skipped
        };
        let d_pos = pair_distance(features, anchor, p);
        let d_neg = pair_distance(features, anchor, n);
        hinges.push(
            d_pos
                .sub(d_neg)
                .add(tape.scalar(F::from_f64(margin)))
                .relu(),
        );
    }
    if hinges.is_empty() {
        return Err(CoreError::invalid(
            "no anchor has a positive; the batch needs two samples of some class",
        ));
    }
    let mut total = hinges[0];
    for h in &hinges[1..] {
        total = total.add(*h);
    }
    Ok(total.scale(F::one() / F::from_f64(hinges.len() as f64)))
}

/// `(1/2B) * sum_i ||f_i - c_{y_i}||^2` with centers held constant (their
/// own update is [`update_centers`]).
pub fn center_loss<'t, F: Real>(
    features: Var<'t, F>,
    labels: &[usize],
    bank: &Tensor<F>,
) -> Result<Var<'t, F>> {
    let shape = features.shape();
    let (b, d) = (shape[0], shape[1]);
    let classes = bank.shape()[0];
    if bank.shape()[1] != d {
        return Err(CoreError::shape(format!(
            "center width {} does not match features {d}",
            bank.shape()[1]
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(CoreError::MissingCenter { class: bad });
    }
    let tape = features.tape();
    let mut gathered = Vec::with_capacity(b * d);
    for &y in labels {
        gathered.extend_from_slice(&bank.values()[y * d..(y + 1) * d]);
    }
    let centers = tape.constant(vec![b, d], gathered);
    let diff = features.sub(centers);
    Ok(diff.mul(diff).sum().scale(F::from_f64(0.5 / b as f64)))
}

/// Standard center update: each class center moves toward the mean of its
/// batch features; absent classes are untouched.
pub fn update_centers<F: Real>(
    bank: &mut Tensor<F>,
    features: &[F],
    labels: &[usize],
    center_lr: f64,
) {
    assert!((0.0..=1.0).contains(&center_lr) && center_lr > 0.0);
    let d = bank.shape()[1];
    assert_eq!(features.len(), labels.len() * d, "feature buffer size");
    let classes = bank.shape()[0];
    let mut sums = vec![F::zero(); classes * d];
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        assert!(y < classes, "label outside center bank");
        counts[y] += 1;
        for j in 0..d {
            sums[y * d + j] = sums[y * d + j] + features[i * d + j];
        }
    }
    let lr = F::from_f64(center_lr);
    let bank_values = bank.values_mut();
    for y in 0..classes {
        if counts[y] == 0 {
            continue;
        }
        let inv = F::one() / F::from_f64(counts[y] as f64);
        for j in 0..d {
            let mean = sums[y * d + j] * inv;
            let c = bank_values[y * d + j];
            bank_values[y * d + j] = c - lr * (c - mean);
        }
    }
}

/// Sum of squared attention weights per clip, averaged over the batch:
/// minimized (1/T) by uniform attention, maximized (1) by one-hot.
pub fn attention_reg<'t, F: Real>(alphas: Var<'t, F>) -> Var<'t, F> {
    let b = alphas.shape()[0];
    alphas
        .mul(alphas)
        .sum()
        .scale(F::one() / F::from_f64(b as f64))
}

/// The supervision inputs one branch head contributes to the objective.
pub struct BranchTerms<'t, F: Real> {
    /// Pre-norm feature `[B, dim]` consumed by triplet and center losses.
    pub features: Var<'t, F>,
    /// Classifier output `[B, C]` consumed by the identity loss.
    pub logits: Var<'t, F>,
}

/// Global-branch inputs: head terms plus the attention weights `[B, T]`.
pub struct GlobalTerms<'t, F: Real> {
    pub terms: BranchTerms<'t, F>,
    pub alphas: Var<'t, F>,
}

/// Per-term scalar values of one training step, for logging and
/// decomposition tests.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub id: f64,
    pub triplet: f64,
    pub center: f64,
    pub attn: f64,
    pub part_id: Vec<f64>,
    pub part_triplet: Vec<f64>,
    pub part_center: Vec<f64>,
    pub global_total: f64,
    pub local_total: f64,
    pub total: f64,
}

/// Compose the full objective.
///
/// * global present, local present: `alpha * global + (1-alpha) * local`
/// * local absent (`no_local`): the total is exactly the global term
/// * global absent (`no_global`): the total is exactly the local term
///
/// The global term is `id + triplet + beta*center + attn`; the local term
/// averages `id_k + triplet_k + beta*center_k` over parts.
pub fn total_loss<'t, F: Real>(
    tape: &'t Tape<F>,
    global: Option<GlobalTerms<'t, F>>,
    parts: Option<&[BranchTerms<'t, F>]>,
    labels: &[usize],
    weights: &LossWeights,
    centers: &Centers<F>,
) -> Result<(Var<'t, F>, LossBreakdown)> {
    weights.validate()?;
    if global.is_none() && parts.is_none() {
        return Err(CoreError::invalid("both branches ablated away"));
    }
    let beta = F::from_f64(weights.beta);
    let mut breakdown = LossBreakdown::default();

    let global_var = match &global {
        Some(g) => {
            let id = id_loss(g.terms.logits, labels, weights.smoothing)?;
            let trip = triplet_batch_hard(g.terms.features, labels, weights.margin)?;
            let cent = center_loss(g.terms.features, labels, &centers.global)?;
            let attn = attention_reg(g.alphas);
            breakdown.id = id.item().as_f64();
            breakdown.triplet = trip.item().as_f64();
            breakdown.center = cent.item().as_f64();
            breakdown.attn = attn.item().as_f64();
            let total = id.add(trip).add(cent.scale(beta)).add(attn);
            breakdown.global_total = total.item().as_f64();
            Some(total)
        }
        None => None,
    };

    let local_var = match parts {
        Some(parts) if !parts.is_empty() => {
            if centers.parts.len() != parts.len() {
                return Err(CoreError::shape(format!(
                    "{} center banks for {} parts",
                    centers.parts.len(),
                    parts.len()
                )));
            }
            let mut sum: Option<Var<'t, F>> = None;
            for (k, part) in parts.iter().enumerate() {
                let id = id_loss(part.logits, labels, weights.smoothing)?;
                let trip = triplet_batch_hard(part.features, labels, weights.margin)?;
                let cent = center_loss(part.features, labels, &centers.parts[k])?;
                breakdown.part_id.push(id.item().as_f64());
                breakdown.part_triplet.push(trip.item().as_f64());
                breakdown.part_center.push(cent.item().as_f64());
                let term = id.add(trip).add(cent.scale(beta));
                sum = Some(match sum {
                    Some(s) => s.add(term),
                    None => term,
                });
            }
            let total = sum.unwrap().scale(F::one() / F::from_f64(parts.len() as f64));
            breakdown.local_total = total.item().as_f64();
            Some(total)
        }
        _ => None,
    };

    let total = match (global_var, local_var) {
        (Some(g), Some(l)) => {
            let alpha = F::from_f64(weights.alpha);
            let one_minus = F::from_f64(1.0 - weights.alpha);
            g.scale(alpha).add(l.scale(one_minus))
        }
        (Some(g), None) => g,
        (None, Some(l)) => l,
        (None, None) => return Err(CoreError::invalid("no loss terms")),
    };
    breakdown.total = total.item().as_f64();
    let _ = tape;
    Ok((total, breakdown))
}

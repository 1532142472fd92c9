//! Part-aware pathway: TCSS temporal perturbation of patch tokens, KPS
//! keypoint-guided part features through a shared encoder, and per-part
//! prediction heads.

use alloc::format;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::global_branch::PredictionHead;
use crate::params::{join, ParamKind, ParamVisit};
use crate::rng::Prng;
use crate::scalar::Real;
use crate::tensor::{concat_cols, concat_rows, Tape, Tensor, Var};
use crate::transformer::EncoderBlock;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TcssConfig {
    /// Circular temporal shift step m: frame t rolls its patch axis by t*m.
    pub shift: usize,
    /// Shuffle group count g; must divide the patch count.
    pub groups: usize,
}

impl Default for TcssConfig {
    fn default() -> Self {
        TcssConfig { shift: 5, groups: 4 }
    }
}

impl TcssConfig {
    pub const IDENTITY: TcssConfig = TcssConfig { shift: 0, groups: 1 };
}

/// Per-output-row source patch indices: `indices[j][t]` is the original
/// patch of frame `t` that lands in output row `j`.
///
/// Row `j` first un-interleaves through the channel-shuffle map
/// (`j = b*g + a` comes from pre-shuffle position `a*(n/g) + b`), then each
/// frame contributes its circularly shifted patch `(src + t*m) mod n`.
pub fn tcss_indices(t: usize, n: usize, cfg: &TcssConfig) -> Result<Vec<Vec<usize>>> {
    if cfg.groups == 0 || n % cfg.groups != 0 {
        return Err(CoreError::invalid(format!(
            "shuffle groups {} must divide patch count {n}",
            cfg.groups
        )));
    }
    let g = cfg.groups;
    let per = n / g;
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let a = j % g;
        let b = j / g;
        let src = a * per + b;
        out.push((0..t).map(|ti| (src + ti * cfg.shift) % n).collect());
    }
    Ok(out)
}

/// Temporal clip shift-and-shuffle: `f_patch` is the frame-major `[T*n, D]`
/// patch-token matrix; the result is `[n, T*D]` with row `j` holding the
/// frame-major concatenation of the permuted patch vectors.
pub fn tcss<'t, F: Real>(
    tape: &'t Tape<F>,
    f_patch: Var<'t, F>,
    t: usize,
    n: usize,
    cfg: &TcssConfig,
) -> Result<Var<'t, F>> {
    let shape = f_patch.shape();
    assert_eq!(shape[0], t * n, "tcss: expected T*n patch rows");
    let indices = tcss_indices(t, n, cfg)?;
    let mut frame_blocks = Vec::with_capacity(t);
    for ti in 0..t {
        let rows: Vec<usize> = indices.iter().map(|row| ti * n + row[ti]).collect();
        frame_blocks.push(f_patch.gather_rows(&rows));
    }
    Ok(concat_cols(tape, &frame_blocks))
}

/// Scale each patch row of `l_patch` by its importance weight; this is the
/// broadcast elementwise product with the clip-level importance vector.
pub fn weight_rows<'t, F: Real>(l_patch: Var<'t, F>, importance: &[f64]) -> Result<Var<'t, F>> {
    let shape = l_patch.shape();
    if importance.len() != shape[0] {
        return Err(CoreError::shape(format!(
            "importance length {} does not match {} patch rows",
            importance.len(),
            shape[0]
        )));
    }
    if importance.iter().any(|&v| v < 0.0) {
        return Err(CoreError::invalid("importance weights must be nonnegative"));
    }
    let w: Vec<F> = importance.iter().map(|&v| F::from_f64(v)).collect();
    Ok(l_patch.scale_rows(&w))
}

/// KPS part feature: weighted patch rows are prepended with the flattened
/// [CLS] vector and passed through the shared encoder; the output [CLS]
/// position is the part feature `[1, T*D]`.
pub fn kps_part_feature<'t, F: Real>(
    tape: &'t Tape<F>,
    l_patch: Var<'t, F>,
    importance: &[f64],
    l_cls: Var<'t, F>,
    encoder: &EncoderBlock<F>,
    dropout: Option<(&mut Prng, f64)>,
) -> Result<Var<'t, F>> {
    let weighted = weight_rows(l_patch, importance)?;
    let seq = concat_rows(tape, &[l_cls, weighted]);
    let encoded = encoder.forward(seq, dropout);
    Ok(encoded.row(0))
}

/// Local branch: shared part encoder plus one prediction head per part.
#[derive(Clone)]
pub struct LocalBranch<F: Real> {
    pub encoder: EncoderBlock<F>,
    pub heads: Vec<PredictionHead<F>>,
}

impl<F: Real> LocalBranch<F> {
    pub fn init(
        token_width: usize,
        heads: usize,
        parts: usize,
        classes: usize,
        rng: &mut Prng,
    ) -> Self {
        LocalBranch {
            encoder: EncoderBlock::init(token_width, heads, rng),
            heads: (0..parts)
                .map(|_| PredictionHead::init(token_width, classes, rng))
                .collect(),
        }
    }

    pub fn num_parts(&self) -> usize {
        self.heads.len()
    }

    /// Build `L_cls` and `L_patch` and produce every part feature.
    /// `f_cls: [T, D]`, `f_patch: [T*n, D]`, importance rows are length n.
    pub fn part_features<'t>(
        &self,
        tape: &'t Tape<F>,
        f_cls: Var<'t, F>,
        f_patch: Var<'t, F>,
        importance: &[Vec<f64>],
        tcss_cfg: &TcssConfig,
        mut dropout: Option<(&mut Prng, f64)>,
    ) -> Result<Vec<Var<'t, F>>> {
        if importance.len() != self.num_parts() {
            return Err(CoreError::shape(format!(
                "{} importance rows for {} parts",
                importance.len(),
                self.num_parts()
            )));
        }
        let t = f_cls.shape()[0];
        let d = f_cls.shape()[1];
        let n = f_patch.shape()[0] / t;
        let l_cls = f_cls.reshape(&[1, t * d]);
        let l_patch = tcss(tape, f_patch, t, n, tcss_cfg)?;
        let mut out = Vec::with_capacity(self.num_parts());
        for m in importance {
            let d = dropout.as_mut().map(|(rng, p)| (&mut **rng, *p));
            out.push(kps_part_feature(tape, l_patch, m, l_cls, &self.encoder, d)?);
        }
        Ok(out)
    }
}

impl<F: Real> ParamVisit<F> for LocalBranch<F> {
    fn visit_params<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &'a Tensor<F>, ParamKind),
    ) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        for (i, h) in self.heads.iter().enumerate() {
            h.visit_params(&join(prefix, &format!("head{i}")), f);
        }
    }

    fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &mut Tensor<F>, ParamKind),
    ) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_params_mut(&join(prefix, &format!("head{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    /// Independent oracle: materialize the roll and the reshape-transpose
    /// shuffle step by step on plain vectors.
    fn tcss_oracle(values: &[f64], t: usize, n: usize, d: usize, cfg: &TcssConfig) -> Vec<f64> {
        // step 1: roll each frame's patch axis by t*m
        let mut rolled = alloc::vec![0.0; t * n * d];
        for ti in 0..t {
            for i in 0..n {
                let src = (i + ti * cfg.shift) % n;
                for c in 0..d {
                    rolled[(ti * n + i) * d + c] = values[(ti * n + src) * d + c];
                }
            }
        }
        // step 2: channel-shuffle via (g, n/g) reshape + transpose
        let g = cfg.groups;
        let per = n / g;
        let mut shuffled = alloc::vec![0.0; t * n * d];
        for ti in 0..t {
            for a in 0..g {
                for b in 0..per {
                    let src = a * per + b;
                    let dst = b * g + a;
                    for c in 0..d {
                        shuffled[(ti * n + dst) * d + c] = rolled[(ti * n + src) * d + c];
                    }
                }
            }
        }
        // step 3: flatten to [n, T*D] frame-major
        let mut out = alloc::vec![0.0; n * t * d];
        for j in 0..n {
            for ti in 0..t {
                for c in 0..d {
                    out[j * (t * d) + ti * d + c] = shuffled[(ti * n + j) * d + c];
                }
            }
        }
        out
    }

    fn run_tcss(values: &[f64], t: usize, n: usize, d: usize, cfg: &TcssConfig) -> Vec<f64> {
        let tape = Tape::<f64>::new();
        let v = tape.constant(alloc::vec![t * n, d], values.to_vec());
        tcss(&tape, v, t, n, cfg).unwrap().value().as_ref().clone()
    }

    #[test]
    fn identity_config_is_pure_reshape() {
        let t = 3;
        let n = 4;
        let d = 2;
        let values: Vec<f64> = (0..t * n * d).map(|v| v as f64).collect();
        let out = run_tcss(&values, t, n, d, &TcssConfig::IDENTITY);
        let oracle = tcss_oracle(&values, t, n, d, &TcssConfig::IDENTITY);
        assert_eq!(out, oracle);
        // identity: row j = concat over frames of patch j
        for j in 0..n {
            for ti in 0..t {
                for c in 0..d {
                    assert_eq!(out[j * (t * d) + ti * d + c], values[(ti * n + j) * d + c]);
                }
            }
        }
    }

    #[test]
    fn single_frame_rolls_by_zero() {
        let n = 6;
        let values: Vec<f64> = (0..n).map(|v| v as f64).collect();
        let cfg = TcssConfig { shift: 4, groups: 1 };
        let out = run_tcss(&values, 1, n, 1, &cfg);
        assert_eq!(out, values);
    }

    #[test]
    fn hand_enumerated_t2_n4_example() {
        // F_patch[t, i] = 10 t + i, D = 1, m = 1, g = 2
        let mut values = Vec::new();
        for t in 0..2 {
            for i in 0..4 {
                values.push((10 * t + i) as f64);
            }
        }
        let cfg = TcssConfig { shift: 1, groups: 2 };
        let out = run_tcss(&values, 2, 4, 1, &cfg);
        assert_eq!(
            out,
            alloc::vec![0.0, 11.0, 2.0, 13.0, 1.0, 12.0, 3.0, 10.0]
        );
    }

    #[test]
    fn matches_brute_force_oracle_on_random_configs() {
        let mut rng = Prng::seed_from_u64(11);
        for _ in 0..200 {
            let t = 1 + rng.below(4);
            let g_choices = [1usize, 2, 4, 8];
            let g = g_choices[rng.below(4)];
            let n = g * (1 + rng.below(4));
            let d = 1 + rng.below(4);
            let cfg = TcssConfig {
                shift: rng.below(8),
                groups: g,
            };
            let values: Vec<f64> = (0..t * n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let out = run_tcss(&values, t, n, d, &cfg);
            let oracle = tcss_oracle(&values, t, n, d, &cfg);
            assert_eq!(out, oracle, "t={t} n={n} d={d} cfg={cfg:?}");
        }
    }

    #[test]
    fn rows_form_a_per_frame_bijection() {
        let mut rng = Prng::seed_from_u64(12);
        for _ in 0..50 {
            let t = 1 + rng.below(4);
            let g = [1usize, 2, 4][rng.below(3)];
            let n = g * (1 + rng.below(5));
            let cfg = TcssConfig {
                shift: rng.below(8),
                groups: g,
            };
            let indices = tcss_indices(t, n, &cfg).unwrap();
            for ti in 0..t {
                let mut seen = alloc::vec![false; n];
                for row in &indices {
                    assert!(!seen[row[ti]], "duplicate source patch");
                    seen[row[ti]] = true;
                }
                assert!(seen.iter().all(|&s| s));
            }
        }
    }

    #[test]
    fn group_must_divide_patch_count() {
        let cfg = TcssConfig { shift: 1, groups: 3 };
        assert!(tcss_indices(2, 4, &cfg).is_err());
    }

    #[test]
    fn all_ones_importance_is_identity_weighting() {
        let tape = Tape::<f64>::new();
        let l = tape.constant(alloc::vec![3, 2], alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = weight_rows(l, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(out.value().as_ref(), l.value().as_ref());
    }

    #[test]
    fn zero_importance_annihilates_rows() {
        let tape = Tape::<f64>::new();
        let l = tape.constant(alloc::vec![2, 2], alloc::vec![1.0, 2.0, 3.0, 4.0]);
        let out = weight_rows(l, &[0.0, 0.0]).unwrap();
        assert!(out.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_importance_keeps_single_row() {
        let tape = Tape::<f64>::new();
        let l = tape.constant(alloc::vec![3, 2], alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = weight_rows(l, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(
            out.value().as_ref(),
            &alloc::vec![0.0, 0.0, 3.0, 4.0, 0.0, 0.0]
        );
    }

    #[test]
    fn weighting_is_homogeneous_in_importance() {
        let mut rng = Prng::seed_from_u64(13);
        let tape = Tape::<f64>::new();
        let l = Tensor::<f64>::uniform(alloc::vec![4, 3], -1.0, 1.0, &mut rng);
        let m: Vec<f64> = (0..4).map(|_| rng.uniform(0.0, 1.0)).collect();
        let scaled: Vec<f64> = m.iter().map(|v| v * 3.0).collect();
        let base = weight_rows(tape.constant_of(&l), &m).unwrap();
        let tripled = weight_rows(tape.constant_of(&l), &scaled).unwrap();
        for (a, b) in base.value().iter().zip(tripled.value().iter()) {
            assert!((a * 3.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_importance_gives_identical_part_features() {
        let mut rng = Prng::seed_from_u64(14);
        let width = 8;
        let branch = LocalBranch::<f64>::init(width, 2, 2, 3, &mut rng);
        let tape = Tape::new();
        let t = 2;
        let d = 4;
        let n = 4;
        let f_cls = Tensor::<f64>::uniform(alloc::vec![t, d], -1.0, 1.0, &mut rng);
        let f_patch = Tensor::<f64>::uniform(alloc::vec![t * n, d], -1.0, 1.0, &mut rng);
        let m = alloc::vec![alloc::vec![0.3, 0.9, 0.1, 0.5]; 2];
        let feats = branch
            .part_features(
                &tape,
                tape.constant_of(&f_cls),
                tape.constant_of(&f_patch),
                &m,
                &TcssConfig::default(),
                None,
            )
            .unwrap();
        assert_eq!(feats[0].value().as_ref(), feats[1].value().as_ref());
    }
}

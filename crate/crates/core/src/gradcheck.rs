//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker owns nothing about the function under test: it is handed a
//! named parameter set and a closure that rebuilds the scalar graph from the
//! current parameter values, so the numeric side perturbs coordinates and
//! re-evaluates while the analytic side runs one backward pass.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::rng::Prng;
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

/// Named parameters for a scalar function under check.
pub type ParamSet<F> = BTreeMap<String, Tensor<F>>;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinates probed per parameter tensor (all of them if smaller).
    pub coords_per_param: usize,
    /// Seed for coordinate subsampling, so CI runs are stable.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-6,
            coords_per_param: 64,
            seed: 0x9e3779b97f4a7c15,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub per_parameter: Vec<(String, f64)>,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compare reverse-mode gradients against `(f(x+eps) - f(x-eps)) / 2 eps`.
///
/// `build` must be deterministic in the parameter values; this is verified by
/// evaluating the function twice up front.
pub fn gradient_check<F, B>(
    params: &mut ParamSet<F>,
    mut build: B,
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Real,
    B: for<'t> FnMut(&'t Tape<F>, &ParamSet<F>) -> Var<'t, F>,
{
    if !(cfg.epsilon > 0.0 && cfg.epsilon <= 1e-2) {
        return Err(CoreError::invalid(format!(
            "epsilon must lie in (0, 1e-2], got {}",
            cfg.epsilon
        )));
    }
    let eval = |params: &ParamSet<F>, build: &mut B| -> f64 {
        let tape = Tape::new();
        let root = build(&tape, params);
        root.item().as_f64()
    };

    let v0 = eval(params, &mut build);
    let v1 = eval(params, &mut build);
    if v0.to_bits() != v1.to_bits() {
        return Err(CoreError::NonDeterministic {
            context: format!("two evaluations gave {v0} and {v1}"),
        });
    }

    // Analytic gradients, one backward pass.
    let tape = Tape::new();
    let root = build(&tape, params);
    let grads = tape.backward(root);
    let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, t) in params.iter() {
        let g = grads
            .of_tensor(t)
            .map(|g| g.iter().map(|v| v.as_f64()).collect())
            .unwrap_or_else(|| alloc::vec![0.0; t.numel()]);
        analytic.insert(name.clone(), g);
    }
    drop(tape);

    let mut rng = Prng::seed_from_u64(cfg.seed);
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut per_parameter = Vec::new();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let n = params[&name].numel();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            let mut set: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut set);
            set.truncate(cfg.coords_per_param);
            set.sort_unstable();
            set
        };
        let mut param_rel = 0.0f64;
        for &c in &coords {
            let original = params.get_mut(&name).unwrap().values_mut()[c];
            let eps = F::from_f64(cfg.epsilon);
            params.get_mut(&name).unwrap().values_mut()[c] = original + eps;
            let plus = eval(params, &mut build);
            params.get_mut(&name).unwrap().values_mut()[c] = original - eps;
            let minus = eval(params, &mut build);
            params.get_mut(&name).unwrap().values_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let a = analytic[&name][c];
            max_abs = max_abs.max((a - numeric).abs());
            param_rel = param_rel.max(rel_error(a, numeric));
        }
        max_rel = max_rel.max(param_rel);
        per_parameter.push((name, param_rel));
    }

    Ok(GradReport {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        per_parameter,
    })
}

/// Re-draw every trainable tensor at a well-conditioned random point:
/// fan-in-scaled uniform weights, moderate biases, gains near one. The
/// training init is deliberately tiny, which leaves many coordinates with
/// gradients too small for finite differences to resolve; differentiation
/// correctness is independent of the point, so checks run here.
pub fn randomize_params<F: Real, M: crate::params::ParamVisit<F>>(model: &mut M, rng: &mut Prng) {
    model.visit_params_mut("", &mut |path, t, kind| {
        if kind != crate::params::ParamKind::Trainable {
            return;
        }
        let shape = t.shape().to_vec();
        if path.ends_with(".gamma") {
            for v in t.values_mut() {
                *v = rng.uniform(F::from_f64(0.8), F::from_f64(1.2));
            }
        } else if path.ends_with(".beta") || path.ends_with(".bias") {
            for v in t.values_mut() {
                *v = rng.uniform(F::from_f64(-0.1), F::from_f64(0.1));
            }
        } else {
            let fan_in = match shape.len() {
                2 => shape[0],
                3 => shape[1] * shape[2],
                4 => shape[1] * shape[2] * shape[3],
                _ => shape.iter().product(),
            };
            let bound = crate::scalar::f64math::sqrt(1.5 / fan_in as f64);
            for v in t.values_mut() {
                *v = rng.uniform(F::from_f64(-bound), F::from_f64(bound));
            }
        }
    });
}

/// Gradient check over every trainable tensor of a model (anything
/// implementing the param visitor), comparing one backward pass against
/// central differences with seeded coordinate subsampling.
///
/// The `build` closure must bind parameters through `tape.param` (the model
/// forward paths do) and return the scalar loss.
pub fn model_gradient_check<F, M, B>(model: &mut M, build: B, cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Real,
    M: crate::params::ParamVisit<F> + Clone + Send + Sync,
    B: for<'t> Fn(&'t Tape<F>, &M) -> Var<'t, F> + Sync,
{
    use crate::params::ParamKind;

    if !(cfg.epsilon > 0.0 && cfg.epsilon <= 1e-2) {
        return Err(CoreError::invalid(format!(
            "epsilon must lie in (0, 1e-2], got {}",
            cfg.epsilon
        )));
    }
    let eval = |model: &M| -> f64 {
        let tape = Tape::new();
        build(&tape, model).item().as_f64()
    };
    let v0 = eval(model);
    let v1 = eval(model);
    if v0.to_bits() != v1.to_bits() {
        return Err(CoreError::NonDeterministic {
            context: format!("two evaluations gave {v0} and {v1}"),
        });
    }

    let tape = Tape::new();
    let root = build(&tape, model);
    let grads = tape.backward(root);
    let mut analytic: alloc::collections::BTreeMap<String, Vec<f64>> =
        alloc::collections::BTreeMap::new();
    let mut sizes: Vec<(String, usize)> = Vec::new();
    model.visit_params("", &mut |path, t, kind| {
        if kind != ParamKind::Trainable {
            return;
        }
        let g = grads
            .of_tensor(t)
            .map(|g| g.iter().map(|v| v.as_f64()).collect())
            .unwrap_or_else(|| alloc::vec![0.0; t.numel()]);
        sizes.push((path.clone(), t.numel()));
        analytic.insert(path, g);
    });
    drop(tape);

    let set_coord = |model: &mut M, path: &str, coord: usize, value: F| {
        model.visit_params_mut("", &mut |p, t, kind| {
            if kind == ParamKind::Trainable && p == path {
                t.values_mut()[coord] = value;
            }
        });
    };
    let get_coord = |model: &M, path: &str, coord: usize| -> F {
        let mut out = None;
        model.visit_params("", &mut |p, t, kind| {
            if kind == ParamKind::Trainable && p == path {
                out = Some(t.values()[coord]);
            }
        });
        out.expect("path exists")
    };

    // Probe list, then central differences; probes are independent and run
    // on cloned models in parallel when the feature is on.
    let mut rng = Prng::seed_from_u64(cfg.seed);
    let mut jobs: Vec<(usize, usize)> = Vec::new(); // (param index, coord)
    for (pi, (_, numel)) in sizes.iter().enumerate() {
        let coords: Vec<usize> = if *numel <= cfg.coords_per_param {
            (0..*numel).collect()
        } else {
            let mut set: Vec<usize> = (0..*numel).collect();
            rng.shuffle(&mut set);
            set.truncate(cfg.coords_per_param);
            set.sort_unstable();
            set
        };
        jobs.extend(coords.into_iter().map(|c| (pi, c)));
    }

    let eps = F::from_f64(cfg.epsilon);
    let probe = |local: &mut M, path: &str, c: usize| -> f64 {
        let original = get_coord(local, path, c);
        set_coord(local, path, c, original + eps);
        let plus = eval(local);
        set_coord(local, path, c, original - eps);
        let minus = eval(local);
        set_coord(local, path, c, original);
        (plus - minus) / (2.0 * cfg.epsilon)
    };

    #[cfg(feature = "parallel")]
    let numeric: Vec<f64> = {
        use rayon::prelude::*;
        let threads = rayon::current_num_threads().max(1);
        let chunk = jobs.len().div_ceil(threads).max(1);
        jobs.par_chunks(chunk)
            .map(|chunk_jobs| {
                let mut local = model.clone();
                chunk_jobs
                    .iter()
                    .map(|&(pi, c)| probe(&mut local, &sizes[pi].0, c))
                    .collect::<Vec<f64>>()
            })
            .flatten()
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let numeric: Vec<f64> = jobs
        .iter()
        .map(|&(pi, c)| probe(model, &sizes[pi].0, c))
        .collect();

    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut per_parameter: Vec<(String, f64)> =
        sizes.iter().map(|(p, _)| (p.clone(), 0.0f64)).collect();
    for (&(pi, c), &num) in jobs.iter().zip(&numeric) {
        let a = analytic[&sizes[pi].0][c];
        max_abs = max_abs.max((a - num).abs());
        let rel = rel_error(a, num);
        per_parameter[pi].1 = per_parameter[pi].1.max(rel);
        max_rel = max_rel.max(rel);
    }
    Ok(GradReport {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        per_parameter,
    })
}

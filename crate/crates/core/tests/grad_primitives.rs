//! Finite-difference verification of every differentiable primitive on
//! random small shapes.

use std::collections::BTreeMap;

use keyreid_core::gradcheck::{gradient_check, GradCheckConfig, ParamSet};
use keyreid_core::rng::Prng;
use keyreid_core::tensor::{concat_cols, concat_rows, Tape, Tensor, Var};

fn rand_tensor(shape: Vec<usize>, rng: &mut Prng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn check<B>(name: &str, params: &mut ParamSet<f64>, build: B)
where
    B: for<'t> FnMut(&'t Tape<f64>, &ParamSet<f64>) -> Var<'t, f64>,
{
    let cfg = GradCheckConfig {
        epsilon: 1e-5,
        tolerance: 1e-6,
        coords_per_param: 64,
        seed: 7,
    };
    let report = gradient_check(params, build, &cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(
        report.max_rel_error < 1e-6,
        "{name}: rel error {} exceeds 1e-6\n{:?}",
        report.max_rel_error,
        report.per_parameter
    );
}

fn params2(a: Tensor<f64>, b: Tensor<f64>) -> ParamSet<f64> {
    let mut p = BTreeMap::new();
    p.insert("a".to_string(), a);
    p.insert("b".to_string(), b);
    p
}

fn params1(a: Tensor<f64>) -> ParamSet<f64> {
    let mut p = BTreeMap::new();
    p.insert("a".to_string(), a);
    p
}

/// Weighted sum makes the scalar sensitive to every output coordinate.
fn spread<'t>(v: Var<'t, f64>) -> Var<'t, f64> {
    let n = v.numel();
    let weights: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f64) / 11.0).collect();
    v.reshape(&[n]).mul_values(&weights).sum()
}

#[test]
fn elementwise_ops() {
    let mut rng = Prng::seed_from_u64(1);
    let mut p = params2(rand_tensor(vec![3, 4], &mut rng), rand_tensor(vec![3, 4], &mut rng));
    check("add", &mut p.clone(), |t, p| {
        spread(t.param(&p["a"]).add(t.param(&p["b"])))
    });
    check("sub", &mut p.clone(), |t, p| {
        spread(t.param(&p["a"]).sub(t.param(&p["b"])))
    });
    check("mul", &mut p, |t, p| {
        spread(t.param(&p["a"]).mul(t.param(&p["b"])))
    });

    let mut p = params1(rand_tensor(vec![4, 3], &mut rng));
    check("scale", &mut p, |t, p| spread(t.param(&p["a"]).scale(-1.7)));

    let mut p = params1(rand_tensor(vec![5, 2], &mut rng));
    check("relu", &mut p, |t, p| spread(t.param(&p["a"]).relu()));
    let mut p = params1(rand_tensor(vec![5, 2], &mut rng));
    check("gelu", &mut p, |t, p| spread(t.param(&p["a"]).gelu()));

    let mut p = params1(Tensor::uniform(vec![6], 0.5, 2.0, &mut rng));
    check("sqrt", &mut p, |t, p| spread(t.param(&p["a"]).sqrt_elem()));

    let mut p = params1(rand_tensor(vec![7], &mut rng));
    check("clamp_min", &mut p, |t, p| {
        spread(t.param(&p["a"]).clamp_min(0.1))
    });

    let mut rng2 = Prng::seed_from_u64(9);
    let w: Vec<f64> = (0..12).map(|_| rng2.uniform(-1.0, 1.0)).collect();
    let mut p = params1(rand_tensor(vec![3, 4], &mut rng));
    check("mul_values", &mut p, |t, p| {
        spread(t.param(&p["a"]).mul_values(&w))
    });

    let rw: Vec<f64> = (0..3).map(|_| rng2.uniform(0.0, 2.0)).collect();
    let mut p = params1(rand_tensor(vec![3, 4], &mut rng));
    check("scale_rows", &mut p, |t, p| {
        spread(t.param(&p["a"]).scale_rows(&rw))
    });

    let mut p = params2(rand_tensor(vec![4, 3], &mut rng), rand_tensor(vec![3], &mut rng));
    check("add_row", &mut p, |t, p| {
        spread(t.param(&p["a"]).add_row(t.param(&p["b"])))
    });
}

#[test]
fn matmul_ops() {
    let mut rng = Prng::seed_from_u64(2);
    let mut p = params2(rand_tensor(vec![3, 4], &mut rng), rand_tensor(vec![4, 5], &mut rng));
    check("matmul", &mut p, |t, p| {
        spread(t.param(&p["a"]).matmul(t.param(&p["b"])))
    });
    let mut p = params2(rand_tensor(vec![3, 4], &mut rng), rand_tensor(vec![5, 4], &mut rng));
    check("matmul_nt", &mut p, |t, p| {
        spread(t.param(&p["a"]).matmul_nt(t.param(&p["b"])))
    });
}

#[test]
fn shape_ops() {
    let mut rng = Prng::seed_from_u64(3);
    let mut p = params1(rand_tensor(vec![2, 3, 4], &mut rng));
    check("reshape", &mut p, |t, p| {
        spread(t.param(&p["a"]).reshape(&[6, 4]))
    });
    let mut p = params1(rand_tensor(vec![2, 3, 4], &mut rng));
    check("permute", &mut p, |t, p| {
        spread(t.param(&p["a"]).permute(&[2, 0, 1]))
    });
    let mut p = params1(rand_tensor(vec![4, 5], &mut rng));
    check("transpose", &mut p, |t, p| spread(t.param(&p["a"]).transpose()));
    let mut p = params1(rand_tensor(vec![6, 3], &mut rng));
    check("slice_rows", &mut p, |t, p| {
        spread(t.param(&p["a"]).slice_rows(1, 3))
    });
    let mut p = params1(rand_tensor(vec![3, 6], &mut rng));
    check("slice_cols", &mut p, |t, p| {
        spread(t.param(&p["a"]).slice_cols(2, 3))
    });
    let mut p = params1(rand_tensor(vec![4, 3], &mut rng));
    check("gather_rows", &mut p, |t, p| {
        spread(t.param(&p["a"]).gather_rows(&[2, 0, 2, 3]))
    });
    let mut p = params2(rand_tensor(vec![2, 3], &mut rng), rand_tensor(vec![4, 3], &mut rng));
    check("concat_rows", &mut p, |t, p| {
        spread(concat_rows(t, &[t.param(&p["a"]), t.param(&p["b"])]))
    });
    let mut p = params2(rand_tensor(vec![3, 2], &mut rng), rand_tensor(vec![3, 4], &mut rng));
    check("concat_cols", &mut p, |t, p| {
        spread(concat_cols(t, &[t.param(&p["a"]), t.param(&p["b"])]))
    });
}

#[test]
fn normalization_ops() {
    let mut rng = Prng::seed_from_u64(4);
    let mut p = params1(rand_tensor(vec![3, 5], &mut rng));
    check("softmax_rows", &mut p, |t, p| {
        spread(t.param(&p["a"]).softmax_rows())
    });
    let mut p = params1(rand_tensor(vec![3, 5], &mut rng));
    check("log_softmax_rows", &mut p, |t, p| {
        spread(t.param(&p["a"]).log_softmax_rows())
    });

    let mut p = params2(rand_tensor(vec![4, 6], &mut rng), rand_tensor(vec![6], &mut rng));
    p.insert("beta".to_string(), rand_tensor(vec![6], &mut rng));
    check("layer_norm", &mut p, |t, p| {
        spread(t.param(&p["a"]).layer_norm(t.param(&p["b"]), t.param(&p["beta"]), 1e-5))
    });

    let mut p = params2(rand_tensor(vec![5, 4], &mut rng), rand_tensor(vec![4], &mut rng));
    p.insert("beta".to_string(), rand_tensor(vec![4], &mut rng));
    check("batch_norm_train", &mut p, |t, p| {
        let (y, _) = t
            .param(&p["a"])
            .batch_norm_train(t.param(&p["b"]), t.param(&p["beta"]), 1e-5);
        spread(y)
    });

    let rm = [0.1, -0.2, 0.3, 0.05];
    let rv = [1.1, 0.9, 1.3, 0.7];
    let mut p = params2(rand_tensor(vec![5, 4], &mut rng), rand_tensor(vec![4], &mut rng));
    p.insert("beta".to_string(), rand_tensor(vec![4], &mut rng));
    check("batch_norm_eval", &mut p, |t, p| {
        spread(
            t.param(&p["a"])
                .batch_norm_eval(t.param(&p["b"]), t.param(&p["beta"]), &rm, &rv, 1e-5),
        )
    });
}

#[test]
fn conv_ops() {
    let mut rng = Prng::seed_from_u64(5);
    let mut p = params2(
        rand_tensor(vec![2, 5, 4], &mut rng),
        rand_tensor(vec![3, 2, 3, 3], &mut rng),
    );
    p.insert("bias".to_string(), rand_tensor(vec![3], &mut rng));
    check("conv2d_same", &mut p, |t, p| {
        spread(
            t.param(&p["a"])
                .conv2d_same(t.param(&p["b"]), t.param(&p["bias"])),
        )
    });

    let mut p = params2(
        rand_tensor(vec![3, 7], &mut rng),
        rand_tensor(vec![2, 3, 3], &mut rng),
    );
    p.insert("bias".to_string(), rand_tensor(vec![2], &mut rng));
    check("conv1d_same", &mut p, |t, p| {
        spread(
            t.param(&p["a"])
                .conv1d_same(t.param(&p["b"]), t.param(&p["bias"])),
        )
    });
}

#[test]
fn reduction_ops() {
    let mut rng = Prng::seed_from_u64(6);
    let mut p = params1(rand_tensor(vec![3, 4], &mut rng));
    check("sum", &mut p, |t, p| t.param(&p["a"]).sum());
    let mut p = params1(rand_tensor(vec![3, 4], &mut rng));
    check("mean", &mut p, |t, p| t.param(&p["a"]).mean());
    let mut p = params1(rand_tensor(vec![2, 3, 4], &mut rng));
    check("mean_last_axis", &mut p, |t, p| {
        spread(t.param(&p["a"]).mean_last_axis())
    });
    let mut p = params1(rand_tensor(vec![5], &mut rng));
    check("l2_norm", &mut p, |t, p| t.param(&p["a"]).l2_norm());
}

#[test]
fn grad_shapes_match_parameter_shapes() {
    let mut rng = Prng::seed_from_u64(8);
    let a = rand_tensor(vec![3, 4], &mut rng);
    let b = rand_tensor(vec![4, 2], &mut rng);
    let tape = Tape::new();
    let va = tape.param(&a);
    let vb = tape.param(&b);
    let loss = va.matmul(vb).gelu().sum();
    let grads = tape.backward(loss);
    let mut a2 = a;
    let mut b2 = b;
    a2.install_grad(&grads);
    b2.install_grad(&grads);
    assert_eq!(a2.grad().unwrap().len(), a2.numel());
    assert_eq!(b2.grad().unwrap().len(), b2.numel());
}

//! Finite-difference checks for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Reduces `out` to a scalar with a fixed random weighting so every output
/// element contributes to the checked gradient.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let wv = g.constant(w);
    let prod = g.mul(out, wv).unwrap();
    g.sum(prod)
}

fn eval_loss(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::eval();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = weighted_sum(&mut g, out, 99);
    g.value(loss).item()
}

/// Max relative error between analytic and central-difference gradients.
fn max_rel_error(build: &Build, inputs: &[Tensor]) -> f64 {
    let h = 1e-5;
    let mut g = Graph::eval();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = weighted_sum(&mut g, out, 99);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(|s| s.to_vec()).unwrap_or(vec![0.0; t.len()]);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval_loss(build, &plus) - eval_loss(build, &minus)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn check(name: &str, shapes: &[&[usize]], build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..20 {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let err = max_rel_error(build, &inputs);
        assert!(err < 1e-3, "{name} trial {trial}: relative error {err}");
    }
}

#[test]
fn grad_matmul() {
    check("matmul", &[&[2, 3, 4], &[4, 5]], &|g, v| g.matmul(v[0], v[1]).unwrap());
}

#[test]
fn grad_bmm() {
    check("bmm", &[&[2, 3, 4], &[2, 4, 2]], &|g, v| g.bmm(v[0], v[1]).unwrap());
}

#[test]
fn grad_add_sub_mul_broadcast() {
    check("add", &[&[3, 4], &[4]], &|g, v| g.add(v[0], v[1]).unwrap());
    check("sub", &[&[2, 3, 4], &[3, 4]], &|g, v| g.sub(v[0], v[1]).unwrap());
    check("mul", &[&[3, 4], &[3, 4]], &|g, v| g.mul(v[0], v[1]).unwrap());
    check("mul_b", &[&[2, 3], &[3]], &|g, v| g.mul(v[0], v[1]).unwrap());
}

#[test]
fn grad_shape_ops() {
    check("concat", &[&[2, 3], &[2, 1]], &|g, v| {
        g.concat(&[v[0], v[1]], 1).unwrap()
    });
    check("concat0", &[&[2, 3, 2], &[1, 3, 2]], &|g, v| {
        g.concat(&[v[0], v[1]], 0).unwrap()
    });
    check("stack", &[&[2, 3], &[2, 3]], &|g, v| g.stack(&[v[0], v[1]], 1).unwrap());
    check("slice", &[&[3, 5, 2]], &|g, v| g.slice(v[0], 1, 1, 3).unwrap());
    check("transpose", &[&[2, 3, 4]], &|g, v| g.transpose(v[0]).unwrap());
    check("reshape", &[&[2, 6]], &|g, v| g.reshape(v[0], vec![3, 4]).unwrap());
    check("scale", &[&[4]], &|g, v| {
        let s = g.scale(v[0], -1.5);
        g.add_scalar(s, 0.25)
    });
}

#[test]
fn grad_activations() {
    check("relu", &[&[3, 4]], &|g, v| g.relu(v[0]));
    check("sigmoid", &[&[3, 4]], &|g, v| g.sigmoid(v[0]));
    check("softmax", &[&[3, 4]], &|g, v| g.softmax(v[0], 1).unwrap());
    check("softmax0", &[&[3, 4, 2]], &|g, v| g.softmax(v[0], 1).unwrap());
    check("layer_norm", &[&[3, 5]], &|g, v| g.layer_norm(v[0], 1, 1e-5).unwrap());
    check("layer_norm_mid", &[&[2, 4, 3]], &|g, v| {
        g.layer_norm(v[0], 1, 1e-5).unwrap()
    });
}

#[test]
fn grad_reductions() {
    check("sum", &[&[3, 4]], &|g, v| g.sum(v[0]));
    check("mean", &[&[3, 4]], &|g, v| g.mean(v[0]));
    check("sum_axis", &[&[3, 4, 2]], &|g, v| g.sum_axis(v[0], 1).unwrap());
    check("mean_axis", &[&[3, 4]], &|g, v| g.mean_axis(v[0], 0).unwrap());
    check("max_axis", &[&[3, 4, 2]], &|g, v| g.max_axis(v[0], 1).unwrap());
}

#[test]
fn grad_lookup_ops() {
    check("gather", &[&[5, 3]], &|g, v| g.gather(v[0], &[4, 0, 4, 2]).unwrap());
    check("positional_embed", &[&[2, 3], &[3, 4]], &|g, v| {
        g.positional_embed(v[0], v[1]).unwrap()
    });
}

#[test]
fn grad_losses() {
    let target = Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.0, 2.0, 1.0, -0.5]).unwrap();
    check("mse", &[&[2, 3]], &move |g, v| g.mse(v[0], &target).unwrap());
    check("cross_entropy", &[&[4, 3]], &|g, v| {
        g.cross_entropy(v[0], &[Some(0), None, Some(2), Some(1)], &[1.0, 1.0, 3.0, 0.5])
            .unwrap()
    });
}

#[test]
fn grad_matmul_softmax_composite() {
    check("composite", &[&[3, 3], &[3, 3]], &|g, v| {
        let m = g.matmul(v[0], v[1]).unwrap();
        g.softmax(m, 1).unwrap()
    });
}

#[test]
fn grad_dropout_matches_mask() {
    let mut g = Graph::new(true, 5);
    let x = g.input(Tensor::full(&[100], 1.0));
    let y = g.dropout(x, 0.5);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), g.value(y).data());
}

#[test]
fn square_gradient() {
    let mut g = Graph::eval();
    let x = g.input(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    assert_eq!(g.backward(loss).unwrap().wrt(x).unwrap(), &[6.0]);
}

#[test]
fn relu_subgradient() {
    let mut g = Graph::eval();
    let x = g.input(Tensor::vector(vec![-1.0, 2.0]));
    let r = g.relu(x);
    let loss = g.sum(r);
    assert_eq!(g.backward(loss).unwrap().wrt(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::eval();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(NumericError::NonScalarLoss(_))));
}

#[test]
fn forward_values() {
    let mut g = Graph::eval();
    let a = g.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::matrix(&[vec![1.0], vec![1.0]]).unwrap());
    let m = g.matmul(a, b).unwrap();
    assert_eq!(g.value(m).data(), &[3.0, 7.0]);

    let z = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let s = g.softmax(z, 0).unwrap();
    assert!(g.value(s).data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

    let c = g.constant(Tensor::vector(vec![4.0, 4.0, 4.0, 4.0]));
    let n = g.layer_norm(c, 0, 1e-5).unwrap();
    assert!(g.value(n).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_standardizes() {
    let mut g = Graph::eval();
    let x = g.constant(Tensor::matrix(&[vec![1.0, 5.0, -2.0, 0.5]]).unwrap());
    let y = g.layer_norm(x, 1, 1e-5).unwrap();
    let d = g.value(y).data();
    let mean = d.iter().sum::<f64>() / 4.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-5);
}

#[test]
fn dropout_identity_in_eval() {
    let mut g = Graph::eval();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert_eq!(g.dropout(x, 0.9), x);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut g = Graph::eval();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(NumericError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}", other = other.map(|_| ())),
    }
}

#[test]
fn gather_out_of_range() {
    let mut g = Graph::eval();
    let t = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.gather(t, &[2]), Err(NumericError::IndexOutOfRange { .. })));
}

#[test]
fn masked_softmax_ignores_neg_infinity() {
    let mut g = Graph::eval();
    let x = g.constant(Tensor::vector(vec![0.3, f64::NEG_INFINITY, -0.2]));
    let s = g.softmax(x, 0).unwrap();
    let d = g.value(s).data();
    assert_eq!(d[1], 0.0);
    assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_normalized(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut g = Graph::eval();
            let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
            let s = g.softmax(x, 1).unwrap();
            for r in 0..3 {
                let row = g.value(s).row(r);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

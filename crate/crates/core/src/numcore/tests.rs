use proptest::prelude::*;

use super::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[0.0f64; 4]).unwrap(), vec![0.25; 4]);
    let p = softmax(&[0.0f64, 2f64.ln()]).unwrap();
    assert!((p[0] - 1.0 / 3.0).abs() < 1e-6 && (p[1] - 2.0 / 3.0).abs() < 1e-6);
    let v = [0.3f64, -1.2, 4.0];
    let shifted: Vec<f64> = v.iter().map(|x| x + 17.5).collect();
    let (a, b) = (softmax(&v).unwrap(), softmax(&shifted).unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_non_finite_and_names_node() {
    assert!(softmax(&[0.0f64, f64::NAN]).is_err());
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[2], &[1.0, f64::INFINITY]));
    let y = g.scale(x, 2.0);
    let err = g.softmax(y).unwrap_err().to_string();
    assert!(err.contains("#1") && err.contains("scale"), "{err}");
}

#[test]
fn cross_entropy_examples() {
    let uniform = [0.0f64; 20];
    for label in [0, 7, 19] {
        assert!((cross_entropy_from_logits(&uniform, label).unwrap() - 20f64.ln()).abs() < 1e-12);
    }
    let mut peaked = [0.0f64; 20];
    peaked[3] = 50.0;
    assert!(cross_entropy_from_logits(&peaked, 3).unwrap() < 1e-6);
    let l = cross_entropy_from_logits(&[1.0f64, 2.0, 3.0], 1).unwrap();
    assert!((l - 1.4076).abs() < 1e-4, "{l}");
    assert!(cross_entropy_from_logits(&[1.0f64, 2.0], 2).is_err());
}

fn ln_rows(x: &[f64], w: usize) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.constant(t64(&[x.len() / w, w], x));
    let gain = g.constant(t64(&[w], &vec![1.0; w]));
    let bias = g.constant(t64(&[w], &vec![0.0; w]));
    let y = g.layer_norm(xv, gain, bias, 1e-12).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[4], &[5.0; 4]));
    let gain = g.constant(t64(&[4], &[1.0; 4]));
    let bias = g.constant(t64(&[4], &[0.0; 4]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);

    let y = ln_rows(&[1.0, -1.0], 2);
    assert!((y[0] - 1.0).abs() < 1e-9 && (y[1] + 1.0).abs() < 1e-9);

    let y = ln_rows(&[0.0, 2.0, 4.0, 6.0], 4);
    for (a, b) in y.iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn backward_linear_and_quadratic() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t64(&[3], &[1.5, -2.0, 0.25]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.input(t64(&[3], &[1.5, -2.0, 0.25]), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0, -4.0, 0.5]);
    // a second call accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0, -8.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t64(&[2], &[1.0, 2.0]), true);
    assert!(matches!(g.backward(x), Err(NumError::NonScalarLoss(_))));
}

/// Central-difference check of `build` with respect to its single input.
fn check_grad(shape: &[usize], x0: &[f64], build: impl Fn(&mut Graph<f64>, Var) -> Var) {
    let mut g = Graph::<f64>::new();
    let x = g.input(t64(shape, x0), true);
    let loss = build(&mut g, x);
    g.backward(loss).unwrap();
    let analytic = g.grad(x).unwrap().to_vec();
    let h = 1e-5;
    for i in 0..x0.len() {
        let eval = |delta: f64| {
            let mut xs = x0.to_vec();
            xs[i] += delta;
            let mut g = Graph::<f64>::new();
            let x = g.input(t64(shape, &xs), false);
            let l = build(&mut g, x);
            g.scalar(l)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3);
        assert!(err < 1e-6, "element {i}: analytic {} numeric {numeric}", analytic[i]);
    }
}

fn weights(n: usize, seed: u64) -> Vec<f64> {
    (0..n)
        .map(|i| (((i as u64 + 1) * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0)
        .collect()
}

#[test]
fn op_gradients_match_finite_differences() {
    let x0 = weights(12, 1);
    // matmul both sides, with and without transposition, plus batched form
    check_grad(&[3, 4], &x0, |g, x| {
        let w = g.constant(t64(&[4, 2], &weights(8, 2)));
        let y = g.matmul(x, w).unwrap();
        let y2 = g.mul(y, y).unwrap();
        g.sum(y2)
    });
    check_grad(&[3, 4], &x0, |g, x| {
        let a = g.constant(t64(&[2, 3], &weights(6, 3)));
        let y = g.matmul(a, x).unwrap();
        let y2 = g.mul(y, y).unwrap();
        g.sum(y2)
    });
    check_grad(&[2, 2, 3], &x0, |g, x| {
        let q = g.constant(t64(&[2, 4, 3], &weights(24, 4)));
        let s = g.matmul_ext(q, x, true).unwrap();
        let p = g.softmax(s).unwrap();
        let w = g.constant(t64(&[2, 4, 2], &weights(16, 5)));
        let z = g.mul(p, w).unwrap();
        g.sum(z)
    });
    check_grad(&[3, 4], &x0, |g, x| {
        let k = g.constant(t64(&[3, 4], &weights(12, 9)));
        let s = g.matmul_ext(k, x, true).unwrap();
        let s2 = g.mul(s, s).unwrap();
        g.sum(s2)
    });
    // layer norm through input, gain and bias
    check_grad(&[3, 4], &x0, |g, x| {
        let gain = g.constant(t64(&[4], &[1.0, 0.5, -2.0, 1.5]));
        let bias = g.constant(t64(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let w = g.constant(t64(&[3, 4], &weights(12, 6)));
        let z = g.mul(y, w).unwrap();
        g.sum(z)
    });
    check_grad(&[4], &x0[..4], |g, gain| {
        let x = g.constant(t64(&[3, 4], &weights(12, 7)));
        let bias = g.constant(t64(&[4], &[0.0; 4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let w = g.constant(t64(&[3, 4], &weights(12, 8)));
        let z = g.mul(y, w).unwrap();
        g.sum(z)
    });
    // gelu, permute, gather, concat, broadcast add, sub, scale, cross entropy
    check_grad(&[2, 3, 2], &x0, |g, x| {
        let y = g.gelu(x);
        let p = g.permute(y, &[2, 0, 1]).unwrap();
        let r = g.reshape(p, vec![4, 3]).unwrap();
        let rows = g.gather_rows(r, &[3, 0, 3]).unwrap();
        let c = g.concat(rows, rows).unwrap();
        let b = g.constant(t64(&[6], &weights(6, 11)));
        let c = g.add(c, b).unwrap();
        let d = g.sub(c, c).unwrap();
        let d = g.add(d, c).unwrap();
        let d = g.scale(d, 0.7);
        g.cross_entropy(d, &[1, 5, 0]).unwrap()
    });
    check_grad(&[4], &x0[..4], |g, b| {
        let x = g.constant(t64(&[3, 4], &weights(12, 12)));
        let y = g.add(x, b).unwrap();
        g.cross_entropy(y, &[0, 1, 3]).unwrap()
    });
}

#[test]
fn dropout_scales_kept_units() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t64(&[4], &[1.0, 2.0, 3.0, 4.0]), true);
    let y = g.dropout(x, &[true, false, true, false], 0.5).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 0.0, 6.0, 0.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 0.0, 2.0, 0.0]);
}

#[test]
fn gather_out_of_range_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[2, 2], &[0.0; 4]));
    assert!(matches!(g.gather_rows(x, &[2]), Err(NumError::Index { .. })));
}

#[test]
fn tensor_shape_invariant() {
    assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert_eq!(Tensor::<f32>::zeros(vec![2, 3]).len(), 6);
}

proptest! {
    #[test]
    fn softmax_sums_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
        let p = softmax(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn cross_entropy_non_negative(v in proptest::collection::vec(-50.0f64..50.0, 2..30), pick in 0usize..1000) {
        let label = pick % v.len();
        prop_assert!(cross_entropy_from_logits(&v, label).unwrap() >= 0.0);
    }

    #[test]
    fn layer_norm_shift_invariant(v in proptest::collection::vec(-10.0f64..10.0, 2..16), c in -100.0f64..100.0) {
        prop_assume!(v.iter().any(|&x| (x - v[0]).abs() > 1e-2));
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let a = ln_rows(&v, v.len());
        let b = ln_rows(&shifted, v.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / a.len() as f64;
        prop_assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-4);
    }
}

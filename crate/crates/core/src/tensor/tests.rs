use super::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

fn forward1(t: Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(t);
    let y = f(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// erf by its Maclaurin series; independent of the library's erf.
fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x;
    for n in 0..60 {
        sum += term / (2 * n + 1) as f64;
        term *= -x * x / (n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn matmul_examples() {
    let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let id = g.constant(Tensor::eye(2));
    let zero = g.constant(Tensor::zeros(&[2, 2]));
    let col = g.constant(m(&[&[5.0], &[6.0]]));
    let r1 = g.matmul(av, id).unwrap();
    let r2 = g.matmul(av, zero).unwrap();
    let r3 = g.matmul(av, col).unwrap();
    assert_eq!(g.value(r1), &a);
    assert_eq!(g.value(r2).data(), &[0.0; 4]);
    assert_eq!(g.value(r3).data(), &[17.0, 39.0]);
    assert_eq!(g.shape(r3), &[2, 1]);
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    assert_eq!(err.kind(), "shape");
}

#[test]
fn softmax_examples() {
    let y = forward1(m(&[&[0.0, 0.0]]), |g, x| g.softmax_rows(x)).unwrap();
    close(y.data(), &[0.5, 0.5], 1e-15);

    let y = forward1(m(&[&[1.0, 0.0]]), |g, x| g.softmax_rows(x)).unwrap();
    let e = std::f64::consts::E;
    close(y.data(), &[e / (1.0 + e), 1.0 / (1.0 + e)], 1e-12);
    close(y.data(), &[0.73106, 0.26894], 1e-5);

    let x = m(&[&[0.3, -1.0, 2.5], &[4.0, 4.0, -3.0]]);
    let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + 17.25).collect()).unwrap();
    let a = forward1(x, |g, x| g.softmax_rows(x)).unwrap();
    let b = forward1(shifted, |g, x| g.softmax_rows(x)).unwrap();
    close(a.data(), b.data(), 1e-14);
}

#[test]
fn softmax_rejects_nan() {
    let err = forward1(m(&[&[0.0, f64::NAN]]), |g, x| g.softmax_rows(x)).unwrap_err();
    assert_eq!(err.kind(), "numeric");
}

#[test]
fn layer_norm_examples() {
    let ln = |x: Tensor, eps: f64| {
        let n = x.cols();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::full(&[n], 1.0));
        let beta = g.constant(Tensor::zeros(&[n]));
        let y = g.layer_norm(xv, gamma, beta, eps).unwrap();
        g.value(y).clone()
    };
    close(ln(m(&[&[2.5, 2.5, 2.5]]), 1e-5).data(), &[0.0; 3], 0.0);
    close(ln(m(&[&[1.0, -1.0]]), 1e-14).data(), &[1.0, -1.0], 1e-12);
    let s = 1.5f64.sqrt();
    let y = ln(m(&[&[1.0, 2.0, 3.0]]), 0.0);
    close(y.data(), &[-s, 0.0, s], 1e-12);
    close(y.data(), &[-1.22474, 0.0, 1.22474], 1e-5);
}

#[test]
fn gelu_examples() {
    let y = forward1(m(&[&[0.0, 10.0, 1.0]]), |g, x| Ok(g.gelu(x))).unwrap();
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 10.0).abs() < 1e-6);
    let oracle = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    assert!((y.data()[2] - oracle).abs() < 1e-12);
    assert!((y.data()[2] - 0.84134).abs() < 1e-4);
}

#[test]
fn l2_normalize_examples() {
    let y = forward1(m(&[&[0.6, 0.8], &[3.0, 4.0], &[0.0, 0.0]]), |g, x| {
        g.l2_normalize_rows(x, 1e-12)
    })
    .unwrap();
    close(y.data(), &[0.6, 0.8, 0.6, 0.8, 0.0, 0.0], 1e-15);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let a = g.leaf(m(&[&[1.0, -2.0], &[0.5, 3.0]]), true);
    let s = g.sum_all(a);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_of_sum_of_product() {
    let a = m(&[&[1.0, -2.0, 0.3], &[0.5, 3.0, -1.1]]);
    let b = m(&[&[0.2, 0.7], &[-1.3, 0.4], &[2.2, -0.9]]);
    let mut g = Graph::new();
    let av = g.leaf(a.clone(), true);
    let bv = g.leaf(b.clone(), true);
    let c = g.matmul(av, bv).unwrap();
    let s = g.sum_all(c);
    let grads = g.backward(s).unwrap();
    // d/dA sum(AB) = 1 * B^T: row sums of B, broadcast over rows of A
    let row_sums: Vec<f64> = (0..3).map(|p| b.row(p).iter().sum()).collect();
    let expect: Vec<f64> = (0..2).flat_map(|_| row_sums.clone()).collect();
    close(grads.get(av).unwrap().data(), &expect, 1e-14);

    let report = grad_check(
        |g, p| {
            let c = g.matmul(p[0], p[1])?;
            Ok(g.sum_all(c))
        },
        &[a, b],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn shared_leaf_gradients_add() {
    // f(x) = sum(x * x) + sum(3x); df/dx = 2x + 3
    let x = m(&[&[0.5, -1.5, 2.0]]);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let sq = g.mul(xv, xv).unwrap();
    let lin = g.scale(xv, 3.0);
    let t = g.add(sq, lin).unwrap();
    let s = g.sum_all(t);
    let grads = g.backward(s).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|v| 2.0 * v + 3.0).collect();
    close(grads.get(xv).unwrap().data(), &expect, 0.0);
}

#[test]
fn dag_equals_unrolled_tree() {
    let x = m(&[&[0.3, -0.7], &[1.1, 0.2]]);
    let build = |g: &mut Graph, a: Var, b: Var, c: Var| -> Result<Var> {
        let p = g.matmul(a, b)?;
        let q = g.softmax_rows(p)?;
        let r = g.mul(q, c)?;
        Ok(g.sum_all(r))
    };
    let mut shared = Graph::new();
    let xv = shared.leaf(x.clone(), true);
    let ls = build(&mut shared, xv, xv, xv).unwrap();
    let gs = shared.backward(ls).unwrap();

    let mut tree = Graph::new();
    let x1 = tree.leaf(x.clone(), true);
    let x2 = tree.leaf(x.clone(), true);
    let x3 = tree.leaf(x.clone(), true);
    let lt = build(&mut tree, x1, x2, x3).unwrap();
    let gt = tree.backward(lt).unwrap();
    assert_eq!(shared.scalar(ls).unwrap(), tree.scalar(lt).unwrap());
    let summed: Vec<f64> = (0..4)
        .map(|i| {
            gt.get(x3).unwrap().data()[i] + gt.get(x2).unwrap().data()[i] + gt.get(x1).unwrap().data()[i]
        })
        .collect();
    close(gs.get(xv).unwrap().data(), &summed, 1e-15);
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(&[2, 2]), true);
    let err = g.backward(a).unwrap_err();
    assert_eq!(err.kind(), "contract");
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::new();
    let a = g.leaf(m(&[&[1.0, 2.0]]), true);
    let c = g.constant(m(&[&[3.0, 4.0]]));
    let p = g.mul(a, c).unwrap();
    let s = g.sum_all(p);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn softmax_cross_entropy_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let report = grad_check(
        |g, p| {
            let ls = g.log_softmax_rows(p[0])?;
            let sub = g.slice_cols(ls, 0, 4)?;
            let d = g.diag(sub)?;
            let s = g.sum_all(d);
            Ok(g.scale(s, -0.25))
        },
        &[logits],
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let av = g.constant(a);
        let bv = g.constant(b);
        let s = g.matmul_nt(av, bv).unwrap();
        let p = g.softmax_rows(s).unwrap();
        let q = g.gelu(p);
        g.value(q).clone()
    };
    let (x, y) = (run(), run());
    assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Every differentiable op, reduced to a scalar through a fixed random
/// weighting so no gradient is trivially uniform.
fn op_case(op: usize, g: &mut Graph, p: &[Var]) -> Result<Var> {
    let (a, b, w) = (p[0], p[1], p[2]);
    let out = match op {
        0 => g.matmul_nt(a, b)?,
        1 => {
            let bt = g.transpose(b);
            g.matmul(a, bt)?
        }
        2 => g.add(a, b)?,
        3 => g.sub(a, b)?,
        4 => g.mul(a, b)?,
        5 => {
            let r = g.slice_cols(b, 0, 4)?;
            let r = g.mean_rows(r);
            g.add_row(a, r)?
        }
        6 => {
            let s = g.slice_cols(b, 1, 2)?;
            let s = g.slice_cols(s, 0, 1)?;
            let s = g.mean_rows(s);
            g.scale_by(a, s)?
        }
        7 => g.exp(a),
        8 => g.gelu(a),
        9 => g.softmax_rows(a)?,
        10 => g.log_softmax_rows(a)?,
        11 => {
            let gamma = g.mean_rows(b);
            let bt = g.transpose(b);
            let beta = g.row_max(bt);
            g.layer_norm(a, gamma, beta, 1e-5)?
        }
        12 => g.l2_normalize_rows(a, 1e-9)?,
        13 => g.row_dot(a, b)?,
        14 => g.row_max(a),
        15 => {
            let sq = g.matmul_nt(a, a)?;
            g.zero_diag(sq)?
        }
        16 => {
            let sq = g.matmul_nt(a, b)?;
            g.diag(sq)?
        }
        17 => g.sum_squares(a),
        18 => g.concat_rows(&[a, b, a])?,
        19 => g.concat_cols(&[a, b])?,
        20 => g.gather_rows(a, &[2, 0, 2])?,
        21 => g.reshape(a, &[12])?,
        _ => unreachable!(),
    };
    // weight by a slice of w matching the output size
    let n = g.value(out).numel();
    let flat = g.reshape(out, &[1, n])?;
    let wv = g.reshape(w, &[1, 36])?;
    let ws = g.slice_cols(wv, 0, n.min(36))?;
    let head = g.slice_cols(flat, 0, n.min(36))?;
    let prod = g.mul(head, ws)?;
    Ok(g.sum_all(prod))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_op_matches_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = uniform(&[3, 4], &mut rng);
        let b = uniform(&[3, 4], &mut rng);
        let w = uniform(&[6, 6], &mut rng);
        for op in 0..22 {
            let params = [a.clone(), b.clone(), w.clone()];
            let report = grad_check(|g, p| op_case(op, g, p), &params, 1e-5, 1e-4).unwrap();
            prop_assert!(report.passed, "op {} {:?}", op, report);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, cols], 3.0, &mut rng);
        let y = forward1(x, |g, x| g.softmax_rows(x)).unwrap();
        for r in 0..rows {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(y.row(r).iter().all(|&v| v > 0.0 && v <= 1.0));
            if cols > 1 {
                prop_assert!(y.row(r).iter().all(|&v| v < 1.0));
            }
        }
    }
}

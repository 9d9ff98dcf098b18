use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(matches!(
        Tensor::new(vec![2, 3], vec![0.0; 5]),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn matmul_identity_and_annihilator() {
    let mut g = Graph::new();
    let eye = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let z = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
    let im = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(im), &[1.0, 2.0, 3.0, 4.0]);
    let mz = g.matmul(m, z).unwrap();
    assert_eq!(g.value(mz), &[0.0; 4]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut expect = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a[i * 3 + k] * b[k * 3 + j];
            }
            expect[i * 3 + j] = s;
        }
    }
    let mut g = Graph::new();
    let (va, vb) = (
        g.constant(vec![3, 3], a).unwrap(),
        g.constant(vec![3, 3], b).unwrap(),
    );
    let c = g.matmul(va, vb).unwrap();
    assert!(close(g.value(c), &expect, 1e-15));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    match err {
        Error::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let zero = g.scalar(0.0);
    let t = g.elementwise(Elementwise::Tanh, &[zero]).unwrap();
    let s = g.elementwise(Elementwise::Sigmoid, &[zero]).unwrap();
    assert_eq!(g.item(t), 0.0);
    assert_eq!(g.item(s), 0.5);
    let x = g.constant(vec![2], vec![0.0, 2f64.ln()]).unwrap();
    let e = g.elementwise(Elementwise::Exp, &[x]).unwrap();
    assert!(close(g.value(e), &[1.0, 2.0], 1e-15));
}

#[test]
fn elementwise_broadcasts_scalars_only() {
    let mut g = Graph::new();
    let a = g.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let two = g.scalar(2.0);
    let m = g.elementwise(Elementwise::Mul, &[two, a]).unwrap();
    assert_eq!(g.value(m), &[2.0, 4.0, 6.0]);
    let b = g.constant(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    assert!(matches!(
        g.elementwise(Elementwise::Neg, &[a, b]),
        Err(Error::Usage(_))
    ));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let u = g.constant(vec![3], vec![0.0; 3]).unwrap();
    let su = g.softmax(u, 0).unwrap();
    assert!(close(g.value(su), &[1.0 / 3.0; 3], 1e-15));

    let big = g.constant(vec![3], vec![1000.0, 0.0, 0.0]).unwrap();
    let sb = g.softmax(big, 0).unwrap();
    assert!(g.value(sb).iter().all(|v| v.is_finite()));
    assert!(close(g.value(sb), &[1.0, 0.0, 0.0], 1e-300));

    // e^k / (e + e^2 + e^3), evaluated independently without max-subtraction.
    let x = g.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let sx = g.softmax(x, 0).unwrap();
    let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
    assert!(close(g.value(sx), &expect, 1e-15));
}

#[test]
fn softmax_along_rows_and_columns() {
    let mut g = Graph::new();
    let x = g.constant(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
    for axis in 0..2 {
        let s = g.softmax(x, axis).unwrap();
        let v = g.value(s).to_vec();
        if axis == 1 {
            for row in v.chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        } else {
            for c in 0..3 {
                assert!((v[c] + v[3 + c] - 1.0).abs() < 1e-12);
            }
        }
    }
}

fn gru_params(d_in: usize, d_h: usize, fill: impl Fn(usize) -> f64) -> Vec<Tensor> {
    let mut k = 0;
    let mut next = |n: usize| {
        let v: Vec<f64> = (0..n).map(|i| fill(k + i)).collect();
        k += n;
        v
    };
    vec![
        Tensor::matrix(d_in, 3 * d_h, next(d_in * 3 * d_h)).unwrap(),
        Tensor::matrix(d_h, 3 * d_h, next(d_h * 3 * d_h)).unwrap(),
        Tensor::vector(next(3 * d_h)),
        Tensor::vector(next(3 * d_h)),
    ]
}

fn register<'a>(g: &mut Graph<'a>, p: &'a [Tensor]) -> GruVars {
    GruVars {
        w_ih: g.param(&p[0]),
        w_hh: g.param(&p[1]),
        b_ih: g.param(&p[2]),
        b_hh: g.param(&p[3]),
    }
}

#[test]
fn gru_zero_fixed_point() {
    let p = gru_params(3, 4, |_| 0.0);
    let mut g = Graph::new();
    let vars = register(&mut g, &p);
    let x = g.constant(vec![3], vec![0.0; 3]).unwrap();
    let h = g.constant(vec![4], vec![0.0; 4]).unwrap();
    let out = gru_cell(&mut g, x, h, &vars).unwrap();
    assert_eq!(g.shape(out), &[4]);
    assert_eq!(g.value(out), &[0.0; 4]);
}

#[test]
fn gru_saturated_update_gate_returns_candidate() {
    let (d_in, d_h) = (2, 3);
    let mut p = gru_params(d_in, d_h, |i| ((i * 37 % 11) as f64 - 5.0) * 0.1);
    // Push the update-gate bias far positive so u ≈ 1.
    for j in d_h..2 * d_h {
        p[2].data_mut()[j] = 60.0;
    }
    let x = [0.3, -0.7];
    let h0 = [0.5, -0.2, 0.1];
    let mut g = Graph::new();
    let vars = register(&mut g, &p);
    let xv = g.constant(vec![d_in], x.to_vec()).unwrap();
    let hv = g.constant(vec![d_h], h0.to_vec()).unwrap();
    let out = gru_cell(&mut g, xv, hv, &vars).unwrap();
    let cand = reference_gru(&p, &x, &h0).1;
    assert!(close(g.value(out), &cand, 1e-12));
}

/// Independent single-step GRU evaluation. Returns (h', candidate).
fn reference_gru(p: &[Tensor], x: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (d_in, d_h) = (x.len(), h.len());
    let w = |t: &Tensor, r: usize, c: usize| t.data()[r * 3 * d_h + c];
    let gate = |block: usize, j: usize| -> (f64, f64) {
        let c = block * d_h + j;
        let mut xi = p[2].data()[c];
        for r in 0..d_in {
            xi += x[r] * w(&p[0], r, c);
        }
        let mut hi = p[3].data()[c];
        for r in 0..d_h {
            hi += h[r] * w(&p[1], r, c);
        }
        (xi, hi)
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut next = vec![0.0; d_h];
    let mut cand = vec![0.0; d_h];
    for j in 0..d_h {
        let (xr, hr) = gate(0, j);
        let (xu, hu) = gate(1, j);
        let (xn, hn) = gate(2, j);
        let r = sig(xr + hr);
        let u = sig(xu + hu);
        let n = (xn + r * hn).tanh();
        cand[j] = n;
        next[j] = (1.0 - u) * h[j] + u * n;
    }
    (next, cand)
}

#[test]
fn gru_matches_hand_rolled_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d_in, d_h) = (3, 5);
    let vals: Vec<f64> = (0..200).map(|_| rng.random_range(-0.5..0.5)).collect();
    let p = gru_params(d_in, d_h, |i| vals[i % vals.len()]);
    let x: Vec<f64> = (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h: Vec<f64> = (0..d_h).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let vars = register(&mut g, &p);
    let xv = g.constant(vec![d_in], x.clone()).unwrap();
    let hv = g.constant(vec![d_h], h.clone()).unwrap();
    let out = gru_cell(&mut g, xv, hv, &vars).unwrap();
    let (expect, _) = reference_gru(&p, &x, &h);
    assert!(close(g.value(out), &expect, 1e-14));
}

#[test]
fn gru_rejects_bad_shapes() {
    let p = gru_params(3, 4, |_| 0.0);
    let mut g = Graph::new();
    let vars = register(&mut g, &p);
    let x = g.constant(vec![2], vec![0.0; 2]).unwrap();
    let h = g.constant(vec![4], vec![0.0; 4]).unwrap();
    assert!(matches!(
        gru_cell(&mut g, x, h, &vars),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn backward_linear_and_quadratic() {
    let x = Tensor::vector(vec![1.0, -2.0, 3.5]).with_grad(true);
    let mut g = Graph::new();
    let xv = g.param(&x);
    let s = g.sum(xv);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(xv).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let xv = g.param(&x);
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(xv).unwrap(), &[2.0, -4.0, 7.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::vector(vec![1.0, 2.0]).with_grad(true);
    let mut g = Graph::new();
    let xv = g.param(&x);
    let y = g.tanh(xv);
    assert!(matches!(g.backward(y), Err(Error::Usage(_))));
}

#[test]
fn unreachable_leaves_get_zero_gradients() {
    let x = Tensor::vector(vec![1.0]).with_grad(true);
    let y = Tensor::vector(vec![2.0, 3.0]).with_grad(true);
    let mut g = Graph::new();
    let xv = g.param(&x);
    let yv = g.param(&y);
    let s = g.sum(xv);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(yv).unwrap(), &[0.0, 0.0]);
}

#[test]
fn min_axis_routes_gradient_to_first_minimum() {
    let x = Tensor::matrix(2, 3, vec![3.0, 1.0, 1.0, 0.0, 5.0, -2.0])
        .unwrap()
        .with_grad(true);
    let mut g = Graph::new();
    let xv = g.param(&x);
    let m = g.min_axis(xv, 1).unwrap();
    assert_eq!(g.value(m), &[1.0, -2.0]);
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(xv).unwrap(), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn cumsum_is_sequential_prefix_sum() {
    let mut g = Graph::new();
    let x = g.constant(vec![3, 2], vec![1.0, 0.5, 2.0, 0.25, -1.0, 1.0]).unwrap();
    let c = g.cumsum(x, 0).unwrap();
    assert_eq!(g.value(c), &[1.0, 0.5, 3.0, 0.75, 2.0, 1.75]);
}

#[test]
fn concat_and_slice_are_inverse() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = g.constant(vec![2, 1], vec![9.0, 8.0]).unwrap();
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 3]);
    assert_eq!(g.value(c), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    let back = g.slice(c, 1, 0, 2).unwrap();
    assert_eq!(g.value(back), g.value(a));
    let r = g.row(c, 1).unwrap();
    assert_eq!(g.value(r), &[3.0, 4.0, 8.0]);
}

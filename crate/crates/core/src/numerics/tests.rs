use super::gradcheck::{central_difference, max_relative_error};
use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Checks d(builder(x))/dx against central differences.
fn check_grad(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = build(&mut tape, xv);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(xv).unwrap().into_data();
    let shape = x.shape().to_vec();
    let mut f = |p: &[f64]| {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::new(shape.clone(), p.to_vec()).unwrap(), false);
        let out = build(&mut t, v);
        t.value(out).item()
    };
    let numeric = central_difference(&mut f, x.data(), 1e-5);
    max_relative_error(&analytic, &numeric, 1e-6)
}

#[test]
fn matmul_identity_and_hand_cases() {
    let mut t = Tape::new();
    let i2 = t.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let a = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let c = t.matmul(i2, a).unwrap();
    assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = t.constant(mat(&[&[1.0, 2.0]]));
    let col = t.constant(mat(&[&[3.0], &[4.0]]));
    let d = t.matmul(r, col).unwrap();
    assert_eq!(t.value(d).shape(), &[1, 1]);
    assert_eq!(t.value(d).item(), 11.0);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    match &err {
        Error::ShapeMismatch { lhs, rhs, .. } => {
            assert_eq!(lhs, &vec![2, 3]);
            assert_eq!(rhs, &vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let b = random(&[3, 3], 2);
    let err = check_grad(&random(&[3, 3], 1), |t, a| {
        let bv = t.constant(b.clone());
        let c = t.matmul(a, bv).unwrap();
        t.sum_all(c)
    });
    assert!(err <= 1e-6, "{err}");
    // and with respect to the right operand
    let a = random(&[3, 3], 3);
    let err = check_grad(&b, |t, bv| {
        let av = t.constant(a.clone());
        let c = t.matmul(av, bv).unwrap();
        t.sum_all(c)
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn sigmoid_reference_values() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![3], vec![0.0, 5.0, -5.0]).unwrap());
    let y = t.sigmoid(x);
    let y = t.value(y).data();
    // 1 / (1 + e^-5) evaluated independently
    let s5 = 1.0 / (1.0 + (-5.0f64).exp());
    assert_eq!(y[0], 0.5);
    assert!((y[1] - 0.993_307_149_075_715_2).abs() < 1e-15);
    assert!((y[1] - s5).abs() < 1e-15);
    assert!((y[2] - 0.006_692_850_924_284_856).abs() < 1e-15);
}

#[test]
fn softmax_uniform_and_stable() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[3]));
    let y = t.softmax_lastdim(x).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = t.constant(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
    let y = t.softmax_lastdim(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let w = random(&[4], 9);
    let err = check_grad(&random(&[4], 8), |t, x| {
        let y = t.softmax_lastdim(x).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv).unwrap();
        t.sum_all(p)
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn rmsnorm_constant_and_zero_gain() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 4], 3.0));
    let g = t.constant(Tensor::ones(&[4]));
    let y = t.rmsnorm(x, g).unwrap();
    for v in t.value(y).data() {
        assert!((v - 1.0).abs() < 1e-6);
    }
    let z = t.constant(Tensor::zeros(&[4]));
    let y = t.rmsnorm(x, z).unwrap();
    assert!(t.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn rmsnorm_gradient_matches_finite_differences() {
    let gain = random(&[8], 11);
    let w = random(&[1, 8], 12);
    let err = check_grad(&random(&[1, 8], 10), |t, x| {
        let g = t.constant(gain.clone());
        let y = t.rmsnorm(x, g).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv).unwrap();
        t.sum_all(p)
    });
    assert!(err <= 1e-6, "{err}");
    // gain path
    let x = random(&[3, 8], 13);
    let w = random(&[3, 8], 14);
    let err = check_grad(&gain, |t, g| {
        let xv = t.constant(x.clone());
        let y = t.rmsnorm(xv, g).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(y, wv).unwrap();
        t.sum_all(p)
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn cross_entropy_reference_values() {
    let mut t = Tape::new();
    let l = t.constant(Tensor::zeros(&[1, 4]));
    let ce = t.cross_entropy(l, &[2], &[true]).unwrap();
    assert!((t.value(ce).item() - 4f64.ln()).abs() < 1e-15);

    let mut logits = Tensor::zeros(&[1, 4]);
    logits.data_mut()[1] = 20.0;
    let l = t.constant(logits);
    let ce = t.cross_entropy(l, &[1], &[true]).unwrap();
    assert!(t.value(ce).item() < 1e-8);
}

#[test]
fn cross_entropy_matches_direct_log_sum_exp() {
    let logits = random(&[3, 5], 21);
    let targets = [4, 0, 2];
    let mut t = Tape::new();
    let l = t.constant(logits.clone());
    let ce = t.cross_entropy(l, &targets, &[true; 3]).unwrap();
    let mut direct = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let row = logits.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        direct += z.ln() - row[y];
    }
    direct /= 3.0;
    assert!((t.value(ce).item() - direct).abs() < 1e-10);
}

#[test]
fn cross_entropy_all_masked_is_an_error() {
    let mut t = Tape::new();
    let l = t.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        t.cross_entropy(l, &[0, 1], &[false, false]),
        Err(Error::EmptyLoss)
    ));
}

#[test]
fn cross_entropy_ignores_masked_rows() {
    let base = random(&[4, 6], 30);
    let mut perturbed = base.clone();
    perturbed.row_mut(1).iter_mut().for_each(|v| *v += 7.0);
    let mask = [true, false, true, true];
    let targets = [1, 2, 3, 4];
    let mut t = Tape::new();
    let a = t.constant(base);
    let b = t.constant(perturbed);
    let ca = t.cross_entropy(a, &targets, &mask).unwrap();
    let cb = t.cross_entropy(b, &targets, &mask).unwrap();
    assert_eq!(t.value(ca).item(), t.value(cb).item());
}

#[test]
fn backward_simple_sums() {
    let x = random(&[5], 40);
    let mut t = Tape::new();
    let xv = t.leaf(x.clone(), true);
    let s = t.sum_all(xv);
    t.backward(s).unwrap();
    assert!(t.grad(xv).unwrap().data().iter().all(|g| *g == 1.0));

    let mut t = Tape::new();
    let xv = t.leaf(x.clone(), true);
    let sq = t.mul(xv, xv).unwrap();
    let s = t.sum_all(sq);
    t.backward(s).unwrap();
    for (g, v) in t.grad(xv).unwrap().data().iter().zip(x.data()) {
        assert_eq!(*g, 2.0 * v);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(t.backward(x), Err(Error::NonScalarBackward(_))));
}

#[test]
fn attention_gradients_all_inputs() {
    let (s, h) = (4, 6);
    let k = random(&[s, h], 51);
    let v = random(&[s, h], 52);
    let w = random(&[s, h], 53);
    let q = random(&[s, h], 50);
    let objective = |t: &mut Tape, qv: Var, kv: Var, vv: Var| {
        let o = t.causal_attention(qv, kv, vv, 2, 0).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(o, wv).unwrap();
        t.sum_all(p)
    };
    let err = check_grad(&q, |t, qv| {
        let kv = t.constant(k.clone());
        let vv = t.constant(v.clone());
        objective(t, qv, kv, vv)
    });
    assert!(err <= 1e-6, "q {err}");
    let err = check_grad(&k, |t, kv| {
        let qv = t.constant(q.clone());
        let vv = t.constant(v.clone());
        objective(t, qv, kv, vv)
    });
    assert!(err <= 1e-6, "k {err}");
    let err = check_grad(&v, |t, vv| {
        let qv = t.constant(q.clone());
        let kv = t.constant(k.clone());
        objective(t, qv, kv, vv)
    });
    assert!(err <= 1e-6, "v {err}");
}

#[test]
fn attention_is_causal() {
    let (s, h) = (5, 4);
    let q = random(&[s, h], 60);
    let k = random(&[s, h], 61);
    let v = random(&[s, h], 62);
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    k2.row_mut(3).iter_mut().for_each(|x| *x += 1.0);
    v2.row_mut(3).iter_mut().for_each(|x| *x -= 2.0);
    let mut t = Tape::new();
    let (qa, ka, va) = (t.constant(q.clone()), t.constant(k), t.constant(v));
    let (kb, vb) = (t.constant(k2), t.constant(v2));
    let a = t.causal_attention(qa, ka, va, 2, 0).unwrap();
    let b = t.causal_attention(qa, kb, vb, 2, 0).unwrap();
    for i in 0..3 {
        assert_eq!(t.value(a).row(i), t.value(b).row(i));
    }
    assert_ne!(t.value(a).row(3), t.value(b).row(3));
}

#[test]
fn elementwise_and_structural_op_gradients() {
    let x = random(&[3, 4], 70);
    let col = random(&[3, 1], 71);
    let bias = random(&[4], 72);
    let w = random(&[5, 4], 73);
    let err = check_grad(&x, |t, xv| {
        let c = t.constant(col.clone());
        let b = t.constant(bias.clone());
        let wv = t.constant(w.clone());
        let a = t.mul_col(xv, c).unwrap();
        let a = t.add_row(a, b).unwrap();
        let a = t.gelu(a);
        let a = t.tanh(a);
        let y = t.linear(a, wv).unwrap();
        let y = t.sigmoid(y);
        let z = t.concat_rows(&[y, y]).unwrap();
        let z = t.scale(z, 0.5);
        t.sum_all(z)
    });
    assert!(err <= 1e-6, "{err}");
    let err = check_grad(&col, |t, c| {
        let xv = t.constant(x.clone());
        let a = t.mul_col(xv, c).unwrap();
        let a = t.tanh(a);
        t.sum_all(a)
    });
    assert!(err <= 1e-6, "{err}");
    let err = check_grad(&w, |t, wv| {
        let xv = t.constant(x.clone());
        let y = t.linear(xv, wv).unwrap();
        let y = t.tanh(y);
        t.sum_all(y)
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn row_where_copies_rows_bit_exactly() {
    let a = random(&[3, 4], 80);
    let b = random(&[3, 4], 81);
    let mut t = Tape::new();
    let (av, bv) = (t.leaf(a.clone(), true), t.leaf(b.clone(), true));
    let y = t.row_where(&[true, false, true], av, bv).unwrap();
    assert_eq!(t.value(y).row(0), a.row(0));
    assert_eq!(t.value(y).row(1), b.row(1));
    let s = t.sum_all(y);
    t.backward(s).unwrap();
    assert_eq!(t.grad(av).unwrap().row(1), &[0.0; 4]);
    assert_eq!(t.grad(bv).unwrap().row(1), &[1.0; 4]);
}

#[test]
fn gather_scatters_gradient_to_repeated_rows() {
    let table = random(&[4, 3], 90);
    let mut t = Tape::new();
    let tv = t.leaf(table, true);
    let e = t.gather_rows(tv, &[1, 1, 3]).unwrap();
    let s = t.sum_all(e);
    t.backward(s).unwrap();
    let g = t.grad(tv).unwrap();
    assert_eq!(g.row(1), &[2.0; 3]);
    assert_eq!(g.row(0), &[0.0; 3]);
    assert!(t.gather_rows(tv, &[4]).is_err());
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut t = Tape::new();
        let x = t.leaf(random(&[4, 8], 99), true);
        let g = t.constant(Tensor::ones(&[8]));
        let y = t.rmsnorm(x, g).unwrap();
        let y = t.softmax_lastdim(y).unwrap();
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        (t.value(y).clone(), t.grad(x).unwrap())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn sigmoid_range_and_symmetry(x in -700.0f64..700.0) {
        let y = kernels::sigmoid(x);
        let z = kernels::sigmoid(-x);
        prop_assert!((y + z - 1.0).abs() <= 1e-12);
        if x.abs() < 30.0 {
            prop_assert!(y > 0.0 && y < 1.0);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in proptest::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = row.len();
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![n], row.clone()).unwrap());
        let b = t.constant(Tensor::new(vec![n], row.iter().map(|v| v + shift).collect()).unwrap());
        let ya = t.softmax_lastdim(a).unwrap();
        let yb = t.softmax_lastdim(b).unwrap();
        let s: f64 = t.value(ya).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9);
        for (p, q) in t.value(ya).data().iter().zip(t.value(yb).data()) {
            prop_assert!((p - q).abs() <= 1e-9);
        }
    }
}

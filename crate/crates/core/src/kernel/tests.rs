use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use super::*;
use crate::gradcheck;

fn rng(seed: u64) -> crate::Rng {
    crate::Rng::seed_from_u64(seed)
}

fn random(shape: Vec<usize>, rng: &mut crate::Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}


fn mat(tape: &mut Tape, rows: &[&[f64]]) -> Var {
    let t = Tensor::from_rows(rows).unwrap();
    tape.leaf(&t)
}

#[test]
fn matmul_identity_and_selector() {
    let mut tape = Tape::new();
    let i2 = mat(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
    let m = mat(&mut tape, &[&[1.0, 2.0], &[3.0, 4.0]]);
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

    let row = mat(&mut tape, &[&[1.0, 0.0]]);
    let col = mat(&mut tape, &[&[2.0], &[5.0]]);
    let out = tape.matmul(row, col).unwrap();
    assert_eq!(tape.shape(out), &[1, 1]);
    assert_eq!(tape.value(out), &[2.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(7);
    let a = random(vec![3, 4], &mut r);
    let b = random(vec![4, 2], &mut r);
    let mut oracle = [0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                oracle[i * 2 + j] += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
        }
    }
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let out = tape.matmul(va, vb).unwrap();
    for (x, y) in tape.value(out).iter().zip(oracle) {
        assert!((x - y).abs() < 1e-12);
    }
    let bt = {
        let mut d = vec![0.0; 8];
        for k in 0..4 {
            for j in 0..2 {
                d[j * 4 + k] = b.data()[k * 2 + j];
            }
        }
        Tensor::new(vec![2, 4], d).unwrap()
    };
    let vbt = tape.leaf(&bt);
    let out_nt = tape.matmul_nt(va, vbt).unwrap();
    for (x, y) in tape.value(out_nt).iter().zip(oracle) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    let msg = alloc::format!("{err}");
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_identity_associativity_is_bitwise() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2, 2], vec![0.5, -1.25, 3.0, 0.125]).unwrap();
    let i = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = tape.constant(vec![2, 2], vec![2.0, 0.75, -4.0, 1.5]).unwrap();
    let ai = tape.matmul(a, i).unwrap();
    let left = tape.matmul(ai, b).unwrap();
    let ib = tape.matmul(i, b).unwrap();
    let right = tape.matmul(a, ib).unwrap();
    assert_eq!(tape.value(left), tape.value(right));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let y = tape.softmax(x, 1.0).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5]);

    let x = tape.constant(vec![2], vec![libm::log(3.0), 0.0]).unwrap();
    let y = tape.softmax(x, 1.0).unwrap();
    assert!((tape.value(y)[0] - 0.75).abs() < 1e-15);
    assert!((tape.value(y)[1] - 0.25).abs() < 1e-15);

    let x = tape.constant(vec![2], vec![2.0, 0.0]).unwrap();
    let y = tape.softmax(x, 100.0).unwrap();
    assert!((tape.value(y)[0] - 0.505).abs() < 1e-3);
    assert!((tape.value(y)[1] - 0.495).abs() < 1e-3);

    assert!(matches!(tape.softmax(x, 0.0), Err(crate::Error::Config(_))));
    assert!(matches!(tape.softmax(x, -1.0), Err(crate::Error::Config(_))));
}

#[test]
fn softmax_rows_are_simplex_points() {
    let mut r = rng(3);
    for seed in 0..20 {
        let t = random(vec![4, 7], &mut r);
        let scaled: Vec<f64> = t.data().iter().map(|v| v * (seed as f64 + 1.0) * 10.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(vec![4, 7], scaled).unwrap();
        let y = tape.softmax(x, 0.5).unwrap();
        for row in tape.value(y).chunks(7) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(vec![1], vec![0.0]).unwrap();
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s), &[0.5]);

    let v = tape.constant(vec![1, 2], vec![3.0, 4.0]).unwrap();
    let n = tape.l2_normalize(v);
    assert!((tape.value(n)[0] - 0.6).abs() < 1e-15);
    assert!((tape.value(n)[1] - 0.8).abs() < 1e-15);

    let zero = tape.constant(vec![1, 3], vec![0.0; 3]).unwrap();
    let n = tape.l2_normalize(zero);
    assert_eq!(tape.value(n), &[0.0; 3]);

    let c = tape.constant(vec![1, 4], vec![2.5; 4]).unwrap();
    let g = tape.constant(vec![4], vec![1.0; 4]).unwrap();
    let b = tape.constant(vec![4], vec![0.0; 4]).unwrap();
    let ln = tape.layer_norm(c, g, b).unwrap();
    assert_eq!(tape.value(ln), &[0.0; 4]);

    let neg = tape.constant(vec![2], vec![1.0, 0.0]).unwrap();
    assert!(matches!(tape.log(neg), Err(crate::Error::Domain { .. })));

    let r = tape.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
    let y = tape.relu(r);
    assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
}

#[test]
fn zero_vector_normalisation_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 2.0]).unwrap());
    let n = tape.l2_normalize(x);
    let s = tape.sum_rows(n);
    let loss = tape.mean(s).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(x).unwrap();
    assert_eq!(&g[..2], &[0.0, 0.0]);
    assert!(g.iter().all(|v| v.is_finite()));
}

#[test]
fn gather_examples() {
    let mut tape = Tape::new();
    let table = tape.param(&Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap());
    let rows = tape.gather(table, &[1]).unwrap();
    assert_eq!(tape.value(rows), &[0.0, 1.0]);

    let empty = tape.gather(table, &[]).unwrap();
    assert_eq!(tape.shape(empty), &[0, 2]);
    assert!(tape.value(empty).is_empty());

    let err = tape.gather(table, &[3]).unwrap_err();
    assert_eq!(
        err,
        crate::Error::Index {
            what: "gather row",
            index: 3,
            bound: 3
        }
    );

    let twice = tape.gather(table, &[2, 2]).unwrap();
    assert_eq!(tape.value(twice), &[2.0, 3.0, 2.0, 3.0]);
    let s = tape.sum_rows(twice);
    let loss = tape.mean(s).unwrap();
    let grads = tape.backward(loss).unwrap();
    // mean over 2 rows: each copy contributes 1/2, so row 2 receives 2 × 1/2
    assert_eq!(grads.get(table).unwrap(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn duplicate_gather_gradient_matches_finite_differences() {
    let mut r = rng(11);
    let table = random(vec![4, 3], &mut r);
    let w = random(vec![2, 3], &mut r);
    let report = gradcheck::check(&[table], 1e-5, |tape, v| {
        let rows = tape.gather(v[0], &[1, 1])?;
        let wv = tape.constant(vec![2, 3], w.data().to_vec())?;
        let p = tape.mul(rows, wv)?;
        let s = tape.sum_rows(p);
        tape.mean(s)
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::scalar(3.0));
    let unused = tape.param(&Tensor::scalar(1.0));
    let sq = tape.mul(x, x).unwrap();
    let grads = tape.backward(sq).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
    assert!(grads.get(unused).is_none());

    let mut t = Tensor::scalar(1.0).with_requires_grad(true);
    grads.write_into(unused, &mut t).unwrap();
    assert_eq!(t.grad().unwrap(), &[0.0]);

    let mut tape = Tape::new();
    let v = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    assert!(matches!(tape.backward(v), Err(crate::Error::Contract(_))));
}

#[test]
fn tape_is_cleared_after_backward() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::scalar(2.0));
    let y = tape.scale(x, 3.0);
    assert_eq!(tape.len(), 2);
    tape.clear();
    assert!(tape.is_empty());
    let _ = y;
}

#[test]
fn dropout_is_identity_at_zero_rate_and_scales_kept_units() {
    let mut r = rng(1);
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1000], vec![1.0; 1000]).unwrap();
    let same = tape.dropout(x, 0.0, &mut r).unwrap();
    assert_eq!(same, x);
    let d = tape.dropout(x, 0.2, &mut r).unwrap();
    let vals = tape.value(d);
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
    let dropped = vals.iter().filter(|&&v| v == 0.0).count();
    assert!((100..300).contains(&dropped));
}

#[test]
fn attention_ignores_masked_keys() {
    let mut r = rng(5);
    let q = random(vec![6, 4], &mut r);
    let k = random(vec![6, 4], &mut r);
    let mut v = random(vec![6, 4], &mut r);
    let mask = [false, true, true, true, false, true];
    let run = |v: &Tensor| {
        let mut tape = Tape::new();
        let (a, b, c) = (tape.leaf(&q), tape.leaf(&k), tape.leaf(v));
        let o = tape.attention(a, b, c, &mask, 2, 3, 2).unwrap();
        tape.value(o).to_vec()
    };
    let before = run(&v);
    v.data_mut()[0] = 123.0;
    v.data_mut()[4 * 4 + 2] = -7.0;
    assert_eq!(before, run(&v));
}

/// Every differentiable op against central differences on 20 seeds.
#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..20u64 {
        let worst = gradcheck::kernel_op_suite(seed).unwrap();
        assert!(worst <= 1e-4, "seed {seed}: relative error {worst}");
    }
}


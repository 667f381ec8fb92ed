use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

type LossFn<'a> = dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var> + 'a;

fn loss_value(f: &LossFn, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let l = f(&mut tape, &vars).unwrap();
    tape.value(l).item()
}

/// Central finite differences against the tape's gradients.
fn check_grads(f: &LossFn, inputs: &[Tensor]) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let l = f(&mut tape, &vars).unwrap();
    tape.backward(l).unwrap();
    let h = 1e-5;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for e in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= h;
            let numeric = (loss_value(f, &plus) - loss_value(f, &minus)) / (2.0 * h);
            let a = analytic.data()[e];
            let tol = 1e-4 * a.abs().max(numeric.abs()) + 1e-6;
            assert!(
                (a - numeric).abs() <= tol,
                "input {k} element {e}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values kept away from zero so kinks are not straddled by ±h.
fn rand_away(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = rand_t(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(x).shape().to_vec();
    let w = rand_t(&shape, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

#[test]
fn relu_example() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn maxpool_example() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[4.0]);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::eye(3));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn sum_relu_grad() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![-1.0, 2.0]));
    let r = tape.relu(x);
    let l = tape.sum(r);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn square_grad() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![3.0]));
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0]));
    let l = tape.sum(x);
    tape.backward(l).unwrap();
    assert!(tape.backward(l).is_err());
}

#[test]
fn non_scalar_loss_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(Error::Shape { .. })));
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b).unwrap_err() {
        Error::Shape { op, .. } => assert_eq!(op, "matmul"),
        e => panic!("{e}"),
    }
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, c), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn dropout_is_seeded_and_off_in_eval() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[64], 1.0));
    let a = tape.dropout(x, 0.5, true, 9).unwrap();
    let b = tape.dropout(x, 0.5, true, 9).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    assert!(tape.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
    assert!(tape.value(a).data().contains(&0.0));
    let e = tape.dropout(x, 0.5, false, 9).unwrap();
    assert_eq!(e, x);
}

#[test]
fn gradcheck_elementwise_and_linear_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_away(&[3, 4], &mut rng);
    let b = rand_away(&[3, 4], &mut rng);
    let w = rand_t(&[4, 2], &mut rng);
    let bias = rand_t(&[2], &mut rng);
    let col = rand_t(&[3, 1], &mut rng);
    let s = Tensor::scalar(0.7);

    check_grads(&|t, v| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y, 1) }, &[a.clone(), w.clone()]);
    check_grads(&|t, v| { let y = t.add(v[0], v[1])?; weighted_sum(t, y, 2) }, &[a.clone(), b.clone()]);
    check_grads(&|t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y, 3) }, &[a.clone(), b.clone()]);
    check_grads(&|t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y, 4) }, &[a.clone(), b.clone()]);
    check_grads(
        &|t, v| { let y = t.matmul(v[0], v[1])?; let y = t.add_row(y, v[2])?; weighted_sum(t, y, 5) },
        &[a.clone(), w.clone(), bias.clone()],
    );
    check_grads(&|t, v| { let y = t.mul_col(v[0], v[1])?; weighted_sum(t, y, 6) }, &[a.clone(), col.clone()]);
    check_grads(&|t, v| { let y = t.mul_scalar_var(v[0], v[1])?; weighted_sum(t, y, 7) }, &[a.clone(), s]);
    check_grads(&|t, v| { let y = t.scale(v[0], -2.5); weighted_sum(t, y, 8) }, std::slice::from_ref(&a));
    check_grads(&|t, v| { let y = t.relu(v[0]); weighted_sum(t, y, 9) }, std::slice::from_ref(&a));
    check_grads(&|t, v| { let y = t.leaky_relu(v[0], 0.2); weighted_sum(t, y, 10) }, std::slice::from_ref(&a));
    check_grads(&|t, v| { let y = t.abs(v[0]); weighted_sum(t, y, 11) }, std::slice::from_ref(&a));
    check_grads(&|t, v| { let y = t.dropout(v[0], 0.3, true, 77)?; weighted_sum(t, y, 12) }, std::slice::from_ref(&a));
    check_grads(&|t, v| { let y = t.mul(v[0], v[0])?; t.mean(y) }, std::slice::from_ref(&a));
    check_grads(
        &|t, v| { let y = t.concat_cols(&[v[0], v[1], v[0]])?; weighted_sum(t, y, 13) },
        &[a.clone(), col.clone()],
    );
    check_grads(&|t, v| { let y = t.reshape(v[0], &[4, 3])?; weighted_sum(t, y, 14) }, std::slice::from_ref(&a));
}

#[test]
fn gradcheck_graph_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_t(&[5, 3], &mut rng);
    let sp = Rc::new(SparseMatrix::from_triplets(
        4,
        5,
        vec![(0, 0, 0.5), (0, 3, -1.0), (1, 1, 2.0), (2, 4, 0.25), (3, 0, 1.5), (3, 2, 0.3)],
    ));
    let idx = Rc::new(vec![0usize, 2, 2, 4, 1, 0]);
    let seg = Rc::new(vec![0usize, 0, 1, 2, 2, 2]);
    let scores = rand_t(&[6, 1], &mut rng);

    check_grads(&|t, v| { let y = t.spmm(&sp, v[0])?; weighted_sum(t, y, 1) }, std::slice::from_ref(&x));
    check_grads(&|t, v| { let y = t.gather_rows(v[0], &idx)?; weighted_sum(t, y, 2) }, std::slice::from_ref(&x));
    check_grads(
        &|t, v| { let y = t.gather_rows(v[0], &idx)?; let y = t.scatter_add_rows(y, &seg, 3)?; weighted_sum(t, y, 3) },
        std::slice::from_ref(&x),
    );
    check_grads(&|t, v| { let y = t.segment_softmax(v[0], &seg, 3)?; weighted_sum(t, y, 4) }, &[scores]);
}

#[test]
fn gradcheck_conv_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_t(&[2, 2, 6, 6], &mut rng);
    let w = rand_t(&[3, 2, 3, 3], &mut rng);
    let b = rand_t(&[3], &mut rng);
    check_grads(
        &|t, v| { let y = t.conv2d_same(v[0], v[1])?; let y = t.add_channel(y, v[2])?; weighted_sum(t, y, 1) },
        &[x.clone(), w.clone(), b],
    );
    let w2 = rand_t(&[3, 2, 2, 2], &mut rng);
    check_grads(&|t, v| { let y = t.conv2d(v[0], v[1], 2, 0)?; weighted_sum(t, y, 2) }, &[x.clone(), w2]);

    let y = rand_t(&[1, 2, 3, 3], &mut rng);
    let wt = rand_t(&[2, 3, 2, 2], &mut rng);
    check_grads(&|t, v| { let o = t.conv_transpose2d(v[0], v[1], 2, 0)?; weighted_sum(t, o, 3) }, &[y.clone(), wt]);
    let wt4 = rand_t(&[2, 1, 4, 4], &mut rng);
    check_grads(&|t, v| { let o = t.conv_transpose2d(v[0], v[1], 4, 0)?; weighted_sum(t, o, 4) }, &[y, wt4]);

    // distinct values so the pooled argmax is stable under ±h
    let mut p = Tensor::zeros(&[1, 2, 4, 4]);
    let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(&mut rng);
    p.data_mut().copy_from_slice(&vals);
    check_grads(&|t, v| { let o = t.maxpool2(v[0])?; weighted_sum(t, o, 5) }, &[p]);
}

#[test]
fn transpose_conv_is_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (stride, k, pad) in [(2, 2, 0), (1, 3, 1), (2, 4, 1), (4, 4, 0)] {
        let x = rand_t(&[2, 3, 8, 8], &mut rng);
        let w = rand_t(&[4, 3, k, k], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let cx = tape.conv2d(xv, wv, stride, pad).unwrap();
        let y = rand_t(tape.value(cx).shape(), &mut rng);
        let yv = tape.constant(y.clone());
        // [O, I, K, K] read as a transposed kernel maps O channels back to I.
        let ty = tape.conv_transpose2d(yv, wv, stride, pad).unwrap();
        assert_eq!(tape.value(ty).shape(), x.shape());
        let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(tape.value(ty).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn gradcheck_two_layer_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_t(&[6, 4], &mut rng);
    let target = rand_t(&[6, 1], &mut rng);
    let w1 = rand_t(&[4, 5], &mut rng);
    let b1 = rand_t(&[5], &mut rng);
    let w2 = rand_t(&[5, 1], &mut rng);
    let b2 = rand_t(&[1], &mut rng);
    let f = move |t: &mut Tape, v: &[Var]| -> crate::Result<Var> {
        let xv = t.constant(x.clone());
        let tv = t.constant(target.clone());
        let h = t.matmul(xv, v[0])?;
        let h = t.add_row(h, v[1])?;
        let h = t.relu(h);
        let o = t.matmul(h, v[2])?;
        let o = t.add_row(o, v[3])?;
        let d = t.sub(o, tv)?;
        let d2 = t.mul(d, d)?;
        t.mean(d2)
    };
    check_grads(&f, &[w1, b1, w2, b2]);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = rand_t(&[1, 2, 8, 8], &mut rng);
        let w = rand_t(&[3, 2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.param(x);
        let wv = tape.param(w);
        let y = tape.conv2d_same(xv, wv).unwrap();
        let y = tape.dropout(y, 0.5, true, 3).unwrap();
        let y = tape.maxpool2(y).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        (tape.value(l).clone(), tape.grad(xv).unwrap(), tape.grad(wv).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn segment_softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let seg = Rc::new(vec![0usize, 1, 1, 2, 2, 2, 0]);
    let mut tape = Tape::new();
    let s = tape.constant(rand_t(&[7], &mut rng));
    let y = tape.segment_softmax(s, &seg, 3).unwrap();
    let mut sums = [0.0; 3];
    for (v, &g) in tape.value(y).data().iter().zip(seg.iter()) {
        sums[g] += v;
    }
    for s in sums {
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sparse_transpose_matches_dense() {
    let sp = SparseMatrix::from_triplets(2, 3, vec![(0, 1, 2.0), (1, 0, 1.0), (1, 2, -1.0), (0, 1, 1.0)]);
    assert_eq!(sp.to_dense(), vec![0.0, 3.0, 0.0, 1.0, 0.0, -1.0]);
    assert_eq!(sp.nnz(), 3);
    let y = sp.transpose_mul_dense(&[1.0, 2.0], 1);
    assert_eq!(y, vec![2.0, 3.0, -2.0]);
}

//! Finite-difference checks for every differentiable primitive.

use macformer::nn::gradcheck::{grad_check, DEFAULT_STEP};
use macformer::nn::params::seeded_rng;
use macformer::nn::{MultiHeadAttention, ParamBuilder, ParamStore, Tape, Tensor, Var};
use macformer::Result;
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces any array to a scalar through fixed random weights, so every
/// output element carries a distinct gradient.
fn project(tape: &Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(&tape.shape(y), seed ^ 0xabcd));
    Ok(tape.sum(tape.mul(y, w)?))
}

fn check(inputs: &[Tensor], f: impl Fn(&Tape, &[Var]) -> Result<Var>) -> f64 {
    grad_check(|t, v| project(t, f(t, v)?, 7), inputs, DEFAULT_STEP).unwrap()
}

#[test]
fn elementwise_binary_ops() {
    let (a, b) = (random(&[3, 4], 1), random(&[3, 4], 2));
    assert!(check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1])) < TOL);
    assert!(check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])) < TOL);
    assert!(check(&[a.clone(), b], |t, v| t.mul(v[0], v[1])) < TOL);
    assert!(check(&[a.clone(), random(&[4], 3)], |t, v| t.add_suffix(v[0], v[1])) < TOL);
    assert!(check(&[a.clone()], |t, v| t.mask_blocks(v[0], &[1.0, 0.0, 0.5])) < TOL);
    assert!(check(&[a.clone()], |t, v| Ok(t.scale(v[0], -2.5))) < TOL);
    assert!(check(&[a], |t, v| Ok(t.add_scalar(v[0], 3.0))) < TOL);
}

#[test]
fn unary_ops() {
    let x = random(&[2, 5], 4);
    let positive = Tensor::new(vec![4], vec![0.3, 1.2, 2.5, 0.9]).unwrap();
    assert!(check(&[x.clone()], |t, v| Ok(t.relu(v[0]))) < TOL);
    assert!(check(&[x.clone()], |t, v| Ok(t.tanh(v[0]))) < TOL);
    assert!(check(&[x.clone()], |t, v| Ok(t.sigmoid(v[0]))) < TOL);
    assert!(check(&[x.clone()], |t, v| Ok(t.exp(v[0]))) < TOL);
    assert!(check(&[positive], |t, v| Ok(t.log(v[0]))) < TOL);
    assert!(check(&[x.clone()], |t, v| Ok(t.softplus(v[0]))) < TOL);
    assert!(check(&[x.clone()], |t, v| Ok(t.square(v[0]))) < TOL);
    let wide = Tensor::new(vec![4], vec![-2.0, -0.4, 0.6, 1.7]).unwrap();
    assert!(check(&[wide], |t, v| Ok(t.smooth_l1(v[0]))) < TOL);
}

#[test]
fn matrix_products() {
    assert!(check(&[random(&[2, 3, 4], 5), random(&[4, 6], 6)], |t, v| t.matmul(v[0], v[1])) < TOL);
    assert!(
        check(&[random(&[2, 3, 4], 7), random(&[2, 4, 5], 8)], |t, v| t.batch_matmul(v[0], v[1], false))
            < TOL
    );
    assert!(
        check(&[random(&[2, 3, 4], 9), random(&[2, 5, 4], 10)], |t, v| t.batch_matmul(v[0], v[1], true))
            < TOL
    );
}

#[test]
fn softmax_with_and_without_mask() {
    let x = random(&[3, 4], 11);
    assert!(check(&[x.clone()], |t, v| t.softmax(v[0], None)) < TOL);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    assert!(check(&[x], |t, v| t.softmax(v[0], Some(&mask))) < TOL);
}

#[test]
fn layer_norm_all_inputs() {
    let inputs = [random(&[3, 5], 12), random(&[5], 13), random(&[5], 14)];
    assert!(check(&inputs, |t, v| t.layer_norm(v[0], v[1], v[2])) < TOL);
}

#[test]
fn structural_ops() {
    let a = random(&[2, 3, 4], 15);
    assert!(check(&[a.clone(), random(&[2, 2, 4], 16)], |t, v| t.concat(&[v[0], v[1]], 1)) < TOL);
    assert!(check(&[a.clone(), random(&[2, 3, 4], 17)], |t, v| t.stack(&[v[0], v[1]])) < TOL);
    assert!(check(&[a.clone()], |t, v| t.slice(v[0], 2, 1, 2)) < TOL);
    assert!(check(&[a.clone()], |t, v| t.select(v[0], 1)) < TOL);
    assert!(check(&[a.clone()], |t, v| t.reshape(v[0], &[6, 4])) < TOL);
    assert!(check(&[a.clone()], |t, v| t.permute(v[0], &[2, 0, 1])) < TOL);
    assert!(check(&[a.clone()], |t, v| t.broadcast(v[0], 1, 3)) < TOL);
    assert!(check(&[a.clone()], |t, v| Ok(t.mean(v[0]))) < TOL);
    assert!(check(&[a.clone()], |t, v| t.weighted_sum(v[0], 1, &[0.5, 0.0, 2.0])) < TOL);
    assert!(check(&[a.clone()], |t, v| t.cumsum(v[0], 1)) < TOL);
    assert!(check(&[a], |t, v| t.normalize_last(v[0])) < TOL);
}

#[test]
fn conv1d_both_inputs() {
    for k in [1, 3, 5] {
        let inputs = [random(&[2, 6, 3], 18 + k as u64), random(&[k, 3, 4], 30 + k as u64)];
        assert!(check(&inputs, |t, v| t.conv1d(v[0], v[1])) < TOL, "kernel {k}");
    }
}

#[test]
fn lstm_step_with_and_without_mask() {
    let inputs = [random(&[3, 8], 40), random(&[3, 2], 41), random(&[3, 2], 42)];
    assert!(check(&inputs, |t, v| t.lstm_step(v[0], v[1], v[2], None)) < TOL);
    assert!(check(&inputs, |t, v| t.lstm_step(v[0], v[1], v[2], Some(&[1.0, 0.0, 1.0]))) < TOL);
}

#[test]
fn linear_gradient_is_weight_row_sums() {
    let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
    let tape = Tape::new();
    let x = tape.input(Tensor::from_vec(vec![0.2, -0.7]));
    let wv = tape.constant(w.clone());
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = macformer::nn::linear(&tape, x, wv, b).unwrap();
    let g = tape.backward(tape.sum(y)).unwrap().get(x).unwrap();
    assert_eq!(g.data(), &[6.0, 3.5]);
    let err = grad_check(
        |t, v| {
            let wv = t.constant(w.clone());
            let b = t.constant(Tensor::zeros(&[3]));
            Ok(t.sum(macformer::nn::linear(t, v[0], wv, b)?))
        },
        &[Tensor::from_vec(vec![0.2, -0.7])],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6);
}

#[test]
fn attention_gradients_through_parameters() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(50);
    let mha = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 4).unwrap();
    let q = random(&[2, 3, 8], 51);
    let kv = random(&[2, 4, 8], 52);
    let mask = [true, true, false, true, true, false, true, true];
    let err = grad_check(
        |t, v| {
            let y = mha.forward(t, &store, v[0], v[1], Some(&mask))?;
            project(t, y, 3)
        },
        &[q, kv],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
    let report = macformer::nn::grad_check_params(
        &store,
        |t, s| {
            let q = t.constant(random(&[2, 3, 8], 51));
            let kv = t.constant(random(&[2, 4, 8], 52));
            let y = mha.forward(t, s, q, kv, Some(&mask))?;
            project(t, y, 3)
        },
        DEFAULT_STEP,
        1,
    )
    .unwrap();
    assert!(report.max_relative_error < TOL, "{report:?}");
}

#[test]
fn softmax_closed_forms() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
    assert_eq!(tape.value(tape.softmax(x, None).unwrap()).data(), &[0.5, 0.5]);
    let x = tape.constant(Tensor::from_vec(vec![2f64.ln(), 0.0]));
    let y = tape.value(tape.softmax(x, None).unwrap()).clone();
    assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15 && (y.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    let x = tape.constant(Tensor::from_vec(vec![1000.0, 0.0]));
    assert_eq!(tape.value(tape.softmax(x, None).unwrap()).data(), &[1.0, 0.0]);
    let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(tape.softmax(x, Some(&[false, false])).is_err());
}

#[test]
fn layer_norm_closed_forms() {
    let tape = Tape::new();
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let s = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(Tensor::from_vec(vec![1.0, 3.0]));
    let y = tape.value(tape.layer_norm(x, g, s).unwrap()).clone();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y.data()[0] + expect).abs() < 1e-12 && (y.data()[1] - expect).abs() < 1e-12);
    let g3 = tape.constant(Tensor::full(&[3], 1.0));
    let s3 = tape.constant(Tensor::zeros(&[3]));
    let c = tape.constant(Tensor::full(&[3], 4.2));
    assert!(tape.value(tape.layer_norm(c, g3, s3).unwrap()).data().iter().all(|&v| v.abs() < 1e-9));
}

#[test]
fn backward_touches_each_node_once() {
    // A diamond: y feeds two branches that rejoin. If any node were
    // propagated twice the gradient would double.
    let tape = Tape::new();
    let x = tape.input(Tensor::from_vec(vec![1.5]));
    let y = tape.scale(x, 2.0);
    let a = tape.square(y);
    let b = tape.scale(y, 3.0);
    let l = tape.sum(tape.add(a, b).unwrap());
    let g = tape.backward(l).unwrap().get(x).unwrap();
    // d/dx (4x² + 6x) = 8x + 6
    assert_eq!(g.data(), &[18.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_shapes_pass_grad_check(rows in 1usize..4, cols in 1usize..5, inner in 1usize..4, seed in 0u64..1000) {
        let x = random(&[rows, cols, inner], seed);
        let w = random(&[inner, 3], seed + 1);
        let g = random(&[3], seed + 2);
        let s = random(&[3], seed + 3);
        let err = check(&[x, w, g, s], |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.tanh(h);
            let n = t.layer_norm(h, v[2], v[3])?;
            t.softmax(n, None)
        });
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 1..20), masked in 0usize..20) {
        let n = vals.len();
        let mask: Vec<bool> = (0..n).map(|i| n == 1 || i != masked % n).collect();
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vals));
        let y = tape.value(tape.softmax(x, Some(&mask)).unwrap()).clone();
        let sum: f64 = y.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        for (v, m) in y.data().iter().zip(&mask) {
            if !m { prop_assert_eq!(*v, 0.0); }
        }
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::audit_inputs;
use super::nn::{conv1d_dilated, conv_time, mlp_forward, softmax_cross_entropy};
use super::*;
use crate::error::Error;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    t(shape, &v)
}

#[test]
fn matmul_identity_and_scalar() {
    let mut tape = Tape::new();
    let i = tape.input(&t(&[2, 2], &[1., 0., 0., 1.]));
    let b = tape.input(&t(&[2, 2], &[3., 4., 5., 6.]));
    let y = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(y), &[3., 4., 5., 6.]);

    let a = tape.input(&t(&[1, 1], &[2.]));
    let b = tape.input(&t(&[1, 1], &[3.]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y), &[6.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[4, 3]);
    let b = random(&mut rng, &[3, 2]);
    let mut tape = Tape::new();
    let (va, vb) = (tape.input(&a), tape.input(&b));
    let y = tape.matmul(va, vb).unwrap();
    for i in 0..4 {
        for j in 0..2 {
            let want: f64 = (0..3).map(|k| a.at2(i, k) * b.at2(k, j)).sum();
            assert!((tape.value(y)[i * 2 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.input(&Tensor::zeros(vec![2, 3]));
    let b = tape.input(&Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(matches!(&err, Error::ShapeMismatch { left, right, .. } if left == &[2, 3] && right == &[2, 3]));
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
}

#[test]
fn mlp_zero_network_maps_zero_to_zero() {
    let mut store = ParameterStore::<f64>::new();
    store.init_zeros("m.0.weight", vec![3, 4]);
    store.init_zeros("m.0.bias", vec![4]);
    store.init_zeros("m.1.weight", vec![4, 2]);
    store.init_zeros("m.1.bias", vec![2]);
    let mut tape = Tape::new();
    let x = tape.input(&Tensor::zeros(vec![5, 3]));
    let y = mlp_forward(&mut tape, &store, x, "m").unwrap();
    assert_eq!(tape.shape(y), &[5, 2]);
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn mlp_single_affine_by_hand() {
    let mut store = ParameterStore::<f64>::new();
    store.insert("m.0.weight", t(&[1, 1], &[2.]));
    store.insert("m.0.bias", t(&[1], &[1.]));
    let mut tape = Tape::new();
    let x = tape.input(&t(&[1, 1], &[3.]));
    let y = mlp_forward(&mut tape, &store, x, "m").unwrap();
    assert_eq!(tape.value(y), &[7.]);
}

#[test]
fn mlp_two_layers_match_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParameterStore::<f64>::new();
    store.init_mlp("m", &[3, 5, 2], &mut rng);
    store.insert("m.0.bias", random(&mut rng, &[5]));
    store.insert("m.1.bias", random(&mut rng, &[2]));
    let x = random(&mut rng, &[4, 3]);
    let mut tape = Tape::new();
    let vx = tape.input(&x);
    let y = mlp_forward(&mut tape, &store, vx, "m").unwrap();

    let w0 = store.get("m.0.weight").unwrap();
    let b0 = store.get("m.0.bias").unwrap().data();
    let w1 = store.get("m.1.weight").unwrap();
    let b1 = store.get("m.1.bias").unwrap().data();
    for r in 0..4 {
        let hidden: Vec<f64> = (0..5)
            .map(|j| ((0..3).map(|k| x.at2(r, k) * w0.at2(k, j)).sum::<f64>() + b0[j]).max(0.0))
            .collect();
        for o in 0..2 {
            let want = (0..5).map(|j| hidden[j] * w1.at2(j, o)).sum::<f64>() + b1[o];
            assert!((tape.value(y)[r * 2 + o] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn mlp_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParameterStore::<f64>::new();
    store.init_mlp("m", &[3, 2], &mut rng);
    let mut tape = Tape::new();
    let x = tape.input(&Tensor::zeros(vec![1, 4]));
    assert!(matches!(mlp_forward(&mut tape, &store, x, "nope"), Err(Error::UnknownParam(_))));
    assert!(matches!(mlp_forward(&mut tape, &store, x, "m"), Err(Error::ShapeMismatch { .. })));
}

fn conv_store(kernel: [f64; 3]) -> ParameterStore<f64> {
    let mut s = ParameterStore::new();
    s.insert("c.weight", t(&[3, 1], &kernel));
    s.insert("c.bias", t(&[1], &[0.]));
    s
}

fn run_conv(store: &ParameterStore<f64>, x: &[f64], dilation: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.input(&t(&[1, x.len()], x));
    let y = conv1d_dilated(&mut tape, store, v, "c", dilation).unwrap();
    assert_eq!(tape.shape(y), &[1, x.len()]);
    tape.value(y).to_vec()
}

#[test]
fn conv_identity_kernel() {
    let s = conv_store([0., 1., 0.]);
    let x = [0.3, -1.0, 2.5, 4.0, 0.0];
    for d in 1..4 {
        assert_eq!(run_conv(&s, &x, d), x.to_vec());
    }
}

#[test]
fn conv_box_kernel_by_hand() {
    let s = conv_store([1., 1., 1.]);
    assert_eq!(run_conv(&s, &[1., 2., 3., 4.], 1), vec![3., 6., 9., 7.]);
}

#[test]
fn conv_perturbation_touches_only_dilated_taps() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k: [f64; 3] = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
    let s = conv_store(k);
    let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = run_conv(&s, &x, 4);
    let mut bumped = x.clone();
    bumped[0] += 0.5;
    let after = run_conv(&s, &bumped, 4);
    let changed: Vec<usize> = (0..12).filter(|&i| base[i] != after[i]).collect();
    assert_eq!(changed, vec![0, 4]);
}

#[test]
fn conv_rejects_zero_dilation() {
    let s = conv_store([0., 1., 0.]);
    let mut tape = Tape::new();
    let v = tape.input(&t(&[1, 3], &[1., 2., 3.]));
    assert!(matches!(conv1d_dilated(&mut tape, &s, v, "c", 0), Err(Error::InvalidDilation(0))));
}

#[test]
fn cross_entropy_uniform_and_stable() {
    let mut tape = Tape::<f64>::new();
    let l = tape.input(&Tensor::zeros(vec![4]));
    let ce = softmax_cross_entropy(&mut tape, l, 2).unwrap();
    assert!((tape.value(ce)[0] - 4f64.ln()).abs() < 1e-12);

    let mut tape = Tape::<f32>::new();
    let l = tape.input(&Tensor::from_f64(vec![2], &[1000., 0.]).unwrap());
    let ce = softmax_cross_entropy(&mut tape, l, 0).unwrap();
    let v = tape.value(ce)[0];
    assert!(v.is_finite() && v.abs() < 1e-6);
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
    // Oracle in f64 without max subtraction; the implementation runs in f32.
    let z: f64 = logits.iter().map(|x| x.exp()).sum();
    let want = -(logits[3].exp() / z).ln();
    let mut tape = Tape::<f32>::new();
    let l = tape.input(&Tensor::from_f64(vec![5], &logits).unwrap());
    let ce = softmax_cross_entropy(&mut tape, l, 3).unwrap();
    assert!((tape.value(ce)[0] as f64 - want).abs() < 1e-5);
}

#[test]
fn cross_entropy_target_out_of_range() {
    let mut tape = Tape::<f64>::new();
    let l = tape.input(&Tensor::zeros(vec![3]));
    assert!(matches!(
        softmax_cross_entropy(&mut tape, l, 3),
        Err(Error::TargetOutOfRange { target: 3, classes: 3 })
    ));
}

#[test]
fn backward_sum_of_squares() {
    let mut store = ParameterStore::<f64>::new();
    store.insert("w", t(&[2], &[1., 2.]));
    store.insert("p", t(&[1], &[5.]));
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad("w").unwrap().unwrap(), &[2., 4.]);
    // detached parameter still gets a (zero) gradient
    assert_eq!(store.grad("p").unwrap().unwrap(), &[0.]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut store = ParameterStore::<f64>::new();
    store.insert("w", t(&[2], &[1., 2.]));
    let mut tape = Tape::new();
    let w = tape.param(&store, "w").unwrap();
    assert!(matches!(tape.backward(w, &mut store), Err(Error::NonScalarLoss(_))));
}

/// Weighted sum with fixed pseudo-random weights so every output entry
/// contributes a distinct amount to the scalar.
fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Var {
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let wv = tape.input_raw(tape.shape(y).to_vec(), w).unwrap();
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p)
}

#[test]
fn every_primitive_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eps = 1e-5;
    let a = random(&mut rng, &[4, 3]);
    let b = random(&mut rng, &[3, 5]);
    let bias = random(&mut rng, &[3]);
    let sq = random(&mut rng, &[3, 3]);
    let x6 = random(&mut rng, &[6, 3]);

    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>>)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; Ok(weighted_sum(t, y)) })),
        ("add_bias", vec![a.clone(), bias.clone()], Box::new(|t, v| { let y = t.add_bias(v[0], v[1])?; Ok(weighted_sum(t, y)) })),
        ("mul", vec![a.clone(), a.clone()], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; Ok(weighted_sum(t, y)) })),
        ("relu", vec![a.clone()], Box::new(|t, v| { let y = t.relu(v[0]); Ok(weighted_sum(t, y)) })),
        ("concat_slice", vec![a.clone(), a.clone()], Box::new(|t, v| {
            let c = t.concat_cols(&[v[0], v[1]])?;
            let y = t.slice_cols(c, 2, 3)?;
            Ok(weighted_sum(t, y))
        })),
        ("gather_scatter", vec![a.clone()], Box::new(|t, v| {
            let g = t.gather_rows(v[0], vec![Some(3), None, Some(0), Some(3)])?;
            let y = t.scatter_add_rows(g, vec![1, 0, 1, 2], 3)?;
            Ok(weighted_sum(t, y))
        })),
        ("gather_cols", vec![a.clone()], Box::new(|t, v| { let y = t.gather_cols(v[0], vec![2, 0, 2])?; Ok(weighted_sum(t, y)) })),
        ("transpose", vec![a.clone()], Box::new(|t, v| { let y = t.transpose(v[0]); Ok(weighted_sum(t, y)) })),
        ("block_left", vec![sq.clone(), x6.clone()], Box::new(|t, v| { let y = t.block_left_matmul(v[0], v[1])?; Ok(weighted_sum(t, y)) })),
        ("cross_entropy", vec![a.clone()], Box::new(|t, v| t.cross_entropy(v[0], &[2, 0, 1, 1]))),
        ("conv_time", vec![x6.clone(), random(&mut rng, &[9, 2]), random(&mut rng, &[2])], Box::new(|t, v| {
            let y = conv_time(t, v[0], 3, 2, v[1], v[2])?;
            Ok(weighted_sum(t, y))
        })),
    ];
    for (name, inputs, f) in cases {
        let err = audit_inputs(&inputs, eps, |t, v| f(t, v)).unwrap();
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn fault_injection_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 3]);
    let b = random(&mut rng, &[3, 2]);
    let err = audit_inputs(&[a, b], 1e-5, |t, v| {
        t.inject_fault(GradFault::HalveMatMulRhs);
        let y = t.matmul(v[0], v[1])?;
        Ok(weighted_sum(t, y))
    })
    .unwrap();
    assert!(err > 1e-2);
}

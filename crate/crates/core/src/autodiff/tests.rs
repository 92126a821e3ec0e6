use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

const STEP: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central differences of a scalar function of one tensor.
fn finite_diff(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += STEP;
            let mut minus = x.clone();
            minus.data_mut()[i] -= STEP;
            (f(&plus) - f(&minus)) / (2.0 * STEP)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Checks d/dx of `Σ w ⊙ op(x, others...)` for every input independently.
fn check_op(inputs: &[Tensor], op: &dyn Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&mut tape, &vars);
        random(tape.value(out).shape(), &mut rng)
    };
    let eval = |ins: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&mut tape, &vars);
        tape.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    for which in 0..inputs.len() {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                t.set_requires_grad(i == which);
                tape.leaf(&t)
            })
            .collect();
        let out = op(&mut tape, &vars);
        let w = tape.constant(probe.clone());
        let weighted = tape.mul(out, w).unwrap();
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(vars[which]).unwrap().to_vec();
        let numeric = finite_diff(&inputs[which], &|x| {
            let mut ins = inputs.to_vec();
            ins[which] = x.clone();
            eval(&ins)
        });
        let err = rel_err(&analytic, &numeric);
        assert!(err < tol, "input {which}: relative error {err}");
    }
}

#[test]
fn matmul_identity_and_hand_case() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    let r = Tensor::from_rows(&[vec![1.0, 2.0]])
        .unwrap()
        .matmul(&Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap())
        .unwrap();
    assert_eq!(r.data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    check_op(&[a, b], &|t, v| t.matmul(v[0], v[1]).unwrap(), 1e-6);
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 5], &mut rng);
    let b = random(&[3, 5], &mut rng);
    let row = random(&[5], &mut rng);
    let col = random(&[3, 1], &mut rng);
    check_op(&[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]).unwrap(), 1e-6);
    check_op(&[a.clone(), b], &|t, v| t.mul(v[0], v[1]).unwrap(), 1e-6);
    check_op(&[a.clone(), row], &|t, v| t.add_row(v[0], v[1]).unwrap(), 1e-6);
    check_op(&[a.clone(), col], &|t, v| t.scale_rows(v[0], v[1]).unwrap(), 1e-6);
    check_op(&[a.clone()], &|t, v| t.gelu(v[0]), 1e-6);
    check_op(&[a.clone()], &|t, v| t.transpose(v[0]), 1e-6);
    check_op(&[a.clone()], &|t, v| t.column(v[0], 3).unwrap(), 1e-6);
    check_op(&[a.clone()], &|t, v| t.scale(v[0], -2.5), 1e-6);
    check_op(&[a], &|t, v| t.softmax(v[0]).unwrap(), 1e-6);
}

#[test]
fn top_k_softmax_matches_finite_differences_away_from_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[6, 8], &mut rng);
    check_op(&[a], &|t, v| t.top_k_softmax(v[0], 3).unwrap(), 1e-6);
}

#[test]
fn layer_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[4, 6], &mut rng);
    let g = random(&[6], &mut rng);
    let b = random(&[6], &mut rng);
    check_op(&[x, g, b], &|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(), 1e-6);
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = random(&[6, 4], &mut rng);
    let k = random(&[6, 4], &mut rng);
    let v = random(&[6, 4], &mut rng);
    check_op(&[q, k, v], &|t, x| t.attention(x[0], x[1], x[2], 3, 2).unwrap(), 1e-6);
}

#[test]
fn pooling_and_losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[6, 3], &mut rng);
    check_op(&[x.clone()], &|t, v| t.mean_groups(v[0], 3).unwrap(), 1e-6);
    check_op(&[x.clone()], &|t, v| t.cross_entropy(v[0], &[0, 2, 1, 1, 0, 2]).unwrap(), 1e-6);
    let p = Tensor::new(vec![4], softmax(&[0.3, -0.2, 0.9, 0.1])).unwrap();
    check_op(&[p], &|t, v| t.kl_divergence(v[0], &[0.25; 4]).unwrap(), 1e-6);
    check_op(&[x], &|t, v| t.reshape(v[0], vec![3, 6]).unwrap(), 1e-6);
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
    let big = softmax(&[1000.0, 0.0]);
    assert_eq!(big[0], 1.0);
    assert!(big[1] >= 0.0 && big[1] < 1e-300);
    let s = softmax(&[2.0, 1.0, 0.0]);
    // e^2, e^1, e^0 over their sum
    let z = 2f64.exp() + 1f64.exp() + 1.0;
    let expected = [2f64.exp() / z, 1f64.exp() / z, 1.0 / z];
    for (a, b) in s.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in s.iter().zip([0.6652, 0.2447, 0.0900]) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(vec![1, 4]));
    let ce = tape.cross_entropy(l, &[2]).unwrap();
    assert!((tape.value(ce).data()[0] - 4f64.ln()).abs() < 1e-12);

    let l = tape.constant(Tensor::from_rows(&[vec![0.0, 60.0]]).unwrap());
    let ce = tape.cross_entropy(l, &[1]).unwrap();
    assert!(tape.value(ce).data()[0] < 1e-20);

    let rows = [vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]];
    let labels = [2usize, 0];
    let l = tape.constant(Tensor::from_rows(&rows).unwrap());
    let ce = tape.cross_entropy(l, &labels).unwrap();
    let direct: f64 = rows
        .iter()
        .zip(labels)
        .map(|(r, y)| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            -(r[y].exp() / z).ln()
        })
        .sum::<f64>()
        / 2.0;
    assert!((tape.value(ce).data()[0] - direct).abs() < 1e-9);

    let l = tape.constant(Tensor::zeros(vec![1, 3]));
    assert!(matches!(tape.cross_entropy(l, &[3]), Err(Error::Input(_))));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(vec![2, 3]).into_param());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0).into_param());
    let sq = tape.mul(x, x).unwrap();
    let g = tape.backward(sq).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);

    assert!(matches!(tape.backward(x).map(|_| ()), Ok(())));
    let mut tape = Tape::new();
    let v = tape.leaf(&Tensor::zeros(vec![2]).into_param());
    assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
}

#[test]
fn backward_twice_accumulates_into_tensor() {
    let mut param = Tensor::scalar(3.0).into_param();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let x = tape.leaf(&param);
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(sq).unwrap();
        param.accumulate_grad(g.get(x).unwrap()).unwrap();
    }
    assert_eq!(param.grad().unwrap(), &[12.0]);
}

#[test]
fn shared_weight_accumulates_both_paths() {
    // loss = Σ (W·x)ᵀ ⊙ (W·y) style reuse: W appears in two matmuls.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = random(&[3, 3], &mut rng);
    let x = random(&[3, 2], &mut rng);
    let y = random(&[3, 2], &mut rng);
    let f = |w: &Tensor| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let wv = tape.leaf(&w.clone().into_param());
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let a = tape.matmul(wv, xv).unwrap();
        let b = tape.matmul(wv, yv).unwrap();
        let p = tape.mul(a, b).unwrap();
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap().get(wv).map(|s| s.to_vec());
        (tape.value(l).data()[0], g)
    };
    let analytic = f(&w).1.unwrap();
    let numeric = finite_diff(&w, &|w| f(w).0);
    assert!(rel_err(&analytic, &numeric) < 1e-6);
}

#[test]
fn frozen_inputs_receive_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::identity(2));
    let b = tape.leaf(&Tensor::identity(2).into_param());
    let c = tape.matmul(a, b).unwrap();
    let l = tape.sum(c);
    let g = tape.backward(l).unwrap();
    assert!(g.get(a).is_none());
    assert!(g.get(b).is_some());
}

#[test]
fn top_k_ties_go_to_lowest_index() {
    assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
    assert_eq!(top_k_indices(&[0.0; 4], 2), vec![0, 1]);
    assert_eq!(top_k_indices(&[0.0; 3], 5).len(), 3);
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        logits in prop::collection::vec(-30.0f64..30.0, 1..16),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

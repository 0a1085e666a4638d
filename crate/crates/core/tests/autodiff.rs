use std::sync::Arc;

use mmfuse::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts `v` with a fixed random tensor so every output element matters.
fn reduce(tape: &mut Tape<f64>, v: Var) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(99), &shape);
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

fn eval(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).item()
}

/// Central differences against the tape for every input element.
fn fd_check(inputs: Vec<Tensor<f64>>, build: &Build) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let h = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for j in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
            let err = (numeric - analytic[j]).abs() / numeric.abs().max(analytic[j].abs()).max(1e-6);
            assert!(err < 1e-6, "input {k}[{j}]: analytic {} numeric {numeric}", analytic[j]);
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(5)
}

#[test]
fn matmul_and_transposed_matmul() {
    let mut r = rng();
    fd_check(vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[4, 5])], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        reduce(t, y)
    });
    fd_check(vec![rand_tensor(&mut r, &[6, 4]), rand_tensor(&mut r, &[9, 4])], &|t, v| {
        let y = t.matmul_bt(v[0], v[1]).unwrap();
        reduce(t, y)
    });
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    let ins = vec![rand_tensor(&mut r, &[3, 5]), rand_tensor(&mut r, &[3, 5]), rand_tensor(&mut r, &[3, 5])];
    fd_check(ins, &|t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let b = t.sub(a, v[2]).unwrap();
        let c = t.mul(b, v[0]).unwrap();
        let d = t.scale(c, -0.7);
        let e = t.add_all(&[d, v[1], v[2]]).unwrap();
        let f = t.gelu(e);
        reduce(t, f)
    });
}

#[test]
fn relu_away_from_the_kink() {
    let x = Tensor::new(vec![2, 3], vec![0.5, -0.4, 0.9, -1.2, 0.3, 0.05]).unwrap();
    fd_check(vec![x], &|t, v| {
        let y = t.relu(v[0]);
        reduce(t, y)
    });
}

#[test]
fn row_broadcast_and_layer_norm() {
    let mut r = rng();
    let ins = vec![
        rand_tensor(&mut r, &[4, 6]),
        rand_tensor(&mut r, &[6]),
        rand_tensor(&mut r, &[6]),
        rand_tensor(&mut r, &[6]),
    ];
    fd_check(ins, &|t, v| {
        let a = t.add_row(v[0], v[3]).unwrap();
        let y = t.layer_norm(a, v[1], v[2], 1e-5).unwrap();
        reduce(t, y)
    });
}

#[test]
fn masked_softmax() {
    let mut r = rng();
    let allowed: Arc<[bool]> = (0..16).map(|i| i % 4 <= i / 4).collect::<Vec<_>>().into();
    fd_check(vec![rand_tensor(&mut r, &[4, 4])], &move |t, v| {
        let m = t.mask_fill(v[0], allowed.clone(), -1e9).unwrap();
        let s = t.softmax_rows(m).unwrap();
        reduce(t, s)
    });
}

#[test]
fn gathers_and_concatenation() {
    let mut r = rng();
    let ins = vec![rand_tensor(&mut r, &[5, 3]), rand_tensor(&mut r, &[2, 3]), rand_tensor(&mut r, &[4, 2])];
    fd_check(ins, &|t, v| {
        let e = t.embed(v[0], &[4, 1, 1, 0]).unwrap();
        let rep = t.replace_rows(e, v[1], &[0, 2]).unwrap();
        let cat = t.concat_cols(&[rep, v[2]]).unwrap();
        let sl = t.slice_cols(cat, 1, 3).unwrap();
        let sel = t.select_rows(sl, &[3, 0, 3]).unwrap();
        let rows = t.concat_rows(&[sel, v[1]]).unwrap();
        reduce(t, rows)
    });
}

#[test]
fn dropout_scales_by_keep_mask() {
    let mut r = rng();
    fd_check(vec![rand_tensor(&mut r, &[2, 3])], &|t, v| {
        let d = t.dropout(v[0], vec![2.0, 0.0, 2.0, 2.0, 0.0, 0.0]).unwrap();
        reduce(t, d)
    });
}

#[test]
fn losses() {
    let mut r = rng();
    fd_check(vec![rand_tensor(&mut r, &[4, 7])], &|t, v| {
        t.cross_entropy(v[0], &[Some(3), None, Some(0), Some(6)]).unwrap()
    });
    fd_check(vec![rand_tensor(&mut r, &[3, 3]), rand_tensor(&mut r, &[3, 3])], &|t, v| t.l1_loss(v[0], v[1]).unwrap());
    for label in [0.0, 1.0] {
        fd_check(vec![rand_tensor(&mut r, &[1, 1])], &move |t, v| t.bce_with_logits(v[0], label).unwrap());
    }
}

#[test]
fn gradients_accumulate_over_reuse() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap());
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let s = tape.sum(z);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, -3.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let p = tape.param(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
    let y = tape.mul(c, p).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(p).unwrap(), &[1.0, 2.0]);
}

#[test]
fn shape_errors_name_both_operands() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::zeros(&[2, 3]));
    let b = tape.param(Tensor::zeros(&[2, 2]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    assert!(tape.add(a, b).is_err());
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..7, 1usize..9, 1usize..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_naive_product((m, k, n) in dims(), seed in 0u64..1000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut r, &[m, k]);
        let b = rand_tensor(&mut r, &[k, n]);
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum();
                prop_assert!((c.data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposing_twice_is_identity((m, _k, n) in dims(), seed in 0u64..1000) {
        let a = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[m, n]);
        prop_assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn softmax_rows_are_distributions((m, _k, n) in dims(), seed in 0u64..1000) {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[m, n]).map(|v| v * 30.0));
        let s = tape.softmax_rows(x).unwrap();
        for row in tape.value(s).data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized((m, _k, n) in dims(), seed in 0u64..1000) {
        prop_assume!(n >= 2);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[m, n]));
        let g = tape.param(Tensor::filled(&[n], 1.0));
        let b = tape.param(Tensor::zeros(&[n]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        for row in tape.value(y).data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_shapes_match_values((m, k, n) in dims(), seed in 0u64..1000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let a = tape.param(rand_tensor(&mut r, &[m, k]));
        let b = tape.param(rand_tensor(&mut r, &[k, n]));
        let c = tape.matmul(a, b).unwrap();
        let g = tape.gelu(c);
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        prop_assert_eq!(tape.grad(a).unwrap().len(), m * k);
        prop_assert_eq!(tape.grad(b).unwrap().len(), k * n);
    }
}

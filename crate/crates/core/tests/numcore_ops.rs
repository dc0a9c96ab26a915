use ivy_core::numcore::gradcheck::{numeric_gradient, relative_error};
use ivy_core::numcore::{Tape, Tensor, Var};
use ivy_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(vec![rows, cols], v.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i = tape.leaf(&Tensor::identity(2));
    let m = tape.leaf(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let c = tape.matmul(i, m).unwrap();
    assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);

    let z = tape.leaf(&Tensor::zeros(&[2, 3]));
    let c = tape.matmul(i, z).unwrap();
    assert_eq!(tape.shape(c), &[2, 3]);
    assert!(tape.value(c).iter().all(|&v| v == 0.0));

    let a = tape.leaf(&t2(1, 2, &[1.0, 2.0]));
    let b = tape.leaf(&t2(2, 1, &[3.0, 4.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(&Tensor::zeros(&[2, 3]));
    let b = tape.leaf(&Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t2(1, 2, &[0.0, 0.0]));
    let y = tape.softmax(x, 1).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5]);

    let x = tape.leaf(&t2(1, 2, &[2f64.ln(), 0.0]));
    let y = tape.softmax(x, 1).unwrap();
    assert!((tape.value(y)[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((tape.value(y)[1] - 1.0 / 3.0).abs() < 1e-15);

    let x = tape.leaf(&t2(1, 2, &[1000.0, 0.0]));
    let y = tape.softmax(x, 1).unwrap();
    assert_eq!(tape.value(y)[0], 1.0);
    assert!(tape.value(y)[1] < 1e-300);
}

#[test]
fn softmax_rejects_nan() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&[2], vec![f64::NAN, 0.0]).unwrap();
    assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
}

#[test]
fn softmax_slices_sum_to_one_at_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let v: Vec<f32> = (0..24)
            .map(|_| {
                let s: f32 = rng.random_range(-1.0..1.0);
                if rng.random_bool(0.3) {
                    s.signum() * 1e4
                } else {
                    s * 50.0
                }
            })
            .collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&[2, 3, 4], v).unwrap();
        for axis in 0..3 {
            let y = tape.softmax(x, axis).unwrap();
            let vals = tape.value(y);
            let sh = [2usize, 3, 4];
            let inner: usize = sh[axis + 1..].iter().product();
            let outer: usize = sh[..axis].iter().product();
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..sh[axis])
                        .map(|j| vals[o * sh[axis] * inner + j * inner + i] as f64)
                        .sum();
                    assert!((s - 1.0).abs() <= 1e-6, "axis {axis} sum {s}");
                }
            }
        }
    }
}

#[test]
fn layernorm_examples() {
    let mut tape = Tape::<f64>::new();
    let ones = tape.leaf(&Tensor::full(&[3], 1.0));
    let zeros = tape.leaf(&Tensor::zeros(&[3]));
    let x = tape.leaf(&t2(1, 3, &[5.0, 5.0, 5.0]));
    let y = tape.layernorm(x, ones, zeros, 1e-5).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));

    let g2 = tape.leaf(&Tensor::full(&[2], 1.0));
    let b2 = tape.leaf(&Tensor::zeros(&[2]));
    let x = tape.leaf(&t2(1, 2, &[1.0, -1.0]));
    let y = tape.layernorm(x, g2, b2, 0.0).unwrap();
    assert_eq!(tape.value(y), &[1.0, -1.0]);

    let gz = tape.leaf(&Tensor::zeros(&[3]));
    let bias = tape.leaf(&Tensor::from_vec(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
    let x = tape.leaf(&t2(2, 3, &[1.0, 7.0, -2.0, 0.5, 0.25, 9.0]));
    let y = tape.layernorm(x, gz, bias, 1e-5).unwrap();
    assert_eq!(tape.value(y), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
}

#[test]
fn layernorm_normalises_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::randn(&[4, 16], 3.0, &mut rng));
    let g = tape.leaf(&Tensor::full(&[16], 1.0));
    let b = tape.leaf(&Tensor::zeros(&[16]));
    let y = tape.layernorm(x, g, b, 1e-12).unwrap();
    for row in tape.value(y).chunks(16) {
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn layernorm_length_mismatch_is_dimension_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::zeros(&[2, 3]));
    let g = tape.leaf(&Tensor::zeros(&[2]));
    let b = tape.leaf(&Tensor::zeros(&[3]));
    assert!(matches!(tape.layernorm(x, g, b, 1e-5), Err(Error::Dimension(_))));
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(&Tensor::zeros(&[1, 4]));
    let l = tape.cross_entropy(logits, &[2], &[true]).unwrap();
    assert!((tape.scalar_value(l) - 4f64.ln()).abs() < 1e-12);

    let peaked = tape.leaf(&t2(1, 3, &[0.0, 30.0, 0.0]));
    let l = tape.cross_entropy(peaked, &[1], &[true]).unwrap();
    assert!(tape.scalar_value(l) < 1e-12);

    let two = tape.leaf(&t2(2, 3, &[0.3, -1.0, 2.0, 5.0, 0.0, 0.0]));
    let masked = tape.cross_entropy(two, &[0, 2], &[true, false]).unwrap();
    let first = tape.leaf(&t2(1, 3, &[0.3, -1.0, 2.0]));
    let single = tape.cross_entropy(first, &[0], &[true]).unwrap();
    assert_eq!(tape.scalar_value(masked), tape.scalar_value(single));

    let err = tape.cross_entropy(two, &[0, 2], &[false, false]).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::from_vec(vec![2, 3], vec![1.0; 6]).unwrap().with_grad(true));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::from_vec(vec![1], vec![3.0]).unwrap().with_grad(true));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[12.0], "second backward accumulates");
    tape.zero_grads();
    assert!(tape.grad(x).is_none());
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::full(&[3], 2.0).with_grad(true));
    let unused = tape.leaf(&Tensor::full(&[2], 1.0).with_grad(true));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_contract_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::full(&[3], 2.0).with_grad(true));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn backward_is_linear_in_the_loss() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng).with_grad(true);
        let wt = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng).with_grad(true);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let grads = |ca: f64, cb: f64| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(&xt);
            let w = tape.leaf(&wt);
            let h = tape.linear(x, w).unwrap();
            let g = tape.gelu(h);
            let l1 = tape.sum(g);
            let sm = tape.log_softmax(h).unwrap();
            let l2 = tape.mean(sm);
            let l1s = tape.scale(l1, ca);
            let l2s = tape.scale(l2, cb);
            let l = tape.add(l1s, l2s).unwrap();
            tape.backward(l).unwrap();
            [tape.grad(x).unwrap().to_vec(), tape.grad(w).unwrap().to_vec()].concat()
        };
        let combined = grads(a, b);
        let (g1, g2) = (grads(1.0, 0.0), grads(0.0, 1.0));
        for i in 0..combined.len() {
            assert!((combined[i] - (a * g1[i] + b * g2[i])).abs() <= 1e-10);
        }
    }
}

/// Builds a scalar loss `Σ out ⊙ R` from an op output with a fixed random
/// projection `R`, then compares tape gradients with central differences.
fn gradcheck<F>(shapes: &[&[usize]], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| Tensor::randn(s, 1.0, &mut rng).with_grad(true))
        .collect();
    let proj_seed: u64 = rng.random();

    let loss_of = |tape: &mut Tape<f64>, vars: &[Var]| {
        let out = build(tape, vars);
        let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
        let r = Tensor::<f64>::randn(tape.shape(out), 1.0, &mut prng);
        let rv = tape.leaf(&r);
        let prod = tape.mul(out, rv).unwrap();
        tape.sum(prod)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = loss_of(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = numeric_gradient(
        |x| {
            let mut tape = Tape::new();
            let mut off = 0;
            let vars: Vec<Var> = inputs
                .iter()
                .map(|t| {
                    let part = x[off..off + t.len()].to_vec();
                    off += t.len();
                    tape.leaf(&Tensor::from_vec(t.shape().to_vec(), part).unwrap())
                })
                .collect();
            let l = loss_of(&mut tape, &vars);
            tape.scalar_value(l)
        },
        &flat,
        1e-5,
    );
    relative_error(&analytic, &numeric)
}

macro_rules! grad_test {
    ($name:ident, $shapes:expr, |$t:ident, $v:ident| $body:expr) => {
        #[test]
        fn $name() {
            for seed in 0..20 {
                let err = gradcheck($shapes, seed, |$t, $v| $body);
                assert!(err <= 1e-4, "seed {seed}: relative error {err:.3e}");
            }
        }
    };
}

grad_test!(grad_matmul, &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap());
grad_test!(grad_linear, &[&[3, 4], &[5, 4]], |t, v| t.linear(v[0], v[1]).unwrap());
grad_test!(grad_add, &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]).unwrap());
grad_test!(grad_sub, &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]).unwrap());
grad_test!(grad_mul, &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]).unwrap());
grad_test!(grad_add_row, &[&[3, 4], &[4]], |t, v| t.add_row(v[0], v[1]).unwrap());
grad_test!(grad_scale, &[&[5]], |t, v| t.scale(v[0], -1.7));
grad_test!(grad_gelu, &[&[3, 3]], |t, v| t.gelu(v[0]));
grad_test!(grad_exp, &[&[6]], |t, v| t.exp(v[0]));
grad_test!(grad_log_sigmoid, &[&[6]], |t, v| {
    let big = t.scale(v[0], 8.0);
    t.log_sigmoid(big)
});
grad_test!(grad_softmax_axis0, &[&[3, 2, 4]], |t, v| t.softmax(v[0], 0).unwrap());
grad_test!(grad_softmax_axis1, &[&[3, 2, 4]], |t, v| t.softmax(v[0], 1).unwrap());
grad_test!(grad_softmax_axis2, &[&[3, 2, 4]], |t, v| t.softmax(v[0], 2).unwrap());
grad_test!(grad_causal_softmax, &[&[5, 5]], |t, v| t.causal_softmax(v[0]).unwrap());
grad_test!(grad_log_softmax, &[&[3, 5]], |t, v| t.log_softmax(v[0]).unwrap());
grad_test!(grad_layernorm, &[&[3, 6], &[6], &[6]], |t, v| t
    .layernorm(v[0], v[1], v[2], 1e-5)
    .unwrap());
grad_test!(grad_cross_entropy, &[&[4, 5]], |t, v| t
    .cross_entropy(v[0], &[1, 4, 0, 2], &[true, false, true, true])
    .unwrap());
grad_test!(grad_gather_rows, &[&[4, 3]], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap());
grad_test!(grad_slice_cols, &[&[3, 6]], |t, v| t.slice_cols(v[0], 2, 3).unwrap());
grad_test!(grad_concat_cols, &[&[3, 2], &[3, 4]], |t, v| t.concat_cols(v).unwrap());
grad_test!(grad_concat_rows, &[&[2, 3], &[4, 3]], |t, v| t.concat_rows(v).unwrap());
grad_test!(grad_pick, &[&[3, 4]], |t, v| t.pick(v[0], &[3, 0, 1]).unwrap());
grad_test!(grad_reshape, &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]).unwrap());
grad_test!(grad_sum, &[&[2, 3]], |t, v| t.sum(v[0]));
grad_test!(grad_mean, &[&[2, 3]], |t, v| t.mean(v[0]));
grad_test!(grad_clipped_surrogate, &[&[8]], |t, v| {
    let small = t.scale(v[0], 0.3);
    t.clipped_surrogate(
        small,
        &[0.1, -0.2, 0.05, 0.0, 0.3, -0.1, 0.2, -0.3],
        &[1.0, -0.5, 2.0, -1.0, 0.7, 1.3, -2.0, 0.4],
        0.2,
    )
    .unwrap()
});

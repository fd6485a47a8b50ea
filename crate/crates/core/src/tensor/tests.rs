use super::*;
use crate::rng::SplitMix64;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

type OpFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>;

/// Loss used by the checks: a fixed random weighting of the op output, so
/// every output element contributes a distinct coefficient.
fn weighted_loss(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let mut rng = SplitMix64::new(seed ^ 0xABCD);
    let w = random(tape.shape(out), &mut rng);
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

fn eval_loss(inputs: &[Tensor<f64>], f: &OpFn, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = weighted_loss(&mut tape, out, seed);
    tape.value(loss).item()
}

/// Max element-wise relative error between analytic and central-difference
/// gradients. Denominators are floored at 1e-3 so near-zero gradients are
/// compared on an absolute scale.
fn grad_check(inputs: Vec<Tensor<f64>>, f: &OpFn, seed: u64) -> f64 {
    let eps = 1e-4;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = weighted_loss(&mut tape, out, seed);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().to_vec();
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= eps;
            let numeric = (eval_loss(&plus, f, seed) - eval_loss(&minus, f, seed)) / (2.0 * eps);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
        }
    }
    worst
}

fn check_op(name: &str, shapes: &[&[usize]], f: &OpFn) {
    check_op_with(name, shapes, |t| t, f)
}

fn check_op_with(
    name: &str,
    shapes: &[&[usize]],
    prep: impl Fn(Tensor<f64>) -> Tensor<f64>,
    f: &OpFn,
) {
    for seed in 0..20u64 {
        let mut rng = SplitMix64::derive(seed, &[name.len() as u64]);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| prep(random(s, &mut rng))).collect();
        let err = grad_check(inputs, f, seed);
        assert!(err <= 1e-4, "{name}: seed {seed} relative error {err:e}");
    }
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t64(&[2, 2], &[1., 2., 3., 4.]));
    let i = tape.constant(t64(&[2, 2], &[1., 0., 0., 1.]));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);
}

#[test]
fn masked_mean_skips_masked_entries() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[5., 7., 9.]));
    let m = tape.masked_mean(x, 0, Some(&[true, true, false])).unwrap();
    assert_eq!(tape.value(m).item(), 6.0);
}

#[test]
fn concat_last_axis() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t64(&[2], &[1., 2.]));
    let b = tape.constant(t64(&[1], &[3.]));
    let c = tape.concat(&[a, b]).unwrap();
    assert_eq!(tape.value(c).data(), &[1., 2., 3.]);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
}

#[test]
fn non_finite_output_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t64(&[1], &[0.0]));
    assert_eq!(tape.log(a).unwrap_err(), TensorError::NonFinite { op: "log" });
    let big = tape.constant(t64(&[1], &[1000.0]));
    assert!(matches!(tape.exp(big), Err(TensorError::NonFinite { .. })));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[3], &[0.3, -1.0, 2.0]).with_grad());
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1., 1., 1.]);
}

#[test]
fn backward_of_sum_of_squares_is_two_x() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[2., -3.]).with_grad());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[4., -6.]);
}

#[test]
fn unused_leaf_gets_zero_grad() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1., 2.]).with_grad());
    let unused = tape.leaf(t64(&[3], &[1., 2., 3.]).with_grad());
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(unused).unwrap(), &[0., 0., 0.]);
}

#[test]
fn backward_rejects_non_scalar_and_second_call() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1., 2.]).with_grad());
    assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.backward(s).unwrap_err(), TensorError::TapeConsumed);
    tape.reset();
    let x = tape.leaf(t64(&[2], &[1., 2.]).with_grad());
    let s = tape.sum(x).unwrap();
    assert!(tape.backward(s).is_ok());
}

#[test]
fn cross_entropy_reference_values() {
    let cases: [(&[f64], f64); 3] = [
        (&[10., -10., -10., 10.], 2.061_153_620_314_380_7e-9),
        (&[0., 0., 0., 0.], std::f64::consts::LN_2),
        (&[2., 0., 0., 2.], (1.0 + (-2.0f64).exp()).ln()),
    ];
    for (logits, want) in cases {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(t64(&[2, 2], logits));
        let loss = tape.softmax_cross_entropy(l, &[0, 1]).unwrap();
        let got = tape.value(loss).item();
        assert!((got - want).abs() <= 1e-12 * want.max(1e-9), "{got} vs {want}");
    }
    assert!(((1.0 + (-2.0f64).exp()).ln() - 0.126_928).abs() < 1e-6);
}

#[test]
fn cross_entropy_errors() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::zeros(vec![2, 2]));
    assert!(matches!(
        tape.softmax_cross_entropy(l, &[0, 2]),
        Err(TensorError::IndexOutOfRange { index: 2, .. })
    ));
    assert_eq!(
        tape.softmax_cross_entropy(l, &[]).unwrap_err(),
        TensorError::EmptyBatch
    );
}

#[test]
fn uniform_logits_give_log_c() {
    for c in [2usize, 3, 7, 64] {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(vec![3, c]));
        let loss = tape.softmax_cross_entropy(l, &[0, 1 % c, 2 % c]).unwrap();
        assert!((tape.value(loss).item() - (c as f64).ln()).abs() < 1e-14);
    }
}

#[test]
fn l2_normalize_examples() {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(t64(&[2], &[3., 4.]));
    let n = tape.l2_normalize(v, 0).unwrap();
    let d = tape.value(n).data();
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    let z = tape.constant(t64(&[2], &[0., 0.]));
    let err = tape.l2_normalize(z, 0).unwrap_err();
    assert_eq!(err, TensorError::ZeroNorm { index: 0 });
    assert!(err.to_string().contains("zero-norm"));
}

#[test]
fn l2_normalize_random_vectors_have_unit_norm() {
    let mut rng = SplitMix64::new(11);
    for _ in 0..100 {
        let mut tape = Tape::<f32>::new();
        let x = random(&[17], &mut rng).cast::<f32>();
        let v = tape.constant(x);
        let n = tape.l2_normalize(v, 0).unwrap();
        let norm: f64 = tape
            .value(n)
            .data()
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() <= 1e-6, "{norm}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    check_op("matmul", &[&[3, 4], &[4, 2]], &|t, v| t.matmul(v[0], v[1]));
    check_op("bmm", &[&[2, 3, 4], &[2, 4, 2]], &|t, v| t.matmul(v[0], v[1]));
    check_op("matmul_shared", &[&[2, 3, 4], &[4, 5]], &|t, v| {
        t.matmul(v[0], v[1])
    });
    check_op("transpose", &[&[2, 3, 4]], &|t, v| t.transpose(v[0]));
    check_op("add", &[&[3, 4], &[3, 4]], &|t, v| t.add(v[0], v[1]));
    check_op("add_row", &[&[2, 3, 4], &[4]], &|t, v| t.add_row(v[0], v[1]));
    check_op("sub", &[&[3, 4], &[3, 4]], &|t, v| t.sub(v[0], v[1]));
    check_op("mul", &[&[3, 4], &[3, 4]], &|t, v| t.mul(v[0], v[1]));
    check_op("scale", &[&[5]], &|t, v| t.scale(v[0], 0.37));
    check_op("scale_by", &[&[2, 3], &[]], &|t, v| t.scale_by(v[0], v[1]));
    check_op("exp", &[&[6]], &|t, v| t.exp(v[0]));
    check_op_with(
        "log",
        &[&[6]],
        |x| Tensor::new(vec![6], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap(),
        &|t, v| t.log(v[0]),
    );
    check_op_with(
        "abs",
        &[&[6]],
        |x| {
            let d = x.data().iter().map(|&v| if v.abs() < 0.05 { v + 0.2 } else { v });
            Tensor::new(vec![6], d.collect()).unwrap()
        },
        &|t, v| t.abs(v[0]),
    );
    check_op("gelu", &[&[8]], &|t, v| t.gelu(v[0]));
    check_op("concat", &[&[2, 3], &[2, 1], &[2, 2]], &|t, v| {
        t.concat(&[v[0], v[1], v[2]])
    });
    check_op("mean", &[&[3, 4]], &|t, v| t.masked_mean(v[0], 1, None));
    check_op("masked_mean", &[&[2, 3, 4]], &|t, v| {
        t.masked_mean(v[0], 1, Some(&[true, false, true, true, true, false]))
    });
    check_op("sum", &[&[2, 3]], &|t, v| t.sum(v[0]));
    check_op("layer_norm", &[&[3, 6], &[6], &[6]], &|t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    check_op("embedding", &[&[5, 3]], &|t, v| t.embedding(v[0], &[4, 0, 4, 2]));
    check_op("softmax", &[&[3, 5]], &|t, v| t.softmax(v[0]));
    check_op("masked_softmax", &[&[2, 2, 3]], &|t, v| {
        t.masked_softmax(v[0], &[true, true, false, true, false, true])
    });
    check_op("cross_entropy", &[&[4, 3]], &|t, v| {
        t.softmax_cross_entropy(v[0], &[0, 2, 1, 2])
    });
    check_op("l2_rows", &[&[3, 4]], &|t, v| t.l2_normalize(v[0], 1));
    check_op("l2_cols", &[&[3, 4]], &|t, v| t.l2_normalize(v[0], 0));
    check_op("reshape", &[&[2, 6]], &|t, v| t.reshape(v[0], &[3, 4]));
    check_op("permute", &[&[2, 3, 2, 2]], &|t, v| t.permute(v[0], &[0, 2, 1, 3]));
}

#[test]
fn layer_norm_then_sum_matches_finite_differences() {
    // A plain sum is invariant to shifts of a normalized row, so this
    // exercises the near-zero gradient regime of the layer norm.
    for seed in 0..20 {
        let mut rng = SplitMix64::new(100 + seed);
        let x = random(&[2, 5], &mut rng);
        let gain = random(&[5], &mut rng);
        let bias = random(&[5], &mut rng);
        let f: &OpFn = &|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        };
        assert!(grad_check(vec![x, gain, bias], f, seed) <= 1e-4);
    }
}

#[test]
fn gradient_of_summed_losses_is_sum_of_gradients() {
    let mut rng = SplitMix64::new(5);
    let x0 = random(&[4, 3], &mut rng);
    let w = random(&[3, 3], &mut rng);
    let f1 = |t: &mut Tape<f64>, x: Var| -> Var {
        let e = t.exp(x).unwrap();
        t.sum(e).unwrap()
    };
    let wv = w.clone();
    let f2 = move |t: &mut Tape<f64>, x: Var| -> Var {
        let w = t.constant(wv.clone());
        let y = t.matmul(x, w).unwrap();
        t.softmax_cross_entropy(y, &[0, 1, 2, 0]).unwrap()
    };
    let grad_of = |which: u8| -> Vec<f64> {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone().with_grad());
        let loss = match which {
            1 => f1(&mut t, x),
            2 => f2(&mut t, x),
            _ => {
                let a = f1(&mut t, x);
                let b = f2(&mut t, x);
                t.add(a, b).unwrap()
            }
        };
        t.backward(loss).unwrap().get(x).unwrap().to_vec()
    };
    let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(3));
    for i in 0..g12.len() {
        assert_eq!(g12[i], g2[i] + g1[i]);
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = SplitMix64::new(9);
        let mut t = Tape::<f32>::new();
        let a = t.constant(random(&[8, 16], &mut rng).cast());
        let b = t.constant(random(&[16, 8], &mut rng).cast());
        let g = t.constant(random(&[8], &mut rng).cast());
        let z = t.constant(random(&[8], &mut rng).cast());
        let c = t.matmul(a, b).unwrap();
        let c = t.layer_norm(c, g, z, 1e-5).unwrap();
        let c = t.gelu(c).unwrap();
        let c = t.softmax(c).unwrap();
        t.value(c).data().to_vec()
    };
    let (x, y) = (run(), run());
    assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn permute_roundtrip_restores_data() {
    let mut rng = SplitMix64::new(3);
    let x = random(&[2, 3, 4, 5], &mut rng);
    let mut t = Tape::<f64>::new();
    let v = t.constant(x.clone());
    let p = t.permute(v, &[2, 0, 3, 1]).unwrap();
    assert_eq!(t.shape(p), &[4, 2, 5, 3]);
    let back = t.permute(p, &[1, 3, 0, 2]).unwrap();
    assert_eq!(t.value(back).data(), x.data());
}

#[test]
fn masked_softmax_zeroes_masked_columns() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(t64(&[2, 3], &[1., 2., 3., 1., 2., 3.]));
    let y = t.masked_softmax(x, &[true, false, true]).unwrap();
    let d = t.value(y).data();
    assert_eq!(d[1], 0.0);
    assert_eq!(d[4], 0.0);
    assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
}

// --- Adam -------------------------------------------------------------------

/// Independent textbook Adam, written without the shared state type.
fn reference_adam(p0: &[f64], grads: &[Vec<f64>], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut p = p0.to_vec();
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    p
}

#[test]
fn adam_zero_gradient_leaves_params_unchanged() {
    let mut p = vec![0.5, -1.5, 2.0];
    let mut st = AdamState::new(3, AdamConfig::with_lr(0.1));
    adam_step(&mut p, &[0.0; 3], &mut st).unwrap();
    assert_eq!(p, vec![0.5, -1.5, 2.0]);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let lr = 0.01;
    let mut p = vec![0.0; 4];
    let g = [0.3f64, -2.0, 1e-2, -7.5];
    let mut st = AdamState::new(4, AdamConfig::with_lr(lr));
    adam_step(&mut p, &g, &mut st).unwrap();
    for (pi, gi) in p.iter().zip(g) {
        assert!((pi + lr * gi.signum()).abs() < 1e-8, "{pi}");
    }
}

#[test]
fn adam_matches_reference_over_50_steps() {
    let mut rng = SplitMix64::new(77);
    let p0: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
    let grads: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..10).map(|_| rng.normal()).collect())
        .collect();
    let mut p = p0.clone();
    let mut st = AdamState::new(10, AdamConfig::with_lr(1e-2));
    for g in &grads {
        adam_step(&mut p, g, &mut st).unwrap();
    }
    let want = reference_adam(&p0, &grads, 1e-2);
    for (a, b) in p.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-6);
    }
    assert_eq!(st.step, 50);
    assert!(st.v.iter().all(|&v| v >= 0.0));
}

#[test]
fn adam_rejects_shape_mismatch() {
    let mut p = vec![0.0; 3];
    let mut st = AdamState::new(3, AdamConfig::default());
    assert!(adam_step(&mut p, &[0.0; 2], &mut st).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn cross_entropy_is_non_negative(
            logits in proptest::collection::vec(-30.0f64..30.0, 12),
            targets in proptest::collection::vec(0usize..4, 3),
        ) {
            let mut t = Tape::<f64>::new();
            let l = t.constant(Tensor::new(vec![3, 4], logits).unwrap());
            let loss = t.softmax_cross_entropy(l, &targets).unwrap();
            prop_assert!(t.value(loss).item() >= 0.0);
        }

        #[test]
        fn l2_normalized_rows_are_unit(
            data in proptest::collection::vec(-5.0f64..5.0, 12)
                .prop_filter("non-zero rows", |d| d.chunks(4).all(|r| r.iter().any(|x| x.abs() > 1e-3))),
        ) {
            let mut t = Tape::<f64>::new();
            let x = t.constant(Tensor::new(vec![3, 4], data).unwrap());
            let y = t.l2_normalize(x, 1).unwrap();
            for row in t.value(y).data().chunks(4) {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tas_tensor::gradcheck::GradCheck;
use tas_tensor::tape::attention_window;
use tas_tensor::{Result, Tape, Tensor, Var};

const TRIALS: u64 = 10;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, so every output entry
/// contributes a distinct amount to the scalar under test.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let w = random(&mut rng, &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn check<F>(name: &str, shapes: &[&[usize]], range: (f64, f64), f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Copy,
{
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, range.0, range.1)).collect();
        let report = GradCheck::default()
            .run(&inputs, |tape, v| {
                let out = f(tape, v)?;
                weighted_sum(tape, out, trial)
            })
            .unwrap();
        assert!(
            report.max_rel_error < TOL,
            "{name} trial {trial}: rel error {:.3e} (analytic {}, numeric {})",
            report.max_rel_error,
            report.analytic,
            report.numeric
        );
    }
}

#[test]
fn elementwise_binary_gradients() {
    check("add", &[&[3, 4], &[3, 4]], (-2.0, 2.0), |t, v| t.add(v[0], v[1]));
    check("sub", &[&[3, 4], &[3, 4]], (-2.0, 2.0), |t, v| t.sub(v[0], v[1]));
    check("mul", &[&[3, 4], &[3, 4]], (-2.0, 2.0), |t, v| t.mul(v[0], v[1]));
    check("div", &[&[3, 4], &[3, 4]], (0.5, 2.0), |t, v| t.div(v[0], v[1]));
    check("add_row", &[&[3, 4], &[4]], (-2.0, 2.0), |t, v| t.add_row(v[0], v[1]));
    check("mul_row", &[&[3, 4], &[4]], (-2.0, 2.0), |t, v| t.mul_row(v[0], v[1]));
    check("mul_col", &[&[3, 4], &[3, 1]], (-2.0, 2.0), |t, v| t.mul_col(v[0], v[1]));
}

#[test]
fn elementwise_unary_gradients() {
    check("exp", &[&[2, 5]], (-2.0, 2.0), |t, v| Ok(t.exp(v[0])));
    check("log", &[&[2, 5]], (0.2, 3.0), |t, v| Ok(t.log(v[0])));
    check("sigmoid", &[&[2, 5]], (-4.0, 4.0), |t, v| Ok(t.sigmoid(v[0])));
    check("tanh", &[&[2, 5]], (-2.0, 2.0), |t, v| Ok(t.tanh(v[0])));
    check("sqrt", &[&[2, 5]], (0.2, 3.0), |t, v| Ok(t.sqrt(v[0])));
    check("square", &[&[2, 5]], (-2.0, 2.0), |t, v| Ok(t.square(v[0])));
    check("scale", &[&[2, 5]], (-2.0, 2.0), |t, v| Ok(t.scale(v[0], -1.7)));
    check("add_scalar", &[&[2, 5]], (-2.0, 2.0), |t, v| Ok(t.add_scalar(v[0], 0.3)));
    // kinks at 0 and at the clamp bounds are avoided by the sampling range
    check("relu", &[&[2, 5]], (0.05, 2.0), |t, v| Ok(t.relu(v[0])));
    check("relu_neg", &[&[2, 5]], (-2.0, -0.05), |t, v| Ok(t.relu(v[0])));
    check("abs", &[&[2, 5]], (0.05, 2.0), |t, v| {
        let n = t.scale(v[0], -1.0);
        Ok(t.abs(n))
    });
    check("clamp", &[&[2, 5]], (-0.45, 0.45), |t, v| Ok(t.clamp(v[0], -0.5, 0.5)));
}

#[test]
fn linear_algebra_gradients() {
    check("matmul", &[&[3, 4], &[4, 2]], (-1.0, 1.0), |t, v| t.matmul(v[0], v[1]));
    check("transpose", &[&[3, 4]], (-1.0, 1.0), |t, v| t.transpose(v[0]));
    check("reshape", &[&[3, 4]], (-1.0, 1.0), |t, v| t.reshape(v[0], vec![2, 6]));
}

#[test]
fn normalisation_gradients() {
    check("softmax_rows", &[&[3, 5]], (-3.0, 3.0), |t, v| t.softmax(v[0], 1));
    check("softmax_cols", &[&[3, 5]], (-3.0, 3.0), |t, v| t.softmax(v[0], 0));
    check("log_softmax", &[&[3, 5]], (-3.0, 3.0), |t, v| t.log_softmax(v[0]));
    check("layer_norm", &[&[3, 5]], (-3.0, 3.0), |t, v| t.layer_norm(v[0]));
    check("instance_norm", &[&[6, 3]], (-3.0, 3.0), |t, v| t.instance_norm(v[0]));
    check("normalize_rows", &[&[3, 4]], (0.1, 2.0), |t, v| t.normalize_rows(v[0]));
}

#[test]
fn convolution_and_attention_gradients() {
    for dilation in [1, 2, 4] {
        check("conv1d", &[&[9, 3], &[3, 3, 2], &[2]], (-1.0, 1.0), |t, v| {
            t.conv1d(v[0], v[1], Some(v[2]), dilation)
        });
    }
    check("conv1d_no_bias", &[&[7, 2], &[5, 2, 3]], (-1.0, 1.0), |t, v| t.conv1d(v[0], v[1], None, 2));
    for window in [1, 2, 4, 16] {
        check("local_attention", &[&[8, 3], &[8, 3], &[8, 2]], (-1.5, 1.5), |t, v| {
            t.local_attention(v[0], v[1], v[2], window)
        });
    }
}

#[test]
fn reduction_and_structural_gradients() {
    check("sum", &[&[3, 4]], (-1.0, 1.0), |t, v| Ok(t.sum(v[0])));
    check("mean", &[&[3, 4]], (-1.0, 1.0), |t, v| Ok(t.mean(v[0])));
    check("sum_axis0", &[&[3, 4]], (-1.0, 1.0), |t, v| t.sum_axis(v[0], 0));
    check("sum_axis1", &[&[3, 4]], (-1.0, 1.0), |t, v| t.sum_axis(v[0], 1));
    check("mean_axis", &[&[3, 4]], (-1.0, 1.0), |t, v| t.mean_axis(v[0], 0));
    check("concat_cols", &[&[3, 2], &[3, 4]], (-1.0, 1.0), |t, v| t.concat_cols(&[v[0], v[1]]));
    check("concat_rows", &[&[2, 3], &[4, 3]], (-1.0, 1.0), |t, v| t.concat_rows(&[v[0], v[1], v[0]]));
    check("slice_rows", &[&[5, 3]], (-1.0, 1.0), |t, v| t.slice_rows(v[0], 1, 4));
    check("slice_cols", &[&[3, 5]], (-1.0, 1.0), |t, v| t.slice_cols(v[0], 2, 5));
    check("embedding", &[&[4, 3]], (-1.0, 1.0), |t, v| t.embedding(v[0], &[2, 0, 2, 3]));
    check("gather", &[&[3, 4]], (-1.0, 1.0), |t, v| t.gather(v[0], &[3, 0, 1]));
}

#[test]
fn composite_graph_gradient() {
    // a tiny attention block with a residual and a cross-entropy-like tail
    check("composite", &[&[6, 4], &[4, 4], &[4, 3]], (-1.0, 1.0), |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.relu(h);
        let n = t.instance_norm(h)?;
        let a = t.local_attention(n, n, n, 3)?;
        let r = t.add(a, v[0])?;
        let logits = t.matmul(r, v[2])?;
        let lp = t.log_softmax(logits)?;
        t.gather(lp, &[0, 1, 2, 0, 1, 2])
    });
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::eye(2));
    let ii = tape.matmul(i, i).unwrap();
    assert_eq!(tape.value(ii), &Tensor::eye(2));

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
    let ab = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(ab).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_gradient_is_broadcast_column_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[4, 5], -1.0, 1.0);
    let mut tape = Tape::new();
    let va = tape.leaf(a, true);
    let vb = tape.constant(b.clone());
    let ab = tape.matmul(va, vb).unwrap();
    let loss = tape.sum(ab);
    tape.backward(loss).unwrap();
    let g = tape.grad(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let row_sum: f64 = b.row(k).iter().sum();
            assert!((g.get2(i, k) - row_sum).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = random(&mut rng, &[5], -3.0, 3.0);
    let x = tape.constant(v.clone());
    let s = tape.softmax(x, 0).unwrap();
    let total: f64 = v.data().iter().map(|x| x.exp()).sum();
    for (got, x) in tape.value(s).data().iter().zip(v.data()) {
        assert!((got - x.exp() / total).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[7, 9], -50.0, 50.0));
    for axis in [0, 1] {
        let s = tape.softmax(x, axis).unwrap();
        let sums = tape.sum_axis(s, axis).unwrap();
        assert!(tape.value(sums).data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }
}

#[test]
fn backward_examples() {
    let x0 = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    let expect: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(tape.grad(x).unwrap().data(), expect.as_slice());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
    assert!(tape.backward(x).is_err());
}

#[test]
fn unreachable_nodes_have_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[3], 2.0), true);
    let unused = tape.leaf(Tensor::full(&[3], 1.0), true);
    let side = tape.exp(unused);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(unused).is_none());
    assert!(tape.grad(side).is_none());
}

#[test]
fn identity_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, &[4, 3], -1.0, 1.0);
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let i3 = tape.constant(Tensor::eye(3));
    let i4 = tape.constant(Tensor::eye(4));
    let left = tape.matmul(i4, va).unwrap();
    let right = tape.matmul(va, i3).unwrap();
    let both = tape.matmul(left, i3).unwrap();
    assert_eq!(tape.value(left), &a);
    assert_eq!(tape.value(right), &a);
    assert_eq!(tape.value(both), &a);

    // kernel [1] with dilation 1 is the identity
    let w = tape.constant(Tensor::new(vec![1, 3, 3], Tensor::eye(3).into_data()).unwrap());
    let y = tape.conv1d(va, w, None, 1).unwrap();
    assert_eq!(tape.value(y), &a);
}

#[test]
fn conv_output_length_is_preserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[10, 2], -1.0, 1.0));
    for dilation in [1, 3, 8, 64] {
        let w = tape.constant(random(&mut rng, &[3, 2, 5], -1.0, 1.0));
        let y = tape.conv1d(x, w, None, dilation).unwrap();
        assert_eq!(tape.value(y).shape(), &[10, 5]);
    }
}

#[test]
fn attention_weights_respect_the_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let t = 20;
    for window in [1, 2, 3, 4, 8, 16, 32] {
        let mut tape = Tape::new();
        let q = tape.constant(random(&mut rng, &[t, 4], -2.0, 2.0));
        let k = tape.constant(random(&mut rng, &[t, 4], -2.0, 2.0));
        let v = tape.constant(random(&mut rng, &[t, 3], -2.0, 2.0));
        let out = tape.local_attention(q, k, v, window).unwrap();
        let w = tape.attention_weights(out).unwrap();
        for i in 0..t {
            let (s, e) = attention_window(i, window, t);
            assert_eq!(e - s, window.min(t));
            assert!(s <= i && i < e);
            for j in 0..t {
                if j < s || j >= e {
                    assert_eq!(w.get2(i, j), 0.0, "w={window} i={i} j={j}");
                } else {
                    assert!(w.get2(i, j) > 0.0);
                }
            }
        }
    }
}

#[test]
fn attention_degenerate_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = 9;
    let qk = random(&mut rng, &[t, 3], -1.0, 1.0);
    let v = random(&mut rng, &[t, 3], -1.0, 1.0);

    let mut tape = Tape::new();
    let q = tape.constant(qk.clone());
    let vv = tape.constant(v.clone());
    let one = tape.local_attention(q, q, vv, 1).unwrap();
    assert_eq!(tape.value(one), &v);

    // window >= T equals dense attention computed by hand
    let wide = tape.local_attention(q, q, vv, 100).unwrap();
    let qt = tape.transpose(q).unwrap();
    let scores = tape.matmul(q, qt).unwrap();
    let scores = tape.scale(scores, 1.0 / 3f64.sqrt());
    let p = tape.softmax(scores, 1).unwrap();
    let dense = tape.matmul(p, vv).unwrap();
    assert!(tape.value(wide).max_abs_diff(tape.value(dense)) < 1e-12);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, &[12, 4], -1.0, 1.0));
        let w = tape.constant(random(&mut rng, &[3, 4, 4], -1.0, 1.0));
        let h = tape.conv1d(x, w, None, 2).unwrap();
        let h = tape.instance_norm(h).unwrap();
        let a = tape.local_attention(h, h, h, 4).unwrap();
        tape.value(a).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
